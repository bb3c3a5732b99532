from deep_prior_nas.cli import run

run()
