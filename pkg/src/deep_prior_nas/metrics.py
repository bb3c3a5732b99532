import logging

from prometheus_client import REGISTRY, CollectorRegistry, Counter, Gauge, start_http_server

from deep_prior_nas.config import MetricsConfig

logger = logging.getLogger(__name__)


class SearchMetrics:
    """Prometheus metrics for search progress and continual runs."""

    def __init__(self, config: MetricsConfig, registry: CollectorRegistry = REGISTRY):
        self.config = config
        self.namespace = config.namespace
        self.best = 0.0

        self.architectures_evaluated = Counter(
            f"{self.namespace}_architectures_evaluated",
            "Architectures evaluated by the search",
            registry=registry,
        )

        self.architectures_rejected = Counter(
            f"{self.namespace}_architectures_rejected",
            "Sampled architectures rejected before evaluation",
            ["reason"],
            registry=registry,
        )

        self.last_reward = Gauge(
            f"{self.namespace}_last_reward",
            "Validation accuracy of the most recently evaluated architecture",
            registry=registry,
        )

        self.rolling_reward = Gauge(
            f"{self.namespace}_rolling_reward",
            "Trailing moving average of search rewards",
            registry=registry,
        )

        self.best_reward = Gauge(
            f"{self.namespace}_best_reward",
            "Best validation accuracy seen so far",
            registry=registry,
        )

        self.epsilon = Gauge(
            f"{self.namespace}_epsilon",
            "Current exploration probability",
            registry=registry,
        )

        self.increment_accuracy = Gauge(
            f"{self.namespace}_increment_accuracy",
            "Accuracy after the latest continual increment",
            ["scenario"],
            registry=registry,
        )

    def start_metrics_server(self) -> None:
        """Start Prometheus metrics HTTP server."""
        start_http_server(self.config.port)
        logger.info(f"Metrics server started at http://localhost:{self.config.port}/metrics")

    def record_architecture(self, reward: float, rolling: float, eps: float) -> None:
        self.architectures_evaluated.inc()
        self.last_reward.set(reward)
        self.rolling_reward.set(rolling)
        self.epsilon.set(eps)
        if reward > self.best:
            self.best = reward
            self.best_reward.set(reward)
        logger.debug(
            f"Updated search metrics: reward {reward:.4f}, rolling {rolling:.4f}, eps {eps:.2f}"
        )

    def record_rejection(self, reason: str) -> None:
        self.architectures_rejected.labels(reason=reason).inc()

    def record_increment(self, scenario: str, accuracy: float) -> None:
        self.increment_accuracy.labels(scenario=scenario).set(accuracy)
