"""Random-weight deep prior search and continual learning on linear heads."""

__version__ = "0.1.0"
