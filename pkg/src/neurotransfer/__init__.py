"""Neuroevolution and RL methods on curriculum transfer-learning benchmarks."""

__version__ = "0.1.0"
