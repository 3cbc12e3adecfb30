"""Meta-trained confidence estimation on synthetic benchmarks."""

__version__ = "0.1.0"
