"""Multi-orientation self-ensembled lesion fusion and test-time instance normalization."""

__version__ = "0.1.0"
