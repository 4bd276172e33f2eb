"""Lookup-table neural networks: training, truth-table compilation and RTL emission."""

__version__ = "0.1.0"
