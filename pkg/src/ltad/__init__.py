"""Long-tailed anomaly detection with prompt-conditioned feature synthesis,
token reconstruction and semantic scoring."""

__version__ = "0.1.0"
