"""Road anomaly detection pipeline with V2I warning broadcast and simulation harness."""

__version__ = "0.1.0"
