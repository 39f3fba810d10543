"""Target-speaker LF-MMI acoustic modelling with an auxiliary interference-speaker loss."""

__version__ = "0.1.0"
