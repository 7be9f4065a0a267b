"""Log-linear attention with learned memory-level weights."""

__version__ = "0.1.0"
