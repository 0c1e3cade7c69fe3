"""Multi-label multi-task CRNN for isolated and overlapping audio event detection."""

__version__ = "0.1.0"
