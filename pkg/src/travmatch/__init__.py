"""Cross-device cookie matching from multi-view URL representations."""

__version__ = "0.1.0"
