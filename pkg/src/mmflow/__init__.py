"""Multi-task, multi-modal flow matching on a synthetic video world."""

__version__ = "0.1.0"
