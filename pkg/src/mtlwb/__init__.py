"""Multi-task pre-training and transfer-learning workbench."""

__version__ = "0.1.0"
