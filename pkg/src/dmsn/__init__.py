"""Multi-source domain-adaptive object detection with a divide-and-merge spindle network."""

__version__ = "0.1.0"
