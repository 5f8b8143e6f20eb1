"""Discrete-event model of a 5G core extended with ICN anchors, label-based producer
mobility and an ICN/IP edge-computing comparison."""

__version__ = "0.1.0"
