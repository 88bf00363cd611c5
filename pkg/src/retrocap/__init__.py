"""Retrieval-augmented image captioning with pluggable model backends."""

__version__ = "0.1.0"
