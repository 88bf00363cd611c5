"""Model-serving sidecar for the captioning engine's HTTP backend."""

__version__ = "0.1.0"
