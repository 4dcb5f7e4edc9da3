"""Two-tower image/text embedding toolkit with hinge-based hard-negative training."""

__version__ = "0.1.0"
