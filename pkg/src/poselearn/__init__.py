"""Transfer-learning pipeline for 82-class yoga pose classification."""

__version__ = "0.1.0"
