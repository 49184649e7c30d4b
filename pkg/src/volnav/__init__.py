"""Language-driven viewpoint navigation for scalar volumes."""

__version__ = "0.1.0"
