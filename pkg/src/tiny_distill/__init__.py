"""Layer-aligned knowledge distillation for small decoder-only token LMs."""

__version__ = "0.1.0"
