"""Teacher-student distillation with a locality preserving feature loss."""

__version__ = "0.1.0"
