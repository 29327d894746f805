"""Dynamic multi-instance learning with self- and cross-resolution distillation."""

__version__ = "0.1.0"
