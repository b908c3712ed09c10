"""Layout-aware masked pre-training with 2-D position masking."""

__version__ = "0.1.0"
