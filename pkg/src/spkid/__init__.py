"""Speaker identification from raw audio with self-supervised pretraining."""

__version__ = "0.1.0"
