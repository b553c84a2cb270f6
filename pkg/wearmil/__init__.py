"""wearmil: weakly-supervised perceived-stress estimation from wearable data."""

__version__ = "0.1.0"
