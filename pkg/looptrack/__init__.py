"""looptrack: self-supervised Siamese tracking trained by forward-backward cycles."""

__version__ = "0.1.0"
