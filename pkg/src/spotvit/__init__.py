"""Token sparsification for small vision transformers driven by attention dynamics."""

__version__ = "0.1.0"
