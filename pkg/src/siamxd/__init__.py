"""Siamese cross-domain training for few-shot supervised domain adaptation."""
__version__ = "0.1.0"
