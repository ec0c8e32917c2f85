"""Cosine-distance virtual adversarial training for speaker embeddings."""
__version__ = "0.1.0"
