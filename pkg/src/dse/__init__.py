"""Dialogue sentence embeddings via contrastive learning on consecutive utterances."""

__version__ = "0.1.0"
