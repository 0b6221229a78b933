"""Medical term embeddings from contrastive learning and knowledge graph embeddings."""

__version__ = "0.1.0"
