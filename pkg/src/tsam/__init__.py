"""Multi-modal knowledge graph completion with fused modality embeddings."""

__version__ = "0.1.0"
