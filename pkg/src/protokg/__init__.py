"""Prototype-guided disease prediction from patient narratives over a fused knowledge graph."""
__version__ = "0.1.0"
