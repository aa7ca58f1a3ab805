"""Desk-scale POI verification: a staged geo/OCR/rank pipeline and a
multimodal-embedding pipeline with approximate nearest-neighbour search,
over a deterministic synthetic corpus."""

__version__ = "0.1.0"
