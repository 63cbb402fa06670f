"""Embedding extractor: turns a CSV manifest of labelled images into an
EMB1 file with one (visual, text, frequency) triple of 768-dim vectors
per image. Communicates with the detector only through the EMB1 file
format."""

from .emb1 import EMBED_DIM, Record, write_emb1
from .extract import ExtractionManifest, ExtractionSummary, extract, read_manifest
from .freq import frequency_embedding

__version__ = "0.1.0"

__all__ = [
    "EMBED_DIM",
    "ExtractionManifest",
    "ExtractionSummary",
    "Record",
    "extract",
    "frequency_embedding",
    "read_manifest",
    "write_emb1",
]
