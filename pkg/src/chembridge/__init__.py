"""Thin contrastive bridges between molecular fingerprints and biomedical text."""

__version__ = "0.1.0"
