"""Flowchart-grounded troubleshooting dialogs with retrieval-augmented generation."""

__version__ = "0.1.0"
