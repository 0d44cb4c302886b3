"""Span- and document-level diagnosis label extraction for echocardiogram reports."""

__version__ = "0.1.0"
