"""Realism-aligned fine-tuning of a toy multi-agent traffic simulator."""

__version__ = "0.1.0"
