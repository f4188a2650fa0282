"""Segment-recurrent transformer TTS at desk scale."""

__version__ = "0.1.0"
