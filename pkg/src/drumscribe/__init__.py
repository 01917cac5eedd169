"""Generative drum transcription at desk scale: events, diffusion, training, scoring."""

__version__ = "0.1.0"
