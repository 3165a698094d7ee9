"""Protective perturbations that make speech recordings hard to learn for TTS voice cloning."""

__version__ = "0.1.0"
