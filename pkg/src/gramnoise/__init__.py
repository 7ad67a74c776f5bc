"""Gramophone noise synthesis with a variance-preserving diffusion model."""

__version__ = "0.1.0"
