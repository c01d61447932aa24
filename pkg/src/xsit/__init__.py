"""Interpretable surface transformer: patch-based transformer encoder over
icosphere meshes with a prototypical surface patch decoder."""

__version__ = "0.1.0"
