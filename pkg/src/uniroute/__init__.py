"""Modality-adaptive change detection on a self-contained float64 stack.

Pixel-wise hard-routed receptive-field experts and difference primitives,
domain-specific batch normalization, and a consistency-aware self-distilled
two-stage training schedule, evaluated on a deterministic synthetic
multi-modality benchmark.
"""

__version__ = "0.1.0"
