"""Scene-aware blind portrait quality assessment.

Multitask scene classification + quality regression with learned per-scene
affine rescaling and top-k classification-weighted score aggregation.
"""

__version__ = "0.1.0"
