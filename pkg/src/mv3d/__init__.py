"""Desk-scale multi-view 3D perception stack.

Synthetic multi-view scenes with exact geometry feed a coordinate-grounded
token fusion encoder, a probe-based 3D instance extractor trained with global
bipartite matching, a masked self-distillation predictor that completes
occluded regions from coordinates, and an uncertainty-gated aggregation step
producing downstream tokens.
"""

__version__ = "0.1.0"
