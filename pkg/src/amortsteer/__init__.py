"""Amortized activation steering on a synthetic concept world.

Per-concept affine interventions on a frozen toy generator, four ways of
estimating them, and a hypernetwork trained to predict them in one pass from
a concept embedding, all on a small reverse-mode differentiation engine.
"""

__version__ = "0.1.0"
