"""1D Wasserstein distances between equal-size samples via order statistics.

``W_p(x, y) = (mean |x_(i) - y_(i)|^p)^(1/p)`` with ``x_(i)`` the i-th
smallest value. The first argument may be a graph node; the second is
always treated as a constant target.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node

SQRT_EPS = 1e-12


class TransportError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    p: int = 1
    site_weights: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        if self.p not in (1, 2):
            raise TransportError(f"p must be 1 or 2, got {self.p}")


def _check_p(p: int) -> None:
    if p not in (1, 2):
        raise TransportError(f"p must be 1 or 2, got {p}")


def _const(y) -> np.ndarray:
    return y.value if isinstance(y, Node) else np.asarray(y, dtype=np.float64)


def wp_distance(x, y, p: int = 1) -> Node:
    x = ad.as_node(x)
    y = np.sort(_const(y))
    _check_p(p)
    if x.value.ndim != 1 or y.ndim != 1:
        raise TransportError("wp_distance expects vectors")
    if x.shape[0] == 0:
        raise TransportError("empty samples")
    if x.shape[0] != y.shape[0]:
        raise TransportError(f"length mismatch {x.shape[0]} != {y.shape[0]}")
    diff = ad.sort_ascending(x).sorted_values - y
    if p == 1:
        return ad.mean(ad.abs(diff))
    return ad.sqrt(ad.mean(diff * diff), eps=SQRT_EPS)


def wp_columns(x, y, p: int = 1) -> Node:
    """Per-column ``W_p`` for two ``N x d`` samples; returns a length-``d`` node."""
    x = ad.as_node(x)
    y = np.sort(_const(y), axis=0)
    _check_p(p)
    if x.value.ndim != 2 or x.shape != y.shape:
        raise TransportError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.shape[0] == 0:
        raise TransportError("empty samples")
    diff = ad.sort_columns(x).sorted_values - y
    if p == 1:
        return ad.mean(ad.abs(diff), axis=0)
    return ad.sqrt(ad.mean(diff * diff, axis=0), eps=SQRT_EPS)


def wp_columns_np(x: np.ndarray, y: np.ndarray, p: int = 1) -> np.ndarray:
    """Graph-free version of :func:`wp_columns` for evaluation."""
    _check_p(p)
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape != y.shape or x.shape[0] == 0:
        raise TransportError(f"shape mismatch {x.shape} vs {y.shape}")
    diff = np.abs(np.sort(x, axis=0) - np.sort(y, axis=0))
    return diff.mean(axis=0) if p == 1 else np.sqrt((diff**2).mean(axis=0))


def _check_records(steered: Mapping, target: Mapping) -> list[str]:
    if set(steered) != set(target):
        raise TransportError(f"site mismatch {sorted(steered)} vs {sorted(target)}")
    sites = list(steered)
    for s in sites:
        if ad.as_node(steered[s]).shape != _const(target[s]).shape:
            raise TransportError(f"site {s!r}: sample-count or width mismatch")
    return sites


def alignment_loss(steered: Mapping, target: Mapping, cfg: LossConfig = LossConfig()) -> Node:
    """Sum over sites and neurons of the per-column ``W_p``, in site order."""
    sites = _check_records(steered, target)
    weights = cfg.site_weights or {}
    total = None
    for s in sites:
        term = ad.sum(wp_columns(steered[s], target[s], cfg.p))
        if s in weights:
            term = ad.scale(term, float(weights[s]))
        total = term if total is None else total + term
    if total is None:
        raise TransportError("no sites to align")
    return total


def alignment_loss_np(steered: Mapping, target: Mapping, p: int = 1) -> float:
    _check_records(steered, target)
    return float(sum(wp_columns_np(steered[s], target[s], p).sum() for s in steered))


def transport_gap(source, target, params: tuple, lam: float, p: int = 1) -> float:
    """``W_p`` between the ``(w, b, lam)``-steered source and the target (scalars or 1-vectors)."""
    w, b = params
    source = np.asarray(source, dtype=np.float64)
    steered = (1.0 - lam) * source + lam * (np.asarray(w) * source + np.asarray(b))
    return float(wp_distance(steered, target, p).value)


def resample_rows(a: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Bring ``a`` to exactly ``n`` rows: unchanged if it already has ``n``, else draw with replacement."""
    if a.shape[0] == n:
        return a
    if a.shape[0] == 0:
        raise TransportError("cannot resample an empty sample")
    return a[rng.integers(0, a.shape[0], size=n)]
