"""Affine-elementwise interventions ``(1 - lam) * a + lam * (w * a + b)``.

One ``(w, b)`` pair per hook site, a single global strength ``lam``. The
vectors may be numpy arrays (fitted/predicted params) or graph nodes (params
being trained), in which case :func:`apply` stays differentiable in them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node

Vec = Union[np.ndarray, Node]


class InterventionError(ValueError):
    pass


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class InterventionParams:
    sites: dict[str, tuple[Vec, Vec]]
    lam: Union[float, Node] = 1.0
    provenance: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lam = _value(self.lam)
        if lam.ndim != 0 or not np.isfinite(lam) or lam < 0:
            raise InterventionError(f"strength must be a finite scalar >= 0, got {lam}")
        for name, (w, b) in self.sites.items():
            wv, bv = _value(w), _value(b)
            if wv.ndim != 1 or wv.shape != bv.shape:
                raise InterventionError(f"site {name!r}: w and b must be equal-length vectors")
            if not (np.isfinite(wv).all() and np.isfinite(bv).all()):
                raise InterventionError(f"site {name!r}: non-finite parameters")

    @property
    def requires_grad(self) -> bool:
        nodes = [self.lam] + [v for wb in self.sites.values() for v in wb]
        return any(isinstance(v, Node) and v.requires_grad for v in nodes)

    @property
    def strength(self) -> float:
        return float(_value(self.lam))

    def width(self, site: str) -> int:
        return _value(self.sites[site][0]).shape[0]

    def detach(self) -> "InterventionParams":
        """Plain-numpy copy, safe to hand to another worker."""
        return InterventionParams(
            {k: (_value(w).copy(), _value(b).copy()) for k, (w, b) in self.sites.items()},
            self.strength,
            self.provenance,
            dict(self.meta),
        )

    def w(self, site: str) -> np.ndarray:
        return _value(self.sites[site][0])

    def b(self, site: str) -> np.ndarray:
        return _value(self.sites[site][1])


def apply(params: InterventionParams, site: str, a) -> Node:
    """Steer the ``N x d`` activations ``a`` at ``site``."""
    if site not in params.sites:
        raise InterventionError(f"unknown site {site!r}")
    a = ad.as_node(a)
    w, b = params.sites[site]
    d = _value(w).shape[0]
    if a.value.ndim != 2 or a.shape[1] != d:
        raise InterventionError(f"site {site!r}: activations {a.shape} do not match width {d}")
    lam = params.lam
    n = a.shape[0]
    if not isinstance(lam, Node) and lam == 0.0:
        return a
    steered = a * ad.tile_rows(w, n) + ad.tile_rows(b, n)
    if isinstance(lam, Node):
        return (1.0 - lam) * a + lam * steered
    if lam == 1.0:
        return steered
    return ad.scale(a, 1.0 - lam) + ad.scale(steered, lam)


def apply_array(params: InterventionParams, site: str, a: np.ndarray) -> np.ndarray:
    return apply(params, site, a).value


def invert(params: InterventionParams, site: str, y: np.ndarray) -> np.ndarray:
    """Undo :func:`apply` featurewise; needs ``lam * w + (1 - lam) != 0``."""
    lam = params.strength
    slope = lam * params.w(site) + (1.0 - lam)
    if np.any(slope == 0):
        raise InterventionError(f"site {site!r}: map is not invertible")
    return (np.asarray(y) - lam * params.b(site)) / slope


def identity_params(sites: Iterable, provenance: str = "identity") -> InterventionParams:
    """``w = 1, b = 0`` at every site, ``lam = 1``. ``sites`` are HookSite-like (``name``, ``width``)."""
    return InterventionParams({s.name: (np.ones(s.width), np.zeros(s.width)) for s in sites}, 1.0, provenance)


def with_strength(params: InterventionParams, lam: float) -> InterventionParams:
    if lam < 0:
        raise InterventionError(f"strength must be >= 0, got {lam}")
    return replace(params, lam=float(lam))


def effective_affine(params: InterventionParams, site: str) -> tuple[np.ndarray, np.ndarray]:
    """The ``lam``-folded map ``a -> slope * a + offset``."""
    lam = params.strength
    return lam * params.w(site) + (1.0 - lam), lam * params.b(site)


def compose(first: InterventionParams, second: InterventionParams) -> InterventionParams:
    """Params equivalent to applying ``first`` and then ``second`` at each site."""
    out = {}
    for site in set(first.sites) | set(second.sites):
        if site in first.sites:
            s1, o1 = effective_affine(first, site)
        else:
            s1, o1 = np.ones(second.width(site)), np.zeros(second.width(site))
        if site in second.sites:
            s2, o2 = effective_affine(second, site)
        else:
            s2, o2 = np.ones_like(s1), np.zeros_like(o1)
        out[site] = (s2 * s1, s2 * o1 + o2)
    return InterventionParams(dict(sorted(out.items())), 1.0, f"{first.provenance}+{second.provenance}")


# ------------------------------------------------------------- serialization


def params_to_dict(params: InterventionParams) -> dict:
    p = params.detach()
    return {
        "format": "amortsteer.intervention/1",
        "provenance": p.provenance,
        "lambda": p.strength,
        "sites": {name: {"w": w.tolist(), "b": b.tolist()} for name, (w, b) in sorted(p.sites.items())},
    }


def params_from_dict(d: dict) -> InterventionParams:
    if d.get("format") != "amortsteer.intervention/1":
        raise InterventionError(f"unrecognised intervention format {d.get('format')!r}")
    sites = {name: (np.array(v["w"], dtype=np.float64), np.array(v["b"], dtype=np.float64)) for name, v in d["sites"].items()}
    return InterventionParams(sites, float(d["lambda"]), d.get("provenance", ""))


def save_params(params: InterventionParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), indent=1))


def load_params(path: str | Path) -> InterventionParams:
    return params_from_dict(json.loads(Path(path).read_text()))
