"""Per-concept intervention estimators: CAA, ITI, Linear-AcT and LinEAS.

CAA, ITI and Linear-AcT work on activation records. By default they are run
incrementally: sites are fitted in forward order, each one on source
activations that already carry the interventions fitted upstream. LinEAS
optimizes all sites jointly through the generator.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .generator import Generator, forward_capture
from .optim import cosine_lr
from .steering import InterventionParams
from .transport import LossConfig, alignment_loss, wp_columns_np

METHODS = ("caa", "iti", "linact", "lineas")


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    method: str = "linact"
    incremental: bool = True
    lineas_steps: int = 400
    lineas_lr: float = 1e-2
    iti_l2: float = 1e-2
    iti_steps: int = 200
    eps_var: float = 1e-8
    p: int = 2  # LinEAS objective and the per-site losses in FitReport
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise EstimatorError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lineas_steps < 1 or self.iti_steps < 1:
            raise EstimatorError("step counts must be positive")
        if self.lineas_lr <= 0 or self.iti_l2 < 0 or self.eps_var <= 0:
            raise EstimatorError("lineas_lr and eps_var must be > 0, iti_l2 >= 0")
        if self.p not in (1, 2):
            raise EstimatorError(f"p must be 1 or 2, got {self.p}")


@dataclass
class FitReport:
    params: InterventionParams
    losses: dict[str, tuple[float, float]]
    wall_time: float
    method: str
    trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "wall_time": self.wall_time,
            "losses": {k: list(v) for k, v in self.losses.items()},
            "trace": list(self.trace),
        }


def _check_records(src: Mapping, tgt: Mapping) -> None:
    if set(src) != set(tgt):
        raise EstimatorError(f"record sites differ: {sorted(src)} vs {sorted(tgt)}")
    for s in src:
        if src[s].shape[0] == 0 or tgt[s].shape[0] == 0:
            raise EstimatorError(f"site {s!r}: empty record")
        if src[s].shape[1] != tgt[s].shape[1]:
            raise EstimatorError(f"site {s!r}: widths differ")


# ---------------------------------------------------------------------- CAA


def estimate_caa(src: Mapping, tgt: Mapping) -> InterventionParams:
    """``w = 1``, ``b = mean(tgt) - mean(src)`` per neuron (unpaired form)."""
    _check_records(src, tgt)
    sites = {s: (np.ones(src[s].shape[1]), tgt[s].mean(axis=0) - src[s].mean(axis=0)) for s in src}
    return InterventionParams(sites, 1.0, "caa")


# ---------------------------------------------------------------------- ITI


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float, steps: int) -> tuple[np.ndarray, float]:
    """L2-regularized logistic regression by full-batch gradient descent.

    The intercept is not penalized. Step size is 1/L for the smoothness
    constant L of the objective, so the loss decreases monotonically.
    """
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    lip = 0.25 * np.linalg.eigvalsh(xa.T @ xa / n)[-1] + l2
    step = 1.0 / lip
    beta = np.zeros(d + 1)
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    for _ in range(steps):
        z = np.clip(xa @ beta, -500, 500)
        sig = 1.0 / (1.0 + np.exp(-z))
        grad = xa.T @ (sig - y) / n + reg * beta
        beta -= step * grad
    return beta[:-1], float(beta[-1])


def estimate_iti(src: Mapping, tgt: Mapping, cfg: EstimatorConfig = EstimatorConfig(method="iti")) -> InterventionParams:
    """Shift along the unit normal of a source-vs-target logistic classifier.

    The magnitude is the class-mean gap projected onto that normal.
    """
    _check_records(src, tgt)
    sites = {}
    for s in src:
        a, t = src[s], tgt[s]
        if a.shape[0] < 2 or t.shape[0] < 2:
            raise EstimatorError(f"site {s!r}: ITI needs >= 2 samples per class")
        x = np.vstack([a, t])
        y = np.concatenate([np.zeros(len(a)), np.ones(len(t))])
        coef, _ = fit_logistic(x, y, cfg.iti_l2, cfg.iti_steps)
        norm = np.linalg.norm(coef)
        if norm == 0.0:
            b = np.zeros(a.shape[1])
        else:
            u = coef / norm
            b = float((t.mean(axis=0) - a.mean(axis=0)) @ u) * u
        sites[s] = (np.ones(a.shape[1]), b)
    return InterventionParams(sites, 1.0, "iti")


# --------------------------------------------------------------- Linear-AcT


def linact_columns(src: np.ndarray, tgt: np.ndarray, eps_var: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Least squares of sorted target on sorted source, column by column.

    Negative slopes are clamped to 0 with a mean-matching bias; columns with
    variance below ``eps_var`` fall back to a pure mean shift.
    """
    src = np.atleast_2d(np.asarray(src, dtype=np.float64).T).T
    tgt = np.atleast_2d(np.asarray(tgt, dtype=np.float64).T).T
    if src.shape != tgt.shape:
        raise EstimatorError(f"linact needs equal shapes, got {src.shape} and {tgt.shape}")
    if src.shape[0] < 2:
        raise EstimatorError("linact needs at least 2 samples")
    s = np.sort(src, axis=0)
    t = np.sort(tgt, axis=0)
    ms, mt = s.mean(axis=0), t.mean(axis=0)
    var = ((s - ms) ** 2).mean(axis=0)
    cov = ((s - ms) * (t - mt)).mean(axis=0)
    flat = var < eps_var
    w = np.where(flat, 1.0, cov / np.where(flat, 1.0, var))
    b = mt - w * ms
    b = np.where(flat, mt - ms, b)
    neg = w < 0
    w = np.where(neg, 0.0, w)
    b = np.where(neg, mt, b)
    return w, b


def estimate_linact_site(src_col, tgt_col, eps_var: float = 1e-8) -> tuple[float, float]:
    w, b = linact_columns(np.asarray(src_col)[:, None], np.asarray(tgt_col)[:, None], eps_var)
    return float(w[0]), float(b[0])


def estimate_linact(src: Mapping, tgt: Mapping, cfg: EstimatorConfig = EstimatorConfig()) -> InterventionParams:
    _check_records(src, tgt)
    sites = {s: linact_columns(src[s], tgt[s], cfg.eps_var) for s in src}
    return InterventionParams(sites, 1.0, "linact")


_RECORD_ESTIMATORS = {
    "caa": lambda s, t, cfg: estimate_caa(s, t),
    "iti": estimate_iti,
    "linact": estimate_linact,
}


# ------------------------------------------------------- generator-level fits


def equalize(src: np.ndarray, tgt: np.ndarray, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Bring two sample sets to a common row count.

    A set whose size divides the other's is tiled, which leaves its empirical
    distribution untouched; otherwise the smaller set is resampled with
    replacement.
    """
    n, m = len(src), len(tgt)
    if n == 0 or m == 0:
        raise EstimatorError("empty inputs")
    if n == m:
        return src, tgt
    big = max(n, m)
    rng = np.random.default_rng(seed)

    def grow(a):
        if len(a) == big:
            return a
        if big % len(a) == 0:
            return np.tile(a, (big // len(a), 1))
        return a[rng.integers(0, len(a), size=big)]

    return grow(src), grow(tgt)


def _site_losses(g: Generator, src_x, tgt_rec, params: InterventionParams, p: int, before: Mapping | None = None):
    _, rec = forward_capture(g, src_x, params.detach())
    if before is None:
        _, before = forward_capture(g, src_x)
    return {
        s: (float(wp_columns_np(before[s], tgt_rec[s], p).sum()), float(wp_columns_np(rec[s], tgt_rec[s], p).sum()))
        for s in params.sites
    }


def estimate_independent(method: str, g: Generator, src_inputs, tgt_inputs, cfg: EstimatorConfig) -> FitReport:
    """Fit every site at once on unintervened activations."""
    t0 = time.perf_counter()
    src_x, tgt_x = equalize(np.asarray(src_inputs), np.asarray(tgt_inputs), cfg.seed)
    _, src_rec = forward_capture(g, src_x)
    _, tgt_rec = forward_capture(g, tgt_x)
    params = _RECORD_ESTIMATORS[method](src_rec, tgt_rec, cfg)
    wall = time.perf_counter() - t0
    return FitReport(params, _site_losses(g, src_x, tgt_rec, params, cfg.p, src_rec), wall, method)


def estimate_incremental(base: str, g: Generator, src_inputs, tgt_inputs, cfg: EstimatorConfig) -> FitReport:
    """Fit sites one at a time in forward order, each on already-steered activations."""
    if base not in _RECORD_ESTIMATORS:
        raise EstimatorError(f"incremental fitting supports {sorted(_RECORD_ESTIMATORS)}, not {base!r}")
    t0 = time.perf_counter()
    src_x, tgt_x = equalize(np.asarray(src_inputs), np.asarray(tgt_inputs), cfg.seed)
    _, tgt_rec = forward_capture(g, tgt_x)
    fitted: dict = {}
    losses = {}
    for site in g.site_names:
        _, rec = forward_capture(g, src_x, InterventionParams(dict(fitted), 1.0) if fitted else None)
        one = _RECORD_ESTIMATORS[base]({site: rec[site]}, {site: tgt_rec[site]}, cfg)
        fitted[site] = one.sites[site]
        after = one.sites[site][0] * rec[site] + one.sites[site][1]
        losses[site] = (
            float(wp_columns_np(rec[site], tgt_rec[site], cfg.p).sum()),
            float(wp_columns_np(after, tgt_rec[site], cfg.p).sum()),
        )
    wall = time.perf_counter() - t0
    return FitReport(InterventionParams(fitted, 1.0, base), losses, wall, base)


def estimate_lineas(g: Generator, src_inputs, tgt_inputs, cfg: EstimatorConfig = EstimatorConfig(method="lineas")) -> FitReport:
    """Joint gradient descent on the alignment loss, starting from identity."""
    t0 = time.perf_counter()
    src_x, tgt_x = equalize(np.asarray(src_inputs), np.asarray(tgt_inputs), cfg.seed)
    _, src_rec = forward_capture(g, src_x)
    _, tgt_rec = forward_capture(g, tgt_x)
    leaves = {s.name: (ad.leaf(np.ones(s.width)), ad.leaf(np.zeros(s.width))) for s in g.sites}
    loss_cfg = LossConfig(p=cfg.p)
    trace = []
    last = cfg.lineas_steps - 1
    for step in range(cfg.lineas_steps):
        _, rec = forward_capture(g, src_x, InterventionParams(leaves, 1.0))
        loss = alignment_loss(rec, tgt_rec, loss_cfg)
        if not np.isfinite(loss.value):
            raise EstimatorError(f"lineas diverged at step {step}")
        trace.append(float(loss.value))
        ad.backward(loss)
        lr = cosine_lr(step, last, cfg.lineas_lr)
        for w, b in leaves.values():
            w.value -= lr * w.grad
            b.value -= lr * b.grad
            w.zero_grad()
            b.zero_grad()
    params = InterventionParams({s: (w.value.copy(), b.value.copy()) for s, (w, b) in leaves.items()}, 1.0, "lineas")
    wall = time.perf_counter() - t0
    return FitReport(params, _site_losses(g, src_x, tgt_rec, params, cfg.p, src_rec), wall, "lineas", trace)


def estimate(g: Generator, src_inputs, tgt_inputs, cfg: EstimatorConfig) -> FitReport:
    """Dispatch on ``cfg.method`` (and ``cfg.incremental`` for record-based methods)."""
    if cfg.method == "lineas":
        return estimate_lineas(g, src_inputs, tgt_inputs, cfg)
    if cfg.incremental:
        return estimate_incremental(cfg.method, g, src_inputs, tgt_inputs, cfg)
    return estimate_independent(cfg.method, g, src_inputs, tgt_inputs, cfg)
