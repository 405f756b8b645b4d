"""Output-space fidelity metrics and the evaluation tables built on them.

Input fidelity is the mean cosine between steered and unsteered outputs.
Concept fidelity is the mean cosine between the steered shift away from the
average unsteered output and the direction from that average to the
concept's mean output. Both are stand-ins for text-image scores: only their
orderings and differences are meaningful.

Every metric is measured on the held-out source rows (``world.source.eval``).
Baselines are fitted on ``world.source.fit``, and the target distribution of
a concept is the generator's response to its text samples.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .estimators import EstimatorConfig, FitReport, equalize, estimate
from .generator import Generator, forward, forward_capture
from .hypernet import HypernetState, predict
from .steering import InterventionParams, with_strength
from .transport import alignment_loss_np
from .world import ConceptSpec, World, encode

LAMBDA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
NSHOT_GRID = (1, 2, 4, 8, 16, 32)


class EvalError(ValueError):
    pass


def _cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise EvalError("zero-norm output vector")
    return np.clip(np.sum(a * b, axis=1) / (na * nb), -1.0, 1.0)


def input_fidelity(g: Generator, inputs: np.ndarray, params: Optional[InterventionParams]) -> float:
    base = forward(g, inputs)
    steered = base if params is None else forward(g, inputs, params)
    cos = _cosines(steered, base)
    # an untouched row scores exactly 1, free of rounding in the norms
    cos[np.all(steered == base, axis=1)] = 1.0
    return float(cos.mean())


def concept_fidelity(
    g: Generator,
    inputs: np.ndarray,
    params: Optional[InterventionParams],
    target_mean: np.ndarray,
    src_baseline: np.ndarray,
) -> float:
    direction = np.asarray(target_mean) - np.asarray(src_baseline)
    if np.linalg.norm(direction) == 0:
        raise EvalError("target mean equals the source baseline")
    out = forward(g, inputs, params)
    shift = out - src_baseline
    return float(_cosines(shift, np.broadcast_to(direction, shift.shape)).mean())


@dataclass
class ConceptContext:
    """Everything needed to score interventions for one concept."""

    concept: ConceptSpec
    inputs: np.ndarray
    src_baseline: np.ndarray
    target_mean: np.ndarray
    target_record: dict

    def input_fidelity(self, g: Generator, params) -> float:
        return input_fidelity(g, self.inputs, params)

    def concept_fidelity(self, g: Generator, params) -> float:
        return concept_fidelity(g, self.inputs, params, self.target_mean, self.src_baseline)

    def loss(self, g: Generator, params, p: int = 1) -> float:
        _, rec = forward_capture(g, self.inputs, params)
        return alignment_loss_np(rec, self.target_record, p)


def concept_context(world: World, g: Generator, concept: ConceptSpec, seed: int = 0) -> ConceptContext:
    inputs = world.source.eval
    src_out = forward(g, inputs)
    tgt_x = concept.samples_text
    tgt_out, _ = forward_capture(g, tgt_x)
    _, tgt_eq = equalize(inputs, tgt_x, seed)
    _, tgt_rec = forward_capture(g, tgt_eq)
    return ConceptContext(concept, inputs, src_out.mean(axis=0), tgt_out.mean(axis=0), tgt_rec)


def fit_baseline(world: World, g: Generator, concept: ConceptSpec, cfg: EstimatorConfig) -> FitReport:
    return estimate(g, world.source.fit, concept.samples_text, cfg)


def timed_predict(state: HypernetState, samples: np.ndarray, mode="average") -> tuple[InterventionParams, float]:
    t0 = time.perf_counter()
    params = predict(state, encode(samples, mode))
    return params, time.perf_counter() - t0


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    rows: list[dict]
    per_concept: list[dict] = field(default_factory=list)

    def row(self, method: str) -> dict:
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)

    def write_csv(self, path: str | Path) -> None:
        write_rows(self.rows, path)

    def write_per_concept_csv(self, path: str | Path) -> None:
        write_rows(self.per_concept, path)


def write_rows(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise EvalError("nothing to write")
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _sd(x: Sequence[float]) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def _summarize(method: str, split: str, recs: list[dict]) -> dict:
    col = lambda k: [r[k] for r in recs]  # noqa: E731
    return {
        "method": method,
        "split": split,
        "n": len(recs),
        "seconds": float(np.mean(col("seconds"))),
        "input_fid_mean": float(np.mean(col("input_fid"))),
        "input_fid_sd": _sd(col("input_fid")),
        "concept_fid_mean": float(np.mean(col("concept_fid"))),
        "concept_fid_sd": _sd(col("concept_fid")),
        "loss_mean": float(np.mean(col("loss"))),
        "loss_sd": _sd(col("loss")),
    }


def compare_methods(
    world: World,
    g: Generator,
    methods: Iterable[str] = ("caa", "iti", "linact", "lineas"),
    state: Optional[HypernetState] = None,
    concepts: Optional[Sequence[ConceptSpec]] = None,
    est_cfg: Optional[EstimatorConfig] = None,
    loss_p: int = 1,
) -> EvalReport:
    """Table-1-shaped comparison on the given concepts (default: the test split)."""
    concepts = list(world.test if concepts is None else concepts)
    if not concepts:
        raise EvalError("no concepts to evaluate")
    methods = list(methods)
    split = concepts[0].split if len({c.split for c in concepts}) == 1 else "mixed"
    per = {m: [] for m in ["unsteered", *methods] + (["hypernet"] if state is not None else [])}
    base_cfg = est_cfg or EstimatorConfig()
    for c in concepts:
        ctx = concept_context(world, g, c, base_cfg.seed)
        candidates: list[tuple[str, Optional[InterventionParams], float]] = [("unsteered", None, 0.0)]
        for m in methods:
            rep = fit_baseline(world, g, c, EstimatorConfig(**{**base_cfg.__dict__, "method": m}))
            candidates.append((m, rep.params, rep.wall_time))
        if state is not None:
            params, secs = timed_predict(state, c.samples_text)
            candidates.append(("hypernet", params, secs))
        for name, params, secs in candidates:
            per[name].append(
                {
                    "method": name,
                    "concept": c.id,
                    "seconds": secs,
                    "input_fid": ctx.input_fidelity(g, params),
                    "concept_fid": ctx.concept_fidelity(g, params),
                    "loss": ctx.loss(g, params, loss_p),
                }
            )
    rows = [_summarize(m, split, recs) for m, recs in per.items()]
    return EvalReport(rows, [r for recs in per.values() for r in recs])


def lambda_sweep(g: Generator, params: InterventionParams, ctx: ConceptContext, grid: Sequence[float] = LAMBDA_GRID) -> list[dict]:
    if any(lam < 0 for lam in grid):
        raise EvalError("lambda grid must be non-negative")
    rows = []
    for lam in grid:
        p = with_strength(params, lam)
        inp = ctx.input_fidelity(g, p)
        con = ctx.concept_fidelity(g, p)
        rows.append({"lambda": float(lam), "input_fid": inp, "concept_fid": con, "mean": (inp + con) / 2})
    return rows


def lambda_table(
    world: World,
    g: Generator,
    params_for: Callable[[ConceptSpec], InterventionParams],
    grid: Sequence[float] = LAMBDA_GRID,
    concepts: Optional[Sequence[ConceptSpec]] = None,
) -> tuple[list[dict], list[list[dict]]]:
    """λ sweep averaged over concepts; also returns the per-concept sweeps."""
    concepts = list(world.test if concepts is None else concepts)
    sweeps = [lambda_sweep(g, params_for(c), concept_context(world, g, c), grid) for c in concepts]
    rows = []
    for i, lam in enumerate(grid):
        inp = float(np.mean([s[i]["input_fid"] for s in sweeps]))
        con = float(np.mean([s[i]["concept_fid"] for s in sweeps]))
        rows.append({"lambda": float(lam), "input_fid": inp, "concept_fid": con, "mean": (inp + con) / 2})
    return rows, sweeps


def nshot_sweep(
    world: World,
    g: Generator,
    state: HypernetState,
    ns: Sequence[int] = NSHOT_GRID,
    seed: int = 0,
    concepts: Optional[Sequence[ConceptSpec]] = None,
) -> list[dict]:
    """Condition on the average of ``N`` random text samples per concept."""
    concepts = list(world.test if concepts is None else concepts)
    limit = world.config.samples_per_concept
    if any(n < 1 or n > limit for n in ns):
        raise EvalError(f"N must lie in [1, {limit}]")
    ctxs = [concept_context(world, g, c) for c in concepts]
    unsteered = float(np.mean([ctx.concept_fidelity(g, None) for ctx in ctxs]))
    rows = []
    for n in ns:
        inp, con = [], []
        for c, ctx in zip(concepts, ctxs):
            rng = np.random.default_rng(np.random.SeedSequence([seed, n, c.id]))
            idx = rng.choice(c.samples_text.shape[0], size=n, replace=False)
            params = predict(state, encode(c.samples_text[idx], "average"))
            inp.append(ctx.input_fidelity(g, params))
            con.append(ctx.concept_fidelity(g, params))
        rows.append(
            {
                "n": n,
                "input_fid_mean": float(np.mean(inp)),
                "input_fid_sd": _sd(inp),
                "concept_fid_mean": float(np.mean(con)),
                "concept_fid_sd": _sd(con),
                "unsteered_concept_fid": unsteered,
            }
        )
    return rows


def crossmodal_eval(
    world: World,
    g: Generator,
    state: HypernetState,
    concepts: Optional[Sequence[ConceptSpec]] = None,
) -> tuple[list[dict], dict]:
    """Text- vs image-conditioned predictions; returns per-concept rows and an aggregate row."""
    concepts = list(world.test if concepts is None else concepts)
    rows = []
    for c in concepts:
        if c.samples_image is None or len(c.samples_image) == 0:
            raise EvalError(f"concept {c.id} has no image samples")
        ctx = concept_context(world, g, c)
        p_txt = predict(state, encode(c.samples_text))
        p_img = predict(state, encode(c.samples_image))
        row = {
            "concept": c.id,
            "text_input_fid": ctx.input_fidelity(g, p_txt),
            "image_input_fid": ctx.input_fidelity(g, p_img),
            "text_concept_fid": ctx.concept_fidelity(g, p_txt),
            "image_concept_fid": ctx.concept_fidelity(g, p_img),
        }
        row["delta_input_fid"] = row["image_input_fid"] - row["text_input_fid"]
        row["delta_concept_fid"] = row["image_concept_fid"] - row["text_concept_fid"]
        rows.append(row)
    agg = {"concept": "mean"}
    for k in rows[0]:
        if k != "concept":
            agg[k] = float(np.mean([r[k] for r in rows]))
    return rows, agg
