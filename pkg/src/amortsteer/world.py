"""Synthetic concept world: a smooth concept manifold in a shared text/image embedding space.

Concept centers are ``normalize(A @ z + axis)`` for a fixed random map ``A`` with
orthonormal columns (times ``concept_spread``), a shared axis orthogonal to its
range, and latent ``z`` drawn from the unit ball, so held-out concepts live on the
same manifold as the training ones. The shared axis puts every concept in one
cone, as pretrained multimodal embeddings are; ``radial_power > 1`` makes the
latent ball denser at its core so that rim concepts are genuine outliers.

Samples stand in for encoded sentences (text) or encoded reference images; the
image modality is a fixed near-identity rotation of the text space.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

TRAIN, TEST = "train", "test"


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    embed_dim: int = 32
    latent_dim: int = 4
    n_concepts: int = 96
    samples_per_concept: int = 32
    sample_noise: float = 0.05
    modality_gap: float = 0.1
    seed: int = 0
    split_fracs: tuple[float, float] = (0.8, 0.2)
    source_size: int = 256
    source_eval: int = 64
    source_cos_cap: float = 0.6
    concept_spread: float = 1.0
    radial_power: float = 1.5

    def validate(self) -> None:
        if self.n_concepts < 2:
            raise WorldError(f"need at least 2 concepts, got {self.n_concepts}")
        if self.sample_noise < 0:
            raise WorldError(f"sample_noise must be >= 0, got {self.sample_noise}")
        if self.modality_gap < 0:
            raise WorldError(f"modality_gap must be >= 0, got {self.modality_gap}")
        if not 1 <= self.latent_dim < self.embed_dim:
            raise WorldError("need 1 <= latent_dim < embed_dim")
        if self.samples_per_concept < 1:
            raise WorldError("samples_per_concept must be >= 1")
        if len(self.split_fracs) != 2 or min(self.split_fracs) < 0 or not np.isclose(sum(self.split_fracs), 1.0):
            raise WorldError(f"split fractions must be two non-negative numbers summing to 1, got {self.split_fracs}")
        if not 0 < self.source_eval < self.source_size:
            raise WorldError("need 0 < source_eval < source_size")
        if not 0 < self.source_cos_cap <= 1:
            raise WorldError("source_cos_cap must lie in (0, 1]")
        if self.concept_spread <= 0 or self.radial_power <= 0:
            raise WorldError("concept_spread and radial_power must be positive")


@dataclass
class ConceptSpec:
    id: int
    latent: np.ndarray
    center: np.ndarray
    samples_text: np.ndarray
    samples_image: np.ndarray
    split: str

    @property
    def samples_per_concept(self) -> int:
        return self.samples_text.shape[0]


@dataclass
class SourcePool:
    """Generic inputs that carry none of the concepts.

    The last ``n_eval`` rows are reserved for evaluation; training and
    per-concept fitting draw from the rest.
    """

    samples: np.ndarray
    n_eval: int = 64

    @property
    def fit(self) -> np.ndarray:
        return self.samples[: len(self.samples) - self.n_eval]

    @property
    def eval(self) -> np.ndarray:
        return self.samples[len(self.samples) - self.n_eval :]


@dataclass
class World:
    config: WorldConfig
    concepts: list[ConceptSpec]
    source: SourcePool
    mixing: np.ndarray = field(repr=False)
    axis: np.ndarray = field(repr=False)
    rotation: np.ndarray = field(repr=False)

    def split(self, name: str) -> list[ConceptSpec]:
        return [c for c in self.concepts if c.split == name]

    @property
    def train(self) -> list[ConceptSpec]:
        return self.split(TRAIN)

    @property
    def test(self) -> list[ConceptSpec]:
        return self.split(TEST)

    def concept(self, cid: int) -> ConceptSpec:
        for c in self.concepts:
            if c.id == cid:
                return c
        raise KeyError(f"no concept with id {cid}")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def modality_rotation(dim: int, gap: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal ``expm(gap * S)`` with ``S`` skew-symmetric of unit spectral norm."""
    g = rng.standard_normal((dim, dim))
    if gap == 0:
        return np.eye(dim)
    s = g - g.T
    s /= np.linalg.norm(s, 2)
    r = expm(gap * s)
    # re-orthogonalize away the expm round-off
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def _stratified_split(latents: np.ndarray, test_frac: float, rng: np.random.Generator) -> list[str]:
    """Systematic sampling over concepts ordered by latent radius stratum, then orthant.

    Strata hold about ``1 / test_frac`` concepts of similar latent radius, so each
    contributes about one test concept; inside a stratum the orthant code spreads
    the picks across the latent octants.
    """
    n, d = latents.shape
    if test_frac <= 0:
        return [TRAIN] * n
    n_strata = max(1, int(round(n * test_frac)))
    radius_rank = np.argsort(np.argsort(np.linalg.norm(latents, axis=1), kind="stable"), kind="stable")
    stratum = radius_rank * n_strata // n
    code = ((latents > 0) * (1 << np.arange(d))).sum(axis=1)
    order = np.lexsort((rng.permutation(n), code, stratum))
    splits = [TRAIN] * n
    for pos, idx in enumerate(order):
        if np.floor((pos + 1) * test_frac + 1e-9) > np.floor(pos * test_frac + 1e-9):
            splits[idx] = TEST
    return splits


def _source_pool(cfg: WorldConfig, centers: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    rows: list[np.ndarray] = []
    while len(rows) < cfg.source_size:
        batch = _normalize_rows(rng.standard_normal((cfg.source_size, cfg.embed_dim)))
        ok = (batch @ centers.T).max(axis=1) < cfg.source_cos_cap
        rows.extend(batch[ok])
    return np.array(rows[: cfg.source_size])


def build_world(cfg: WorldConfig) -> World:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    basis, _ = np.linalg.qr(rng.standard_normal((cfg.embed_dim, cfg.latent_dim + 1)))
    mixing = cfg.concept_spread * basis[:, : cfg.latent_dim]
    axis = basis[:, cfg.latent_dim]
    rotation = modality_rotation(cfg.embed_dim, cfg.modality_gap, rng)

    direction = _normalize_rows(rng.standard_normal((cfg.n_concepts, cfg.latent_dim)))
    radius = rng.uniform(size=(cfg.n_concepts, 1)) ** cfg.radial_power
    latents = direction * radius
    centers = _normalize_rows(latents @ mixing.T + axis)

    splits = _stratified_split(latents, cfg.split_fracs[1], rng)
    concepts = []
    for i in range(cfg.n_concepts):
        noise = cfg.sample_noise * rng.standard_normal((cfg.samples_per_concept, cfg.embed_dim))
        text = _normalize_rows(centers[i] + noise)
        # paired with the text samples: same noise around the rotated center
        image = _normalize_rows(rotation @ centers[i] + noise)
        concepts.append(ConceptSpec(i, latents[i], centers[i], text, image, splits[i]))

    pool = SourcePool(_source_pool(cfg, centers, rng), cfg.source_eval)
    return World(cfg, concepts, pool, mixing, axis, rotation)


def encode(samples: np.ndarray, mode: str | int = "average") -> np.ndarray:
    """Conditioning embedding: unit-normalized mean of the rows, or a single row.

    ``mode`` is ``"average"`` or an integer row index.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise WorldError("encode needs at least one sample row")
    if mode == "average":
        v = samples.mean(axis=0)
    else:
        i = int(mode)
        if not 0 <= i < samples.shape[0]:
            raise WorldError(f"row {i} out of range for {samples.shape[0]} samples")
        v = samples[i]
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise WorldError("zero-norm embedding")
    return v / norm


# ------------------------------------------------------------ distance stats


@dataclass
class DistanceReport:
    ids: list[int]
    splits: list[str]
    distances: np.ndarray  # pairwise cosine distances, concept order as ``ids``
    quantiles: dict[int, tuple[float, float, float]]
    split_median_q50: dict[str, float]
    difficulty_mean: dict[int, float]
    difficulty_min: dict[int, float]
    pearson_r: float

    def rows(self) -> list[dict]:
        out = []
        for cid, split in zip(self.ids, self.splits):
            q25, q50, q75 = self.quantiles[cid]
            out.append(
                {
                    "concept": cid,
                    "split": split,
                    "q25": q25,
                    "q50": q50,
                    "q75": q75,
                    "difficulty_mean": self.difficulty_mean.get(cid, float("nan")),
                    "difficulty_min": self.difficulty_min.get(cid, float("nan")),
                }
            )
        return out


def concept_distance_stats(concepts: list[ConceptSpec]) -> DistanceReport:
    """Split-balance quantiles and test-concept difficulty proxies."""
    by_split: dict[str, list[int]] = {}
    for i, c in enumerate(concepts):
        by_split.setdefault(c.split, []).append(i)
    for name in (TRAIN, TEST):
        if len(by_split.get(name, [])) < 2:
            raise WorldError(f"split {name!r} needs at least 2 concepts")

    centers = _normalize_rows(np.array([c.center for c in concepts]))
    dist = np.clip(1.0 - centers @ centers.T, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)

    n = len(concepts)
    quantiles = {}
    for i, c in enumerate(concepts):
        others = np.delete(dist[i], i)
        q = np.percentile(others, [25, 50, 75])
        quantiles[c.id] = (float(q[0]), float(q[1]), float(q[2]))

    split_median = {
        name: float(np.median([quantiles[concepts[i].id][1] for i in idx])) for name, idx in by_split.items()
    }

    train_idx = np.array(by_split[TRAIN])
    d_mean, d_min = {}, {}
    for i in by_split[TEST]:
        row = dist[i, train_idx]
        d_mean[concepts[i].id] = float(row.mean())
        d_min[concepts[i].id] = float(row.min())
    a = np.array(list(d_mean.values()))
    b = np.array(list(d_min.values()))
    r = float(np.corrcoef(a, b)[0, 1]) if n > 2 and a.std() > 0 and b.std() > 0 else float("nan")
    return DistanceReport(
        ids=[c.id for c in concepts],
        splits=[c.split for c in concepts],
        distances=dist,
        quantiles=quantiles,
        split_median_q50=split_median,
        difficulty_mean=d_mean,
        difficulty_min=d_min,
        pearson_r=r,
    )


# ------------------------------------------------------------- serialization


def world_to_dict(world: World) -> dict:
    cfg = asdict(world.config)
    cfg["split_fracs"] = list(cfg["split_fracs"])
    return {
        "format": "amortsteer.world/1",
        "config": cfg,
        "seed": world.config.seed,
        "mixing": world.mixing.tolist(),
        "axis": world.axis.tolist(),
        "rotation": world.rotation.tolist(),
        "source": {"n_eval": world.source.n_eval, "samples": world.source.samples.tolist()},
        "concepts": [
            {
                "id": c.id,
                "split": c.split,
                "latent": c.latent.tolist(),
                "center": c.center.tolist(),
                "samples_text": c.samples_text.tolist(),
                "samples_image": c.samples_image.tolist(),
            }
            for c in world.concepts
        ],
    }


def world_from_dict(d: dict) -> World:
    if d.get("format") != "amortsteer.world/1":
        raise WorldError(f"unrecognised world format {d.get('format')!r}")
    cfg_d = dict(d["config"])
    cfg_d["split_fracs"] = tuple(cfg_d["split_fracs"])
    cfg = WorldConfig(**cfg_d)
    concepts = [
        ConceptSpec(
            c["id"],
            np.array(c["latent"]),
            np.array(c["center"]),
            np.array(c["samples_text"]),
            np.array(c["samples_image"]),
            c["split"],
        )
        for c in d["concepts"]
    ]
    pool = SourcePool(np.array(d["source"]["samples"]), d["source"]["n_eval"])
    return World(cfg, concepts, pool, np.array(d["mixing"]), np.array(d["axis"]), np.array(d["rotation"]))


def save_world(world: World, path: str | Path) -> None:
    Path(path).write_text(json.dumps(world_to_dict(world)))


def load_world(path: str | Path) -> World:
    return world_from_dict(json.loads(Path(path).read_text()))
