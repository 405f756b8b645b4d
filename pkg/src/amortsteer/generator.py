"""Frozen toy one-step generator with a hook site after every normalization.

Each hidden block is ``linear -> layer norm (frozen gain/shift) -> [hook] ->
activation``; a final linear head maps to the output. The hook sees the
normalized activations, and whatever the hook returns is both recorded and
passed downstream.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Node
from .steering import InterventionError, InterventionParams, apply

ACTIVATIONS = ("tanh", "relu", "identity")


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    input_dim: int = 32
    hidden_dims: tuple[int, ...] = (64, 48, 64)
    output_dim: int = 16
    norm_kind: str = "layer"
    activation: str = "tanh"
    seed: int = 0

    def validate(self) -> None:
        if len(self.hidden_dims) < 2:
            raise GeneratorError("need at least two hidden layers")
        if min(self.input_dim, self.output_dim, *self.hidden_dims) < 2:
            raise GeneratorError("all dims must be >= 2")
        if self.norm_kind != "layer":
            raise GeneratorError(f"unsupported norm_kind {self.norm_kind!r}")
        if self.activation not in ACTIVATIONS:
            raise GeneratorError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class HookSite:
    name: str
    layer_index: int
    width: int


@dataclass(frozen=True)
class Block:
    """``weight`` is ``in x out``; ``gain``/``shift`` of None means no normalization."""

    weight: np.ndarray
    bias: np.ndarray
    gain: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None
    activation: str = "tanh"

    @property
    def normed(self) -> bool:
        return self.gain is not None


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Generator:
    blocks: tuple[Block, ...]
    head_weight: np.ndarray
    head_bias: np.ndarray
    config: Optional[GeneratorConfig] = None
    sites: tuple[HookSite, ...] = field(init=False)

    def __post_init__(self):
        sites = []
        for i, blk in enumerate(self.blocks):
            if blk.normed:
                sites.append(HookSite(f"block{i}.norm", i, blk.weight.shape[1]))
        object.__setattr__(self, "sites", tuple(sites))

    @property
    def input_dim(self) -> int:
        return self.blocks[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.head_weight.shape[1]

    def site(self, name: str) -> HookSite:
        for s in self.sites:
            if s.name == name:
                return s
        raise GeneratorError(f"unknown site {name!r}")

    @property
    def site_names(self) -> list[str]:
        return [s.name for s in self.sites]


def make_generator(blocks: Sequence[Block], head_weight, head_bias, config=None) -> Generator:
    """Assemble a generator from explicit frozen blocks (used by tests too)."""
    frozen = tuple(
        Block(
            _freeze(b.weight),
            _freeze(b.bias),
            None if b.gain is None else _freeze(b.gain),
            None if b.shift is None else _freeze(b.shift),
            b.activation,
        )
        for b in blocks
    )
    for prev, nxt in zip(frozen, frozen[1:]):
        if prev.weight.shape[1] != nxt.weight.shape[0]:
            raise GeneratorError("block widths do not chain")
    return Generator(frozen, _freeze(head_weight), _freeze(head_bias), config)


def build_generator(cfg: GeneratorConfig) -> Generator:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dims = [cfg.input_dim, *cfg.hidden_dims]
    blocks = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        blocks.append(
            Block(
                rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out)),
                rng.normal(0.0, 0.1, d_out),
                1.0 + rng.normal(0.0, 0.1, d_out),
                rng.normal(0.0, 0.1, d_out),
                cfg.activation,
            )
        )
    d = dims[-1]
    head_w = rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.output_dim))
    head_b = rng.normal(0.0, 0.1, cfg.output_dim)
    return make_generator(blocks, head_w, head_b, cfg)


def _activate(x: Node, kind: str) -> Node:
    if kind == "tanh":
        return ad.tanh(x)
    if kind == "relu":
        return ad.relu(x)
    return x


def _check_intervention(g: Generator, iv: InterventionParams) -> None:
    names = {s.name: s.width for s in g.sites}
    for site in iv.sites:
        if site not in names:
            raise InterventionError(f"unknown site {site!r}")
        if iv.width(site) != names[site]:
            raise InterventionError(f"site {site!r}: width {iv.width(site)} != {names[site]}")


def forward_capture(g: Generator, inputs, intervention: Optional[InterventionParams] = None):
    """Run ``g`` and record the (post-intervention) activation at every site.

    Returns ``(outputs, record)``. When the intervention carries trainable
    nodes the results are graph nodes; otherwise they are numpy arrays.
    """
    x = ad.as_node(inputs)
    if x.value.ndim != 2 or x.shape[1] != g.input_dim:
        raise GeneratorError(f"inputs must be N x {g.input_dim}, got {x.shape}")
    if intervention is not None:
        _check_intervention(g, intervention)
    track = intervention is not None and intervention.requires_grad
    n = x.shape[0]
    record = {}
    h = x
    for i, blk in enumerate(g.blocks):
        h = h @ blk.weight + ad.tile_rows(blk.bias, n)
        if blk.normed:
            h = ad.layer_norm(h) * ad.tile_rows(blk.gain, n) + ad.tile_rows(blk.shift, n)
            name = f"block{i}.norm"
            if intervention is not None and name in intervention.sites:
                h = apply(intervention, name, h)
            record[name] = h
        h = _activate(h, blk.activation)
    out = h @ g.head_weight + ad.tile_rows(g.head_bias, n)
    if track:
        return out, record
    return out.value, {k: v.value for k, v in record.items()}


def forward(g: Generator, inputs, intervention: Optional[InterventionParams] = None):
    return forward_capture(g, inputs, intervention)[0]


def n_parameters(g: Generator) -> int:
    total = g.head_weight.size + g.head_bias.size
    for b in g.blocks:
        total += b.weight.size + b.bias.size
        if b.normed:
            total += b.gain.size + b.shift.size
    return total


# ------------------------------------------------------------------ storage


def save_generator(g: Generator, path: str | Path) -> Path:
    arrays = {"head.weight": g.head_weight, "head.bias": g.head_bias}
    layout = []
    for i, b in enumerate(g.blocks):
        arrays[f"block{i}.weight"] = b.weight
        arrays[f"block{i}.bias"] = b.bias
        if b.normed:
            arrays[f"block{i}.gain"] = b.gain
            arrays[f"block{i}.shift"] = b.shift
        layout.append({"activation": b.activation, "normed": b.normed})
    cfg = None if g.config is None else asdict(g.config)
    return checkpoint.save(path, "generator", {"config": cfg, "blocks": layout}, arrays)


def load_generator(path: str | Path) -> Generator:
    manifest, arrays = checkpoint.load(path, "generator")
    blocks = []
    for i, spec in enumerate(manifest["blocks"]):
        blocks.append(
            Block(
                arrays[f"block{i}.weight"],
                arrays[f"block{i}.bias"],
                arrays.get(f"block{i}.gain") if spec["normed"] else None,
                arrays.get(f"block{i}.shift") if spec["normed"] else None,
                spec["activation"],
            )
        )
    cfg = manifest["config"]
    if cfg is not None:
        cfg = GeneratorConfig(**{**cfg, "hidden_dims": tuple(cfg["hidden_dims"])})
    return make_generator(blocks, arrays["head.weight"], arrays["head.bias"], cfg)
