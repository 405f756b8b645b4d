"""MLP hypernetwork mapping a concept embedding to per-site ``(w, b)``.

An adapter (linear map, then layer norm with a learned gain) turns the
embedding into a task vector. Every site asks two
weight queries, one for ``w`` and one for ``b``; a query is the concatenation
of the site key, the embedding of the site's width and a state key. The
shared decoder reads ``[task, query]`` and emits ``max_out`` raw values,
truncated to the site width. The last decoder layer starts at zero and the
output rule is ``w = 1 + raw_w``, ``b = raw_b``, so a fresh network predicts
the identity intervention.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Node
from .optim import AdamState
from .steering import InterventionParams


class HypernetError(ValueError):
    pass


@dataclass(frozen=True)
class HypernetConfig:
    encoder_dim: int
    sites: tuple[tuple[str, int], ...]
    adapter_out: int = 256
    key_dim: int = 128
    shape_dim: int = 64
    state_key_dim: int = 64
    decoder_hidden: tuple[int, ...] = (1024, 1024)

    def __post_init__(self):
        if not self.sites:
            raise HypernetError("need at least one site")
        names = [n for n, _ in self.sites]
        if len(set(names)) != len(names):
            raise HypernetError("site names must be unique")
        if min(self.encoder_dim, self.adapter_out, self.key_dim, self.shape_dim, self.state_key_dim) < 1:
            raise HypernetError("all dims must be positive")
        if any(w < 1 for _, w in self.sites) or any(h < 1 for h in self.decoder_hidden):
            raise HypernetError("widths must be positive")

    @property
    def query_dim(self) -> int:
        return self.key_dim + self.shape_dim + self.state_key_dim

    @property
    def max_out(self) -> int:
        return max(w for _, w in self.sites)

    @property
    def widths(self) -> list[int]:
        """Distinct site widths, ascending; row order of the shape table."""
        return sorted({w for _, w in self.sites})

    @classmethod
    def for_sites(cls, encoder_dim: int, sites: Sequence, **kw) -> "HypernetConfig":
        """Build from HookSite-like objects (``name``, ``width``)."""
        return cls(encoder_dim, tuple((s.name, s.width) for s in sites), **kw)


@dataclass
class HypernetState:
    config: HypernetConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    step: int = 0
    opt: AdamState = field(default_factory=AdamState)

    def snapshot(self, use_ema: bool = False) -> dict[str, np.ndarray]:
        """Read-only copies handed to workers."""
        src = self.ema if use_ema else self.params
        out = {}
        for k, v in src.items():
            c = v.copy()
            c.setflags(write=False)
            out[k] = c
        return out


def _decoder_dims(cfg: HypernetConfig) -> list[int]:
    return [cfg.adapter_out + cfg.query_dim, *cfg.decoder_hidden, cfg.max_out]


def param_names(cfg: HypernetConfig) -> list[str]:
    names = ["adapter.weight", "adapter.bias", "adapter.gain", "embed.key", "embed.shape", "embed.state"]
    for i in range(len(cfg.decoder_hidden) + 1):
        names += [f"decoder.{i}.weight", f"decoder.{i}.bias"]
    return names


def init(cfg: HypernetConfig, seed: int = 0) -> HypernetState:
    """Fan-in scaled Gaussian weights, zero biases, zero final decoder layer."""
    rng = np.random.default_rng(seed)
    p = {
        "adapter.weight": rng.normal(0.0, 1.0 / np.sqrt(cfg.encoder_dim), (cfg.encoder_dim, cfg.adapter_out)),
        "adapter.bias": np.zeros(cfg.adapter_out),
        "adapter.gain": np.ones(cfg.adapter_out),
        "embed.key": rng.normal(0.0, 1.0, (len(cfg.sites), cfg.key_dim)),
        "embed.shape": rng.normal(0.0, 1.0, (len(cfg.widths), cfg.shape_dim)),
        "embed.state": rng.normal(0.0, 1.0, (2, cfg.state_key_dim)),
    }
    dims = _decoder_dims(cfg)
    last = len(dims) - 2
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        if i == last:
            p[f"decoder.{i}.weight"] = np.zeros((d_in, d_out))
        else:
            p[f"decoder.{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, d_out))
        p[f"decoder.{i}.bias"] = np.zeros(d_out)
    return HypernetState(cfg, p, {k: v.copy() for k, v in p.items()})


def _query_index(cfg: HypernetConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices into the key/shape/state tables, two queries per site."""
    width_row = {w: i for i, w in enumerate(cfg.widths)}
    site_rows = np.repeat(np.arange(len(cfg.sites)), 2)
    shape_rows = np.repeat([width_row[w] for _, w in cfg.sites], 2)
    state_rows = np.tile([0, 1], len(cfg.sites))
    return site_rows, shape_rows, state_rows


def decode(cfg: HypernetConfig, weights: dict, e) -> InterventionParams:
    """Forward pass over ``weights`` (arrays or graph nodes) for one embedding."""
    e = np.asarray(e.value if isinstance(e, Node) else e, dtype=np.float64)
    if e.shape != (cfg.encoder_dim,):
        raise HypernetError(f"embedding must have shape ({cfg.encoder_dim},), got {e.shape}")
    W = {k: ad.as_node(v) for k, v in weights.items()}
    task = ad.constant(e[None, :]) @ W["adapter.weight"] + ad.tile_rows(W["adapter.bias"], 1)
    task = ad.layer_norm(task) * ad.tile_rows(W["adapter.gain"], 1)
    site_rows, shape_rows, state_rows = _query_index(cfg)
    nq = len(site_rows)
    query = ad.concat(
        [ad.take(W["embed.key"], site_rows), ad.take(W["embed.shape"], shape_rows), ad.take(W["embed.state"], state_rows)],
        axis=1,
    )
    h = ad.concat([ad.take(task, np.zeros(nq, dtype=int)), query], axis=1)
    n_layers = len(cfg.decoder_hidden) + 1
    for i in range(n_layers):
        h = h @ W[f"decoder.{i}.weight"] + ad.tile_rows(W[f"decoder.{i}.bias"], nq)
        if i < n_layers - 1:
            h = ad.relu(h)
    sites = {}
    for k, (name, width) in enumerate(cfg.sites):
        raw_w = ad.take(h, (2 * k, slice(0, width)))
        raw_b = ad.take(h, (2 * k + 1, slice(0, width)))
        sites[name] = (raw_w + 1.0, raw_b)
    return InterventionParams(sites, 1.0, "hypernet")


def predict(state: HypernetState, e, use_ema: bool = True) -> InterventionParams:
    """Numpy-valued prediction; evaluation uses the EMA weights by default."""
    weights = state.ema if use_ema else state.params
    return decode(state.config, weights, e).detach()


def predict_graph(state: HypernetState, e, weights: Optional[dict] = None) -> tuple[InterventionParams, dict[str, Node]]:
    """Prediction whose ``(w, b)`` are graph nodes; returns the trainable leaves too."""
    src = state.params if weights is None else weights
    leaves = {k: ad.leaf(v) for k, v in src.items()}
    return decode(state.config, leaves, e), leaves


def ema_update(state: HypernetState, decay: float = 0.99) -> None:
    if not 0.0 <= decay < 1.0:
        raise HypernetError(f"decay must lie in [0, 1), got {decay}")
    for k, live in state.params.items():
        shadow = state.ema[k]
        shadow *= decay
        shadow += (1.0 - decay) * live


def count_params(state_or_cfg) -> dict[str, int]:
    """Parameter breakdown by component; ``total`` is their sum."""
    cfg = state_or_cfg.config if isinstance(state_or_cfg, HypernetState) else state_or_cfg
    dims = _decoder_dims(cfg)
    layers = [d_in * d_out + d_out for d_in, d_out in zip(dims[:-1], dims[1:])]
    out = {
        "input_adapter": cfg.encoder_dim * cfg.adapter_out + 2 * cfg.adapter_out,
        "layer_embeddings": len(cfg.sites) * cfg.key_dim + len(cfg.widths) * cfg.shape_dim + 2 * cfg.state_key_dim,
        "decoding_projection": sum(layers[:-1]),
        "output_layer": layers[-1],
    }
    out["total"] = sum(out.values())
    return out


# ------------------------------------------------------------------ storage


def _config_from_dict(d: dict) -> HypernetConfig:
    return HypernetConfig(
        encoder_dim=d["encoder_dim"],
        sites=tuple((n, int(w)) for n, w in d["sites"]),
        adapter_out=d["adapter_out"],
        key_dim=d["key_dim"],
        shape_dim=d["shape_dim"],
        state_key_dim=d["state_key_dim"],
        decoder_hidden=tuple(d["decoder_hidden"]),
    )


def save_state(state: HypernetState, path: str | Path, extra: Optional[dict] = None) -> Path:
    arrays = {}
    for k in param_names(state.config):
        arrays[f"live/{k}"] = state.params[k]
        arrays[f"ema/{k}"] = state.ema[k]
        if k in state.opt.m:
            arrays[f"adam_m/{k}"] = state.opt.m[k]
            arrays[f"adam_v/{k}"] = state.opt.v[k]
    manifest = {"config": asdict(state.config), "step": state.step, "adam_t": state.opt.t, **(extra or {})}
    return checkpoint.save(path, "hypernet", manifest, arrays)


def load_state(path: str | Path) -> tuple[HypernetState, dict]:
    manifest, arrays = checkpoint.load(path, "hypernet")
    cfg = _config_from_dict(manifest["config"])
    names = param_names(cfg)
    opt = AdamState(
        {k: arrays[f"adam_m/{k}"] for k in names if f"adam_m/{k}" in arrays},
        {k: arrays[f"adam_v/{k}"] for k in names if f"adam_v/{k}" in arrays},
        manifest["adam_t"],
    )
    state = HypernetState(cfg, {k: arrays[f"live/{k}"] for k in names}, {k: arrays[f"ema/{k}"] for k in names}, manifest["step"], opt)
    return state, manifest
