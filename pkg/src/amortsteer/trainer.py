"""Amortized training of the hypernetwork with AdamW, cosine decay and EMA.

Each optimizer step consumes one group of concepts. The group is split
across ``n_workers`` simulated workers, each holding ``concepts_per_worker``
concepts; every worker differentiates against the same frozen parameter
snapshot. The coordinator sums per-concept gradients in group order and
divides by the group size, so the result does not depend on how the group
was split across workers.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .generator import Generator, forward_capture
from .hypernet import HypernetState, ema_update, predict_graph
from .optim import adamw_step, cosine_lr
from .transport import LossConfig, alignment_loss
from .world import ConceptSpec, World, encode

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    final_lr_factor: float = 1e-3
    ema_decay: Optional[float] = 0.99
    n_workers: int = 4
    concepts_per_worker: int = 1
    cond_subset: int = 16
    target_subset: int = 16
    loss: LossConfig = LossConfig(p=1)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise TrainError("epochs must be >= 0")
        if self.lr <= 0:
            raise TrainError("lr must be > 0")
        if self.n_workers < 1 or self.concepts_per_worker < 1:
            raise TrainError("n_workers and concepts_per_worker must be >= 1")
        if self.cond_subset < 1 or self.target_subset < 1:
            raise TrainError("subset sizes must be >= 1")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise TrainError("ema_decay must lie in [0, 1)")

    @property
    def group_size(self) -> int:
        return self.n_workers * self.concepts_per_worker


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def write_csv(self, path: str | Path) -> None:
        """One row per epoch: epoch, mean_loss, lr at the epoch's last step.

        Wall times are kept out of this file (see :meth:`timing`) so that
        reruns produce identical bytes.
        """
        per = len(self.lr) // max(len(self.epoch_loss), 1)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "mean_loss", "lr"])
            for i, loss in enumerate(self.epoch_loss):
                wr.writerow([i + 1, repr(loss), repr(self.lr[(i + 1) * per - 1])])

    def write_lr_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "lr", "loss"])
            for k, (lr, loss) in enumerate(zip(self.lr, self.step_loss)):
                wr.writerow([k, repr(lr), repr(loss)])

    def timing(self) -> dict:
        return {"seconds": self.seconds, "epoch_seconds": list(self.epoch_seconds)}


def draw_subsets(n: int, cond: int, target: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint subsets without replacement when ``cond + target <= n``, else independent draws with replacement."""
    if n == 0:
        raise TrainError("concept has no samples")
    if cond + target <= n:
        perm = rng.permutation(n)
        return perm[:cond], perm[cond : cond + target]
    return rng.integers(0, n, size=cond), rng.integers(0, n, size=target)


def concept_rng(seed: int, epoch: int, concept_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, concept_id]))


def train_step(
    world: World,
    g: Generator,
    state: HypernetState,
    concept: ConceptSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    weights: Optional[dict] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for one concept; the caller applies the update."""
    if concept.split != "train":
        raise TrainError(f"concept {concept.id} is not in the train split")
    samples = concept.samples_text
    ci, ti = draw_subsets(len(samples), cfg.cond_subset, cfg.target_subset, rng)
    pool = world.source.fit
    src_rows = rng.choice(len(pool), size=cfg.target_subset, replace=cfg.target_subset > len(pool))
    e = encode(samples[ci], "average")
    params, leaves = predict_graph(state, e, weights)
    _, steered = forward_capture(g, pool[src_rows], params)
    _, target = forward_capture(g, samples[ti])
    loss = alignment_loss(steered, target, cfg.loss)
    ad.backward(loss)
    return float(loss.value), {k: v.grad for k, v in leaves.items()}


def aggregate(grads: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum in list order, then divide by the count."""
    out = {k: v.copy() for k, v in grads[0].items()}
    for gr in grads[1:]:
        for k, v in gr.items():
            out[k] += v
    for v in out.values():
        v /= len(grads)
    return out


def steps_per_epoch(n_train: int, cfg: TrainConfig) -> int:
    return -(-n_train // cfg.group_size)


def train(
    world: World,
    g: Generator,
    state: HypernetState,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[int, HypernetState, TrainLog], None]] = None,
    start_epoch: int = 0,
) -> TrainLog:
    """Run epochs ``start_epoch .. cfg.epochs - 1``, mutating ``state`` in place.

    The schedule always spans all ``cfg.epochs`` epochs, so a resumed run
    continues the same learning-rate curve.
    """
    train_set = world.train
    if not 0 <= start_epoch <= cfg.epochs:
        raise TrainError(f"start_epoch {start_epoch} outside [0, {cfg.epochs}]")
    if not train_set:
        raise TrainError("world has no train concepts")
    per_epoch = steps_per_epoch(len(train_set), cfg)
    total = cfg.epochs * per_epoch
    last = max(total - 1, 0)
    log_ = TrainLog()
    t_start = time.perf_counter()
    pool = ThreadPoolExecutor(cfg.n_workers) if cfg.n_workers > 1 else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t_epoch = time.perf_counter()
            order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(len(train_set))
            losses = []
            for s in range(per_epoch):
                group = [train_set[i] for i in order[s * cfg.group_size : (s + 1) * cfg.group_size]]
                snap = state.snapshot()
                shards = [group[w * cfg.concepts_per_worker : (w + 1) * cfg.concepts_per_worker] for w in range(cfg.n_workers)]

                def work(shard, snap=snap, epoch=epoch):
                    return [train_step(world, g, state, c, cfg, concept_rng(cfg.seed, epoch, c.id), snap) for c in shard]

                try:
                    results = list(pool.map(work, shards)) if pool else [work(sh) for sh in shards]
                except Exception as exc:  # add position, keep the cause
                    raise TrainError(f"epoch {epoch} step {s}: {exc}") from exc
                flat = [r for shard in results for r in shard]
                grads = aggregate([gr for _, gr in flat])
                lr = cosine_lr(epoch * per_epoch + s, last, cfg.lr, cfg.final_lr_factor)
                try:
                    adamw_step(state.params, grads, state.opt, lr, cfg.betas, cfg.eps, cfg.weight_decay)
                except ValueError as exc:
                    raise TrainError(f"epoch {epoch} step {s}: {exc}") from exc
                if cfg.ema_decay is not None:
                    ema_update(state, cfg.ema_decay)
                state.step += 1
                step_loss = float(np.mean([l for l, _ in flat]))
                losses.extend(l for l, _ in flat)
                log_.lr.append(lr)
                log_.step_loss.append(step_loss)
            log_.epoch_loss.append(float(np.mean(losses)))
            log_.epoch_seconds.append(time.perf_counter() - t_epoch)
            log.info("epoch %d loss %.4f", epoch + 1, log_.epoch_loss[-1])
            if on_epoch is not None:
                on_epoch(epoch, state, log_)
    finally:
        if pool is not None:
            pool.shutdown()
    log_.seconds = time.perf_counter() - t_start
    return log_


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    if "p" in kw:
        kw["loss"] = LossConfig(p=kw.pop("p"))
    return replace(cfg, **kw)
