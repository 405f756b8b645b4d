"""Command-line entry point: ``amortsteer {world,fit,train,eval,ablate}``.

Every command takes ``--out DIR`` and an optional ``--config FILE`` (JSON
object whose keys are the command's long flag names with dashes replaced by
underscores). Explicit flags win over the file. Each run writes
``config-<command>.json`` with the fully resolved settings; wall-clock
timings go to ``*.timing.json`` sidecars so the other outputs are
byte-identical across reruns.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluation as ev
from .checkpoint import CheckpointError
from .estimators import METHODS, EstimatorConfig, EstimatorError
from .generator import GeneratorConfig, build_generator, load_generator, save_generator
from .hypernet import HypernetConfig, HypernetState, init, load_state, predict, save_state
from .steering import save_params
from .trainer import TrainConfig, TrainError, steps_per_epoch, train
from .transport import LossConfig
from .world import WorldConfig, WorldError, build_world, concept_distance_stats, encode, load_world, save_world

log = logging.getLogger("amortsteer")


class CliError(RuntimeError):
    pass


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo(args: argparse.Namespace, out: Path) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    _dump(resolved, out / f"config-{args.command}.json")


# ------------------------------------------------------------- world files


def _load_world_dir(path: str):
    d = Path(path)
    if not (d / "world.json").exists():
        raise CliError(f"no world.json in {d}; run `amortsteer world` first")
    return load_world(d / "world.json"), load_generator(d / "generator")


def _load_ckpt(path: Optional[str]) -> HypernetState:
    if not path:
        raise CliError("this command needs --ckpt")
    state, _ = load_state(path)
    return state


# ---------------------------------------------------------------- commands


def cmd_world(args, out: Path) -> None:
    cfg = WorldConfig(
        embed_dim=args.embed_dim,
        latent_dim=args.latent_dim,
        n_concepts=args.concepts,
        samples_per_concept=args.samples,
        sample_noise=args.noise,
        modality_gap=args.modality_gap,
        seed=args.seed,
        split_fracs=(1.0 - args.test_frac, args.test_frac),
    )
    world = build_world(cfg)
    gcfg = GeneratorConfig(input_dim=cfg.embed_dim, hidden_dims=tuple(args.hidden), output_dim=args.output_dim, seed=args.seed)
    g = build_generator(gcfg)
    save_world(world, out / "world.json")
    save_generator(g, out / "generator")
    n_train, n_test = len(world.train), len(world.test)
    print(f"concepts: {len(world.concepts)}  train: {n_train}  test: {n_test}  test fraction: {n_test / len(world.concepts):.3f}")
    if n_train >= 2 and n_test >= 2:
        rep = concept_distance_stats(world.concepts)
        med = rep.split_median_q50
        print(f"median pairwise-distance q50  train: {med['train']:.4f}  test: {med['test']:.4f}")
        print(f"difficulty mean-vs-min pearson r: {rep.pearson_r:.3f}")
    print(f"generator sites: {', '.join(f'{s.name}[{s.width}]' for s in g.sites)}")


def cmd_fit(args, out: Path) -> None:
    world, g = _load_world_dir(args.world)
    try:
        concept = world.concept(args.concept)
    except KeyError as exc:
        raise CliError(f"unknown concept {args.concept}") from exc
    cfg = EstimatorConfig(
        method=args.method,
        incremental=not args.independent,
        lineas_steps=args.lineas_steps,
        lineas_lr=args.lineas_lr,
        p=args.p,
        seed=args.seed,
    )
    rep = ev.fit_baseline(world, g, concept, cfg)
    stem = f"{args.method}-{args.concept}"
    save_params(rep.params, out / f"params-{stem}.json")
    body = rep.to_dict()
    wall = body.pop("wall_time")
    _dump(body, out / f"fitreport-{stem}.json")
    _dump({"wall_time": wall}, out / f"fitreport-{stem}.timing.json")
    print(f"{args.method} on concept {args.concept}: {wall:.3f}s")
    for site, (before, after) in rep.losses.items():
        print(f"  {site}: W{cfg.p} {before:.4f} -> {after:.4f}")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        weight_decay=args.weight_decay,
        ema_decay=None if args.no_ema else args.ema_decay,
        n_workers=args.workers,
        concepts_per_worker=args.concepts_per_worker,
        cond_subset=args.cond_subset,
        target_subset=args.target_subset,
        loss=LossConfig(p=args.p),
        seed=args.seed,
    )


def _run_training(world, g, tcfg: TrainConfig, out: Path, seed: int, ckpt_every: int, resume: Optional[str] = None, tag: str = ""):
    hcfg = HypernetConfig.for_sites(world.config.embed_dim, g.sites)
    start = 0
    if resume:
        state, manifest = load_state(resume)
        if state.config != hcfg:
            raise CliError(f"checkpoint {resume} was trained for a different generator or encoder")
        if manifest.get("train_config") != _tcfg_dict(tcfg):
            raise CliError(f"checkpoint {resume} used different training settings; refusing to resume")
        start = manifest["epoch"]
    else:
        state = init(hcfg, seed)
    per_epoch = steps_per_epoch(len(world.train), tcfg)

    def save(epoch: int) -> None:
        save_state(
            state,
            out / f"ckpt{tag}-{epoch * per_epoch}",
            {"epoch": epoch, "train_config": _tcfg_dict(tcfg), "hypernet_seed": seed},
        )

    if start == 0:
        save(0)

    def on_epoch(epoch, _state, _log):
        if ckpt_every and (epoch + 1) % ckpt_every == 0 and epoch + 1 != tcfg.epochs:
            save(epoch + 1)

    tlog = train(world, g, state, tcfg, on_epoch, start_epoch=start)
    if tcfg.epochs > start:
        save(tcfg.epochs)
    return state, tlog


def _tcfg_dict(tcfg: TrainConfig) -> dict:
    d = asdict(tcfg)
    d["betas"] = list(d["betas"])
    return json.loads(json.dumps(d))


def _write_train_log(tlog, out: Path, tag: str = "") -> None:
    tlog.write_csv(out / f"train_log{tag}.csv")
    tlog.write_lr_csv(out / f"lr_trace{tag}.csv")
    _dump(tlog.timing(), out / f"train_log{tag}.timing.json")


def cmd_train(args, out: Path) -> None:
    world, g = _load_world_dir(args.world)
    tcfg = _train_config(args)
    _, tlog = _run_training(world, g, tcfg, out, args.seed, args.ckpt_every, args.resume)
    _write_train_log(tlog, out)
    if tlog.epoch_loss:
        print(f"trained {len(tlog.epoch_loss)} epochs: loss {tlog.epoch_loss[0]:.4f} -> {tlog.epoch_loss[-1]:.4f} in {tlog.seconds:.1f}s")
    else:
        print("no epochs run; wrote the initial checkpoint")


def _test_concepts(world, limit: Optional[int]):
    cs = world.test
    return cs[:limit] if limit else cs


def cmd_eval(args, out: Path) -> None:
    world, g = _load_world_dir(args.world)
    which = args.which
    concepts = _test_concepts(world, args.limit)
    if which == "distances":
        rep = concept_distance_stats(world.concepts)
        ev.write_rows(rep.rows(), out / "report-distances.csv")
        summary = {
            "split_median_q50": rep.split_median_q50,
            "pearson_r_mean_vs_min": rep.pearson_r,
        }
        _dump(summary, out / "report-distances.json")
        print(json.dumps(summary, indent=2))
        return
    if which == "table":
        state = _load_ckpt(args.ckpt) if args.ckpt else None
        rep = ev.compare_methods(world, g, args.methods, state, concepts, EstimatorConfig(seed=args.seed))
        timing = [{"method": r["method"], "seconds": r.pop("seconds")} for r in rep.rows]
        for r in rep.per_concept:
            r.pop("seconds")
        rep.write_csv(out / "report-table.csv")
        rep.write_per_concept_csv(out / "report-table-per-concept.csv")
        _dump(timing, out / "report-table.timing.json")
        _print_rows(rep.rows, ["method", "n", "input_fid_mean", "concept_fid_mean", "loss_mean"])
        return
    if which == "lambda":
        if args.ckpt:
            state = _load_ckpt(args.ckpt)
            params_for = lambda c: predict(state, encode(c.samples_text))  # noqa: E731
        else:
            method = args.methods[0] if args.methods else "linact"
            params_for = lambda c: ev.fit_baseline(world, g, c, EstimatorConfig(method=method, seed=args.seed)).params  # noqa: E731
        rows, _ = ev.lambda_table(world, g, params_for, args.grid, concepts)
        ev.write_rows(rows, out / "report-lambda.csv")
        _print_rows(rows, ["lambda", "input_fid", "concept_fid", "mean"])
        return
    state = _load_ckpt(args.ckpt)
    if which == "nshot":
        rows = ev.nshot_sweep(world, g, state, args.nshot, args.seed, concepts)
        ev.write_rows(rows, out / "report-nshot.csv")
        _print_rows(rows, ["n", "input_fid_mean", "concept_fid_mean", "unsteered_concept_fid"])
        return
    if which == "crossmodal":
        rows, agg = ev.crossmodal_eval(world, g, state, concepts)
        ev.write_rows(rows + [agg], out / "report-crossmodal.csv")
        _print_rows([agg], list(agg))
        return
    raise CliError(f"unknown eval target {which!r}")


def cmd_ablate(args, out: Path) -> None:
    world, g = _load_world_dir(args.world)
    rows = []
    concepts = _test_concepts(world, args.limit)
    for p in (1, 2):
        tcfg = TrainConfig(
            epochs=args.epochs,
            n_workers=args.workers,
            loss=LossConfig(p=p),
            seed=args.seed,
        )
        state, tlog = _run_training(world, g, tcfg, out, args.seed, 0, tag=f"-p{p}")
        _write_train_log(tlog, out, f"-p{p}")
        held = [ev.concept_context(world, g, c) for c in concepts]
        preds = [predict(state, encode(c.samples_text)) for c in concepts]
        rows.append(
            {
                "p": p,
                "epochs": args.epochs,
                "first_epoch_loss": tlog.epoch_loss[0] if tlog.epoch_loss else float("nan"),
                "final_epoch_loss": tlog.epoch_loss[-1] if tlog.epoch_loss else float("nan"),
                "heldout_w1": float(np.mean([ctx.loss(g, pr, 1) for ctx, pr in zip(held, preds)])),
                "heldout_w2": float(np.mean([ctx.loss(g, pr, 2) for ctx, pr in zip(held, preds)])),
                "heldout_input_fid": float(np.mean([ctx.input_fidelity(g, pr) for ctx, pr in zip(held, preds)])),
                "heldout_concept_fid": float(np.mean([ctx.concept_fidelity(g, pr) for ctx, pr in zip(held, preds)])),
            }
        )
    ev.write_rows(rows, out / "report-ablation.csv")
    _print_rows(rows, list(rows[0]))


def _print_rows(rows, cols) -> None:
    print("  ".join(f"{c:>16}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>16.4f}" if isinstance(r[c], float) else f"{r[c]!s:>16}" for c in cols))


# ------------------------------------------------------------------ parser


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    ap = argparse.ArgumentParser(prog="amortsteer", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    commands = {}

    def common(p):
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--config", help="JSON file with flag defaults")
        p.add_argument("--seed", type=int, default=0)

    p = commands["world"] = sub.add_parser("world", help="build and save a synthetic world and its generator")
    common(p)
    p.add_argument("--concepts", type=int, default=96)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--latent-dim", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--modality-gap", type=float, default=0.1)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--hidden", type=int, nargs="+", default=[64, 48, 64])
    p.add_argument("--output-dim", type=int, default=16)
    p.set_defaults(func=cmd_world)

    p = commands["fit"] = sub.add_parser("fit", help="fit one concept with one per-concept estimator")
    common(p)
    p.add_argument("--world", required=True, help="directory written by `world`")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--concept", type=int, required=True)
    p.add_argument("--independent", action="store_true", help="fit all sites at once instead of layer by layer")
    p.add_argument("--lineas-steps", type=int, default=400)
    p.add_argument("--lineas-lr", type=float, default=1e-2)
    p.add_argument("--p", type=int, choices=(1, 2), default=2)
    p.set_defaults(func=cmd_fit)

    p = commands["train"] = sub.add_parser("train", help="train the hypernetwork")
    common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--ema-decay", type=float, default=0.99)
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--concepts-per-worker", type=int, default=1)
    p.add_argument("--cond-subset", type=int, default=16)
    p.add_argument("--target-subset", type=int, default=16)
    p.add_argument("--p", type=int, choices=(1, 2), default=1)
    p.add_argument("--ckpt-every", type=int, default=0, help="also checkpoint every N epochs")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = commands["eval"] = sub.add_parser("eval", help="evaluation tables")
    common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--which", choices=("table", "lambda", "nshot", "crossmodal", "distances"), required=True)
    p.add_argument("--ckpt", help="hypernetwork checkpoint directory")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--grid", type=float, nargs="+", default=list(ev.LAMBDA_GRID))
    p.add_argument("--nshot", type=int, nargs="+", default=list(ev.NSHOT_GRID))
    p.add_argument("--limit", type=int, help="only the first N test concepts")
    p.set_defaults(func=cmd_eval)

    p = commands["ablate"] = sub.add_parser("ablate", help="train with p=1 and p=2 and compare")
    common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_ablate)
    return ap, commands


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    ap, commands = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        if not isinstance(overrides, dict):
            raise CliError("config file must hold a JSON object")
        unknown = set(overrides) - set(vars(args)) - {"func"}
        if unknown or "command" in overrides:
            raise CliError(f"unknown config keys: {sorted(unknown | ({'command'} & set(overrides)))}")
        # file values become defaults, so flags given on the command line still win
        commands[args.command].set_defaults(**overrides)
        args = ap.parse_args(argv)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except (CliError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _echo(args, out)
        args.func(args, out)
    except (CliError, WorldError, EstimatorError, TrainError, CheckpointError, ev.EvalError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
