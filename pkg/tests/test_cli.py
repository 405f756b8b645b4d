import csv
import json

import numpy as np
import pytest

from amortsteer.cli import main
from amortsteer.hypernet import init, load_state
from amortsteer.world import load_world

import oracles

SMALL_WORLD = ["--concepts", "12", "--samples", "8", "--embed-dim", "8", "--latent-dim", "2", "--hidden", "6", "5", "--output-dim", "4"]


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def wdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    assert main(["world", "--out", str(d), "--seed", "7", *SMALL_WORLD]) == 0
    return d


def test_world_is_deterministic(tmp_path, wdir, capsys):
    assert main(["world", "--out", str(tmp_path), "--seed", "7", *SMALL_WORLD]) == 0
    for name in ("world.json", "generator/arrays.npz", "generator/manifest.json"):
        assert (tmp_path / name).read_bytes() == (wdir / name).read_bytes(), name
    echo = [json.loads((d / "config-world.json").read_text()) for d in (tmp_path, wdir)]
    assert {k: v for k, v in echo[0].items() if k != "out"} == {k: v for k, v in echo[1].items() if k != "out"}
    out = capsys.readouterr().out
    assert "train: 10  test: 2" in out


def test_world_needs_two_concepts(tmp_path, capsys):
    assert main(["world", "--out", str(tmp_path), "--concepts", "1"]) == 1
    assert "at least 2 concepts" in capsys.readouterr().err


def test_world_split_fraction(wdir):
    world = load_world(wdir / "world.json")
    assert len(world.test) == round(0.2 * 12)


def test_fit_writes_params_and_is_repeatable(tmp_path, wdir):
    args = ["fit", "--world", str(wdir), "--method", "linact", "--concept", "3"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "params-linact-3.json").read_bytes()
    assert a == (tmp_path / "b" / "params-linact-3.json").read_bytes()
    params = json.loads(a)
    assert set(params["sites"]) == {"block0.norm", "block1.norm"}
    assert all(set(v) == {"w", "b"} for v in params["sites"].values())
    assert params["provenance"] == "linact"


def test_fit_lineas_slower_than_caa(tmp_path, wdir):
    walls = {}
    for m in ("caa", "lineas"):
        assert main(["fit", "--world", str(wdir), "--method", m, "--concept", "0", "--out", str(tmp_path)]) == 0
        walls[m] = json.loads((tmp_path / f"fitreport-{m}-0.timing.json").read_text())["wall_time"]
    assert walls["lineas"] > walls["caa"]


def test_fit_unknown_concept_or_method(tmp_path, wdir):
    assert main(["fit", "--world", str(wdir), "--method", "caa", "--concept", "99", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit):
        main(["fit", "--world", str(wdir), "--method", "pca", "--concept", "0", "--out", str(tmp_path)])


def _train(out, wdir, *extra):
    return main(["train", "--world", str(wdir), "--out", str(out), "--cond-subset", "4", "--target-subset", "4", *extra])


def test_train_zero_epochs_checkpoint_is_init(tmp_path, wdir):
    assert _train(tmp_path, wdir, "--epochs", "0") == 0
    state, _ = load_state(tmp_path / "ckpt-0")
    ref = init(state.config, 0)
    assert all(np.array_equal(state.params[k], ref.params[k]) for k in ref.params)


def test_train_outputs_lr_endpoints_and_worker_invariance(tmp_path, wdir):
    assert _train(tmp_path / "w1", wdir, "--epochs", "2", "--workers", "1", "--concepts-per-worker", "2") == 0
    assert _train(tmp_path / "w2", wdir, "--epochs", "2", "--workers", "2") == 0
    steps = 2 * 5
    for name in (f"ckpt-{steps}/arrays.npz", "train_log.csv", "lr_trace.csv"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w2" / name).read_bytes(), name
    lr = [float(r["lr"]) for r in _csv(tmp_path / "w1" / "lr_trace.csv")]
    assert lr[0] == 1e-4 and lr[-1] == pytest.approx(1e-7, rel=1e-12)
    rows = _csv(tmp_path / "w1" / "train_log.csv")
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert (tmp_path / "w1" / "train_log.timing.json").exists()


def test_train_is_idempotent(tmp_path, wdir):
    for sub in ("a", "b"):
        assert _train(tmp_path / sub, wdir, "--epochs", "1", "--workers", "1") == 0
    for name in ("ckpt-10/arrays.npz", "ckpt-10/manifest.json", "train_log.csv", "config-train.json"):
        a, b = (tmp_path / s / name for s in ("a", "b"))
        if name == "config-train.json":
            a, b = json.loads(a.read_text()), json.loads(b.read_text())
            a.pop("out"), b.pop("out")
            assert a == b
        else:
            assert a.read_bytes() == b.read_bytes(), name


def test_resume(tmp_path, wdir):
    assert _train(tmp_path / "full", wdir, "--epochs", "2", "--workers", "1") == 0
    assert _train(tmp_path / "part", wdir, "--epochs", "2", "--workers", "1", "--ckpt-every", "1") == 0
    assert _train(tmp_path / "res", wdir, "--epochs", "2", "--workers", "1", "--resume", str(tmp_path / "part" / "ckpt-10")) == 0
    assert (tmp_path / "res" / "ckpt-20" / "arrays.npz").read_bytes() == (tmp_path / "full" / "ckpt-20" / "arrays.npz").read_bytes()
    # different settings must be refused
    assert _train(tmp_path / "bad", wdir, "--epochs", "3", "--workers", "1", "--resume", str(tmp_path / "part" / "ckpt-10")) == 1


def test_config_file_and_flag_precedence(tmp_path, wdir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "workers": 1, "lr": 5e-4}))
    assert main(["train", "--world", str(wdir), "--out", str(tmp_path), "--config", str(cfg), "--lr", "2e-4"]) == 0
    echo = json.loads((tmp_path / "config-train.json").read_text())
    assert echo["epochs"] == 1 and echo["lr"] == 2e-4
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--world", str(wdir), "--out", str(tmp_path), "--config", str(cfg)]) == 2


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory, wdir):
    d = tmp_path_factory.mktemp("trained")
    assert _train(d, wdir, "--epochs", "2", "--workers", "1") == 0
    return d / "ckpt-20"


def test_eval_lambda_table(tmp_path, wdir, ckpt):
    assert main(["eval", "--world", str(wdir), "--which", "lambda", "--ckpt", str(ckpt), "--out", str(tmp_path)]) == 0
    rows = _csv(tmp_path / "report-lambda.csv")
    assert len(rows) == 7 and list(rows[0]) == ["lambda", "input_fid", "concept_fid", "mean"]


def test_eval_table_has_unsteered_row(tmp_path, wdir, ckpt):
    args = ["eval", "--world", str(wdir), "--which", "table", "--ckpt", str(ckpt), "--methods", "caa", "linact", "--out", str(tmp_path)]
    assert main(args) == 0
    rows = _csv(tmp_path / "report-table.csv")
    assert [r["method"] for r in rows] == ["unsteered", "caa", "linact", "hypernet"]
    assert float(rows[0]["input_fid_mean"]) == 1.0


def test_eval_distances_match_brute_force(tmp_path, wdir):
    assert main(["eval", "--world", str(wdir), "--which", "distances", "--out", str(tmp_path)]) == 0
    world = load_world(wdir / "world.json")
    quant, d_mean, _, _ = oracles.distance_stats(world.concepts)
    for r in _csv(tmp_path / "report-distances.csv"):
        cid = int(r["concept"])
        assert np.allclose([float(r["q25"]), float(r["q50"]), float(r["q75"])], quant[cid], atol=1e-12, rtol=0)
        if cid in d_mean:
            assert abs(float(r["difficulty_mean"]) - d_mean[cid]) < 1e-12


def test_eval_nshot_and_crossmodal(tmp_path, wdir, ckpt):
    assert main(["eval", "--world", str(wdir), "--which", "nshot", "--nshot", "1", "8", "--ckpt", str(ckpt), "--out", str(tmp_path)]) == 0
    assert [r["n"] for r in _csv(tmp_path / "report-nshot.csv")] == ["1", "8"]
    assert main(["eval", "--world", str(wdir), "--which", "crossmodal", "--ckpt", str(ckpt), "--out", str(tmp_path)]) == 0
    assert _csv(tmp_path / "report-crossmodal.csv")[-1]["concept"] == "mean"


def test_eval_needs_checkpoint(tmp_path, wdir, capsys):
    assert main(["eval", "--world", str(wdir), "--which", "nshot", "--out", str(tmp_path)]) == 1
    assert "--ckpt" in capsys.readouterr().err
    assert main(["eval", "--world", str(tmp_path / "nowhere"), "--which", "table", "--out", str(tmp_path)]) == 1
