import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from learnmatch import diffmath as dm
from learnmatch.datasets import make_shifted_blobs, make_two_moons
from learnmatch.evalio.cli import run_cli
from learnmatch.evalio.config import ConfigError, ExperimentConfig, dumps_config, from_dict, load_config, save_config
from learnmatch.evalio.io import (METRICS_COLUMNS, CheckpointError, MetricsLog, export_embeddings, load_checkpoint,
                                  read_metrics, save_checkpoint)
from learnmatch.evalio.metrics import a_distance_from_error, accuracy, precision_recall_f1, proxy_a_distance
from learnmatch.l2m import MetricsRow, bundle_for
from learnmatch.models import feature_forward

SMOKE = """seed = 3

[data]
n = 60

[model]
feature_hidden = [8, 8]
meta_hidden = [8, 8]

[train]
epochs = 2
batch_size = 30
"""


# --- metrics -----------------------------------------------------------------------

def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    with pytest.raises(dm.ShapeError):
        accuracy([0, 1], [0])


def test_prf_examples():
    # TP=2, FP=1, FN=1
    p, r, f = precision_recall_f1([1, 1, 1, 0, 0], [1, 1, 0, 1, 0])
    assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3), abs=1e-15)
    assert precision_recall_f1([1, 0, 1], [1, 0, 1]) == (1.0, 1.0, 1.0)
    assert precision_recall_f1([0, 0, 0], [1, 0, 1]) == (0.0, 0.0, 0.0)


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_prf_matches_counting(pairs):
    pred, lab = map(np.array, zip(*pairs))
    tp = sum(1 for a, b in pairs if a == 1 and b == 1)
    fp = sum(1 for a, b in pairs if a == 1 and b != 1)
    fn = sum(1 for a, b in pairs if a != 1 and b == 1)
    p, r, f = precision_recall_f1(pred, lab)
    assert p == (tp / (tp + fp) if tp + fp else 0.0)
    assert r == (tp / (tp + fn) if tp + fn else 0.0)
    assert 0.0 <= f <= 1.0 and accuracy(pred, lab) == np.mean(pred == lab)


def test_a_distance_formula():
    assert a_distance_from_error(0.5) == 0.0
    assert a_distance_from_error(0.0) == 2.0
    assert a_distance_from_error(0.8) == 0.0


def test_a_distance_identical_vs_separated():
    ident, sep = [], []
    for seed in range(5):
        src, tgt = make_shifted_blobs(2, 40, [4.0, 4.0], 1.0, seed)
        ident.append(proxy_a_distance(src.features, src.features.copy(), seed))
        sep.append(proxy_a_distance(src.features, tgt.features, seed))
    assert np.mean(ident) <= 0.2
    assert np.mean(ident) <= np.mean(sep)
    assert all(0.0 <= v <= 2.0 for v in ident + sep)


def test_a_distance_needs_twenty_samples():
    with pytest.raises(dm.UsageError):
        proxy_a_distance(np.zeros((19, 2)), np.zeros((30, 2)))


# --- config --------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig().replace(seed=11, train={"eta0": 0.1 + 0.2, "epochs": 7},
                                     matching={"mode": "emb+adv", "multipliers": [0.5, 1.0 / 3.0]})
    save_config(cfg, tmp_path / "c.toml")
    back = load_config(tmp_path / "c.toml")
    assert back == cfg and dumps_config(back) == dumps_config(cfg)


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError, match="train.epoch"):
        from_dict({"train": {"epoch": 3}})
    with pytest.raises(ConfigError):
        from_dict({"optimizer": {}})


def test_config_type_and_choice_errors():
    with pytest.raises(ConfigError):
        from_dict({"train": {"epochs": "ten"}})
    with pytest.raises(ConfigError):
        from_dict({"matching": {"mode": "coral"}})
    with pytest.raises(ConfigError):
        load_config("/nonexistent/x.toml")


# --- checkpoint --------------------------------------------------------------------------

def trained_bundle(seed=0):
    cfg = ExperimentConfig().replace(seed=seed, model={"feature_hidden": [8, 8], "meta_hidden": [8, 8]})
    bundle = bundle_for(cfg, 2, 2)
    rng = np.random.default_rng(seed)
    for p in bundle.all_params().values():
        p.data = p.data + rng.normal(0, 0.1, size=p.data.shape) / 3.0
    return bundle, cfg


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    bundle, cfg = trained_bundle(1)
    path = tmp_path / "ck.json"
    save_checkpoint(bundle, cfg, path)
    back, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    a, b = bundle.all_params(), back.all_params()
    assert a.keys() == b.keys() and all(np.array_equal(a[k].data, b[k].data) for k in a)
    x = np.random.default_rng(0).normal(size=(9, 2))
    assert np.array_equal(feature_forward(bundle.feature_extractor, x).data,
                          feature_forward(back.feature_extractor, x).data)
    assert np.array_equal(bundle.predict_proba(x), back.predict_proba(x))


def test_truncated_checkpoint(tmp_path):
    bundle, cfg = trained_bundle()
    path = tmp_path / "ck.json"
    save_checkpoint(bundle, cfg, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_shape_names_tensor(tmp_path):
    bundle, cfg = trained_bundle()
    path = tmp_path / "ck.json"
    save_checkpoint(bundle, cfg, path)
    doc = json.loads(path.read_text())
    doc["tensors"]["meta.W1"]["shape"] = [3, 3]
    doc["tensors"]["meta.W1"]["data"] = [0.0] * 9
    path.write_text(json.dumps(doc))
    with pytest.raises(dm.ShapeError, match="meta.W1"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    bundle, cfg = trained_bundle()
    path = tmp_path / "ck.json"
    save_checkpoint(bundle, cfg, path)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


# --- metrics log and export ------------------------------------------------------------------

def row(epoch, **kw):
    base = dict(epoch=epoch, step=10 * epoch, loss_cls=1 / 3, loss_match=-0.25, loss_meta=1e-7,
                target_accuracy=0.875, a_distance=None, seed=4)
    base.update(kw)
    return MetricsRow(**base)


def test_metrics_header_once_and_line_count(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    for e in range(4):
        log.write(row(e, a_distance=0.5 if e == 3 else None))
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0] == ",".join(METRICS_COLUMNS)
    assert lines[0] == "epoch,step,loss_cls,loss_match,loss_meta,target_accuracy,a_distance,seed"
    assert lines[1].split(",")[2] == "0.333333333"


def test_metrics_parse_back(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    log.write(row(0))
    log.write(row(1, a_distance=1.25))
    parsed = read_metrics(tmp_path / "m.csv")
    assert parsed[0]["a_distance"] is None and parsed[1]["a_distance"] == 1.25
    assert parsed[0]["loss_cls"] == float(f"{1 / 3:.9g}") and parsed[1]["step"] == 10


def test_export_embeddings(tmp_path):
    bundle, _ = trained_bundle()
    ds = make_two_moons(30, 0.1, 0)
    n = export_embeddings(bundle, ds, tmp_path / "e.csv")
    with open(tmp_path / "e.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert n == 30 and len(rows) == 31 and all(len(r) == bundle.embed_dim + 2 for r in rows)
    assert rows[0][-2:] == ["label", "domain"]
    export_embeddings(bundle, ds, tmp_path / "f.csv")
    assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "f.csv").read_bytes()
    got = np.array([[float(v) for v in r[:-2]] for r in rows[1:]])
    assert np.array_equal(got, bundle.embed(ds.features))


# --- CLI -----------------------------------------------------------------------------------------

def test_cli_no_args_is_usage():
    assert run_cli([]) == 2


def test_cli_missing_config_is_usage(tmp_path):
    assert run_cli(["train", "--config", str(tmp_path / "nope.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nepoch = 3\n")
    assert run_cli(["train", "--config", str(bad)]) == 2


def test_cli_train_eval_export(tmp_path, capsys):
    cfg = tmp_path / "smoke.toml"
    cfg.write_text(SMOKE)
    out = tmp_path / "run"
    assert run_cli(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(read_metrics(out / "metrics.csv")) == 2
    assert (out / "checkpoint.json").exists() and (out / "config.toml").exists()
    capsys.readouterr()
    assert run_cli(["eval", "--checkpoint", str(out / "checkpoint.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["target_accuracy"] <= 1.0 and 0.0 <= report["a_distance"] <= 2.0
    assert run_cli(["export-emb", "--checkpoint", str(out / "checkpoint.json"), "--out", str(tmp_path / "emb")]) == 0
    assert (tmp_path / "emb" / "embeddings_target.csv").exists()


def test_cli_eval_missing_checkpoint(tmp_path, capsys):
    assert run_cli(["eval", "--checkpoint", str(tmp_path / "missing.json")]) == 1
    assert "not found" in capsys.readouterr().err


def test_cli_train_is_deterministic(tmp_path):
    cfg = tmp_path / "smoke.toml"
    cfg.write_text(SMOKE)
    out = tmp_path / "run"
    runs = []
    for _ in range(2):
        assert run_cli(["train", "--config", str(cfg), "--out", str(out)]) == 0
        runs.append({f: (out / f).read_bytes() for f in ("metrics.csv", "checkpoint.json")})
    assert runs[0] == runs[1]
