import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pointgraph.checkpoint import load_checkpoint, load_checkpoint_config, save_checkpoint
from pointgraph.config import ExperimentConfig, Widths
from pointgraph.harness import (
    DegenerateBasisError,
    anchor_indices,
    classification_metrics,
    evaluate,
    forward,
    gradient_check,
    lr_schedule,
    model_name,
    project_fig3,
    rows_to_csv,
    rows_to_text,
    seed_average,
    sweep,
    table_columns,
    train,
    worker_count,
)
from pointgraph.model import ModelParams
from pointgraph.nn import MlpParams
from pointgraph.geometry import sample_surface
from pointgraph.toy import make_toy_dataset, torus

from conftest import tiny_arch

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = Widths(f_hidden=8, node_hidden=8, node_out=8, edge_hidden=8, edge_out=8,
               fusion_hidden=16, fusion_out=16, head_hidden=8)


def small_config(**kw):
    base = dict(T=2, k=4, epochs=3, lr=1e-3, seeds=[0], n_points=24, toy_per_class=10,
                val_fraction=0.2, widths=SMALL)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    return make_toy_dataset(24, 10, seed=0, val_fraction=0.2, test_fraction=0.2)


# --- schedule and metrics -----------------------------------------------

def test_lr_schedule_examples():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(20) == 5e-5
    assert lr_schedule(99) == pytest.approx(6.25e-6, rel=1e-15)
    assert lr_schedule(19) == 1e-4
    with pytest.raises(ValueError):
        lr_schedule(-1)


@given(st.integers(0, 500), st.integers(1, 50))
def test_lr_schedule_monotone_piecewise(epoch, period):
    assert lr_schedule(epoch + 1, 1.0, period) <= lr_schedule(epoch, 1.0, period)
    start = (epoch // period) * period
    assert lr_schedule(epoch, 1.0, period) == lr_schedule(start, 1.0, period)


def test_classification_metrics_examples():
    labels = np.array([0] * 10 + [1] * 90)
    pred = labels.copy()
    assert classification_metrics(pred, labels, 2) == {"overall_acc": 100.0, "avg_class_acc": 100.0}
    pred[10:55] = 0  # class 1 recall 50%
    res = classification_metrics(pred, labels, 2)
    assert res["overall_acc"] == pytest.approx(55.0)
    assert res["avg_class_acc"] == pytest.approx(75.0)


def test_classification_metrics_absent_class(caplog):
    res = classification_metrics(np.array([0, 1]), np.array([0, 0]), 3)
    assert res["avg_class_acc"] == 50.0
    assert "absent" in caplog.text


def test_seed_average_examples():
    runs = [{"seed": s, "acc": a} for s, a in zip(range(3), (91.0, 92.0, 93.0))]
    avg = seed_average(runs)
    assert avg["acc"] == 92.0 and avg["acc_min"] == 91.0 and avg["acc_max"] == 93.0
    assert seed_average(runs[:1])["acc"] == 91.0
    mixed = seed_average([{"a": 1.0, "b": 10.0}, {"a": 3.0, "b": 20.0}])
    assert (mixed["a"], mixed["b"]) == (2.0, 15.0)
    with pytest.raises(ValueError):
        seed_average([])


# --- training ------------------------------------------------------------

def test_train_determinism_and_best_epoch(tmp_path, small_data):
    cfg = small_config()
    _, m1 = train(cfg, small_data, 0, tmp_path / "a")
    _, m2 = train(cfg, small_data, 0, tmp_path / "b")
    assert (tmp_path / "a/epochs_seed0.jsonl").read_bytes() == (tmp_path / "b/epochs_seed0.jsonl").read_bytes()
    assert m1.summary() == m2.summary()
    vals = [r["val_acc"] for r in m1.epochs]
    assert m1.best_val_acc == max(vals)
    assert m1.best_epoch == vals.index(max(vals))  # earliest of ties
    assert 0 <= m1.final["test_overall_acc"] <= 100 and m1.final["test_stress"] >= 0


def test_train_empty_validation_keeps_final(small_data, tmp_path):
    data = replace(small_data, validation=[])
    model, m = train(small_config(), data, 0, tmp_path)
    assert m.best_epoch == 2 and m.best_val_acc is None
    ck = load_checkpoint(tmp_path / "model_seed0.ckpt")
    x = np.stack([c.points for c in data.test[:2]])
    np.testing.assert_array_equal(forward(ck, x)[0], forward(model, x)[0])
    assert load_checkpoint_config(tmp_path / "model_seed0.ckpt") == small_config()


def test_train_loss_drops_twenty_percent():
    data = make_toy_dataset(64, 100, seed=0, val_fraction=0.2)
    cfg = ExperimentConfig.load(CONFIGS / "toy.json")
    cfg = replace(cfg, epochs=10)
    _, m = train(cfg, replace(data, validation=[], test=[]), 0)
    losses = [r["train_loss"] for r in m.epochs]
    assert losses[-1] <= 0.8 * losses[0]


def test_train_rejects_nonfinite(small_data):
    src = small_data.train[0]
    pts = src.points.copy()
    pts[0, 0] = 1e300
    bad = replace(src, points=pts)  # squares overflow inside the stress term
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FloatingPointError):
        train(small_config(gamma=1.0, dtype="float64"), replace(small_data, train=[bad] * 4), 0)


def test_baseline_reports_exact_stress_and_shared(small_data):
    model, m = train(small_config(mode="baseline", epochs=1), small_data, 0)
    assert m.final["test_stress"] == 0.0
    assert m.final["test_shared_edges"] == 100.0


def test_evaluate_order_invariant(small_data):
    model = ModelParams.init(small_config().architecture(3), np.random.default_rng(0))
    a = evaluate(model, small_data.test, 3)
    b = evaluate(model, small_data.test[::-1], 3)
    assert a["overall_acc"] == b["overall_acc"] and a["avg_class_acc"] == b["avg_class_acc"]
    assert a["stress"] == pytest.approx(b["stress"], rel=1e-12)
    assert a["shared_edges"] == pytest.approx(b["shared_edges"], rel=1e-12)
    with pytest.raises(ValueError):
        evaluate(model, [], 3)


def test_gradient_check_tiny_config():
    cfg = ExperimentConfig.load(CONFIGS / "tiny.json")
    res = gradient_check(cfg)
    assert res.tie_flips == 0 and res.max_rel_error < 1e-4


# --- config --------------------------------------------------------------

def test_config_roundtrip_and_rejects(tmp_path):
    cfg = small_config(gamma=0.5)
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text(json.dumps({"epochs": 3, "lr0": 1}))
    with pytest.raises(ValueError, match="lr0"):
        ExperimentConfig.load(tmp_path / "bad.json")
    (tmp_path / "bad2.json").write_text(json.dumps({"widths": {"depth": 3}}))
    with pytest.raises(ValueError, match="depth"):
        ExperimentConfig.load(tmp_path / "bad2.json")
    with pytest.raises(ValueError):
        ExperimentConfig(mode="baseline", d_graph=6)
    with pytest.raises(ValueError):
        ExperimentConfig(k=0)
    with pytest.raises(ValueError):
        ExperimentConfig(gamma=-1.0)


def test_checkpoint_roundtrip(tmp_path, rng):
    model = ModelParams.init(tiny_arch(fusion_out=5), rng)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.arch == model.arch
    assert all(np.array_equal(a, b) for a, b in zip(model.arrays(), back.arrays()))
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk")


# --- sweeps --------------------------------------------------------------

def test_sweep_rows_and_tables(tmp_path, small_data):
    cfg = small_config(epochs=1)
    rows = sweep(cfg, "d_graph", [1, 2, 3, 6, 9, 12], tmp_path, workers=1, dataset=small_data)
    assert [r["d_graph"] for r in rows] == [1, 2, 3, 6, 9, 12]
    assert [r["model"] for r in rows] == [f"mlp-3-8-{d}" for d in (1, 2, 3, 6, 9, 12)]
    header = (tmp_path / "sweep_d_graph.csv").read_text().splitlines()[0]
    assert header == "model,d_graph,stress,overall_acc,avg_class_acc,error"
    assert len((tmp_path / "sweep_d_graph.txt").read_text().splitlines()) == 7
    with pytest.raises(ValueError):
        sweep(cfg, "gamma", [], dataset=small_data)
    with pytest.raises(ValueError):
        sweep(cfg, "lr", [1.0], dataset=small_data)


def test_sweep_failure_recorded(small_data):
    rows = sweep(small_config(epochs=1), "gamma", [0.0, -1.0], workers=1, dataset=small_data)
    assert "error" not in rows[0] and "error" in rows[1]
    assert "failed" in rows_to_text(rows, table_columns("gamma"))
    assert rows_to_csv(rows, table_columns("gamma")).count("\n") == 3


def test_sweep_parallel_matches_serial(small_data):
    cfg = small_config(epochs=1)
    a = sweep(cfg, "gamma", [0.0, 1.0], workers=1, dataset=small_data)
    b = sweep(cfg, "gamma", [0.0, 1.0], workers=2, dataset=small_data)
    assert a == b


def test_model_names_and_workers(monkeypatch):
    assert model_name(ExperimentConfig(mode="baseline")) == "baseline"
    assert model_name(ExperimentConfig(d_graph=12)) == "mlp-3-16-12"
    monkeypatch.setenv("POINTGRAPH_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("POINTGRAPH_THREADS", "0")
    assert worker_count() >= 1


# --- projection ----------------------------------------------------------

def gram_schmidt_oracle(mapped, a, b, f):
    basis = np.stack([mapped[b] - mapped[a], mapped[f] - mapped[a]], axis=1)
    q, r = np.linalg.qr(basis)
    q = q * np.sign(np.diag(r))  # orient like the chart: positive along A->B, F on the positive side
    return (mapped - mapped[a]) @ q


def test_projection_planar_isometry(rng):
    # cloud inside a random plane through the origin, so the chart is its own plane
    while True:
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        pts = rng.normal(size=(30, 2)) @ q[:, :2].T
        idx = anchor_indices(pts)
        if len({idx["A"], idx["B"], idx["F"]}) == 3:  # anchors can coincide in a tilted plane
            break
    proj = project_fig3(pts, None)
    c = proj["coords"]
    d3 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d2 = np.linalg.norm(c[:, None] - c[None], axis=-1)
    assert np.max(np.abs(d3 - d2)) < 1e-9
    assert proj["anchor_coords"]["A"].tolist() == [0.0, 0.0]


def test_projection_matches_gram_schmidt(rng):
    cloud = sample_surface(torus(), 64, seed=3).points
    F = MlpParams.init([3, 8, 5], rng, he_output=True)
    proj = project_fig3(cloud, F)
    from pointgraph.nn import mlp_forward

    mapped = mlp_forward(F, cloud)[0]
    idx = anchor_indices(cloud)
    ref = gram_schmidt_oracle(mapped, idx["A"], idx["B"], idx["F"])
    np.testing.assert_allclose(proj["coords"], ref, atol=1e-10)
    assert np.all(proj["anchor_coords"]["A"] == 0)


def test_anchor_indices():
    pts = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0], [0, 0, 3], [0, 0, -3]])
    assert anchor_indices(pts) == dict(A=0, B=1, C=2, D=3, E=4, F=5)


def test_projection_errors(rng):
    line = np.outer(np.linspace(-1, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateBasisError, match="colinear"):
        project_fig3(line, None)
    with pytest.raises(DegenerateBasisError):
        project_fig3(rng.normal(size=(10, 3)), MlpParams.init([3, 4, 2], rng))
