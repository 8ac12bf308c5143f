"""Acceptance gate. Each test records one PASS/FAIL line, printed in the terminal summary."""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from pointgraph.config import ExperimentConfig
from pointgraph.harness import get_dataset, gradient_check, run_experiment, train
from pointgraph.model import ModelParams, forward
from pointgraph.spatial import knn_brute, knn_kdtree
from pointgraph.stress import pairwise_distances, stress, stress_squared_grad

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def test_gradient_exactness(criterion):
    cfg = ExperimentConfig.load(CONFIGS / "tiny.json")
    assert (cfg.n_points, cfg.k, cfg.T, cfg.d_graph) == (8, 2, 2, 3)
    assert max(vars(cfg.widths).values()) <= 8
    t0 = time.perf_counter()
    results = {g: gradient_check(replace(cfg, gamma=g), step=1e-5) for g in (0.0, 1.0)}
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results.values())
    flips = sum(r.tie_flips for r in results.values())
    n = sum(r.n_checked for r in results.values())
    ok = worst < 1e-4 and flips == 0 and elapsed < 30
    criterion("gradient exactness", ok,
              f"max rel err {worst:.2e} over {n} coords, gamma in {{0,1}}, {flips} tie flips, {elapsed:.1f}s")
    assert ok


def test_stress_closed_forms(criterion):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(50, 3))
    d = pairwise_distances(x)
    s_id = stress(d, pairwise_distances(x)).s
    scale_err = max(abs(stress(d, pairwise_distances(c * x)).s - abs(1 - c)) for c in (0.5, 2.0, 3.0))
    moved = x @ random_rotation(rng).T + rng.normal(size=3) * 5
    s_rigid = stress(d, pairwise_distances(moved)).s
    s2, grad = stress_squared_grad(x, moved)
    gnorm = float(np.linalg.norm(grad))
    ok = s_id < 1e-12 and scale_err < 1e-9 and s_rigid < 1e-12 and gnorm < 1e-9
    criterion("stress closed forms", ok,
              f"identity S={s_id:.1e}, scaling err {scale_err:.1e}, rigid S={s_rigid:.1e}, grad norm {gnorm:.1e}")
    assert ok


def test_kdtree_matches_brute_force(criterion):
    rng = np.random.default_rng(2024)
    dims, ks = [1, 2, 3, 6, 9, 12], [1, 4, 16]
    n_inst = 1008
    mismatches = 0
    t0 = time.perf_counter()
    for i in range(n_inst):
        d = dims[i % len(dims)]
        k = ks[(i // len(dims)) % len(ks)]
        n = int(rng.integers(k + 1, 513))
        kind = i % 4
        if kind == 0:
            x = rng.normal(size=(n, d))
        elif kind == 1:
            x = rng.random(size=(n, d)) * 100
        elif kind == 2:  # integer lattice: many exact ties
            x = rng.integers(0, 4, size=(n, d)).astype(float)
        else:  # duplicated points
            base = rng.normal(size=(max(2, n // 3), d))
            x = base[rng.integers(0, len(base), size=n)]
        if not np.array_equal(knn_kdtree(x, k).neighbors, knn_brute(x, k).neighbors):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    criterion("kd-tree equals brute force", ok,
              f"{n_inst} instances, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


def test_permutation_invariance(criterion):
    cfg = ExperimentConfig.load(CONFIGS / "toy.json")
    rng = np.random.default_rng(99)
    model = ModelParams.init(cfg.architecture(3), rng, np.float64)
    worst = 0.0
    for _ in range(100):
        cloud = rng.normal(size=(64, 3))
        perm = rng.permutation(64)
        a = forward(model, cloud)[0]
        b = forward(model, cloud[perm])[0]
        worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst < 1e-9
    criterion("permutation invariance", ok, f"100 clouds, max logit difference {worst:.1e}")
    assert ok


@pytest.fixture(scope="module")
def toy_runs():
    cfg = ExperimentConfig.load(CONFIGS / "toy.json")
    data = get_dataset(cfg)
    out = {}
    t0 = time.perf_counter()
    for mode in ("baseline", "learned"):
        _, m = train(replace(cfg, mode=mode), data, cfg.seeds[0])
        out[mode] = m
    out["elapsed"] = time.perf_counter() - t0
    out["epochs"] = cfg.epochs
    return out


def test_toy_end_to_end(criterion, toy_runs):
    acc = {m: toy_runs[m].final["test_overall_acc"] for m in ("baseline", "learned")}
    ok = min(acc.values()) >= 95.0 and toy_runs["epochs"] <= 200 and toy_runs["elapsed"] < 600
    criterion("toy end-to-end learning", ok,
              f"held-out acc baseline {acc['baseline']:.1f}%, learned {acc['learned']:.1f}%, "
              f"{toy_runs['epochs']} epochs, {toy_runs['elapsed']:.0f}s")
    assert ok


def test_baseline_self_consistency(criterion, toy_runs):
    fin = toy_runs["baseline"].final
    shared = f"{fin['test_shared_edges']:.2f}"
    ok = shared == "100.00" and fin["test_stress"] == 0.0
    criterion("baseline self-consistency", ok, f"shared edges {shared}%, stress {fin['test_stress']!r}")
    assert ok


def test_gamma_trend(criterion):
    cfg = ExperimentConfig.load(CONFIGS / "toy_gamma.json")
    data = get_dataset(cfg)
    fin = {g: train(replace(cfg, gamma=g), data, cfg.seeds[0])[1].final for g in (10.0, 0.0)}
    s10, s0 = fin[10.0]["test_stress"], fin[0.0]["test_stress"]
    shared = fin[10.0]["test_shared_edges"]
    ok = s10 < 0.1 and s10 < s0 and shared > 85.0
    criterion("gamma trend", ok,
              f"stress {s10:.4f} at gamma=10 vs {s0:.4f} at gamma=0, shared edges {shared:.1f}% at gamma=10")
    assert ok


def test_determinism(criterion, tmp_path):
    cfg = replace(ExperimentConfig.load(CONFIGS / "toy.json"), epochs=3, toy_per_class=30)
    data = get_dataset(cfg)
    run_experiment(cfg, tmp_path / "a", data)
    run_experiment(cfg, tmp_path / "b", get_dataset(cfg))
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.suffix in (".json", ".jsonl"))
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    ok = len(names) >= 3 and all(same)
    criterion("determinism", ok, f"{sum(same)}/{len(names)} metrics files byte-identical ({', '.join(names)})")
    assert ok
