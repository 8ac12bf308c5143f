"""Training loop, evaluation metrics, seed averaging, sweeps and hyperplane projections."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .geometry import DatasetSplit, PointCloud, load_dataset
from .model import BASELINE, ModelParams, forward, loss_and_grads, map_features
from .nn import AdamState, MlpParams, adam_step, finite_diff_check, mlp_forward
from .spatial import knn_indices, shared_edge_percentage_batch
from .stress import stress_squared_grad
from .toy import make_toy_dataset

log = logging.getLogger(__name__)

FINAL_FIELDS = ("test_overall_acc", "test_avg_class_acc", "test_stress", "test_shared_edges")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class RunMetrics:
    seed: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float | None = None
    final: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"seed": self.seed, "best_epoch": self.best_epoch, "best_val_acc": self.best_val_acc, **self.final}


def lr_schedule(epoch: int, lr0: float = 1e-4, period: int = 20) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * 0.5 ** (epoch // period)


def get_dataset(config: ExperimentConfig) -> DatasetSplit:
    if config.dataset == "toy":
        return make_toy_dataset(config.n_points, config.toy_per_class, config.data_seed, config.val_fraction)
    return load_dataset(config.dataset, config.n_points, config.val_fraction, config.data_seed,
                        config.cache_dir)


def _stack(clouds: list[PointCloud], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([c.features for c in clouds]).astype(dtype)
    y = np.array([c.label for c in clouds], dtype=np.int64)
    return x, y


def predict(model: ModelParams, clouds: list[PointCloud], batch_size: int = 64) -> dict:
    """Per-cloud predictions, stress and shared-edge percentage against the xyz graph."""
    preds, stresses, shared = [], [], []
    for i in range(0, len(clouds), batch_size):
        x, _ = _stack(clouds[i:i + batch_size], model.dtype)
        logits, cache = forward(model, x)
        preds.append(np.atleast_2d(logits).argmax(axis=1))
        xyz = cache.h0[..., :3]
        s2, _ = stress_squared_grad(xyz, cache.mapped)
        stresses.append(np.sqrt(s2))
        shared.append(shared_edge_percentage_batch(cache.nbr, knn_indices(xyz, model.arch.k)))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
    return {"pred": cat(preds), "stress": cat(stresses), "shared": cat(shared)}


def classification_metrics(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> dict:
    """Overall accuracy and average class accuracy (mean per-class recall), in percent.

    Classes absent from ``labels`` are left out of the average with a warning.
    """
    pred, labels = np.asarray(pred), np.asarray(labels)
    correct = pred == labels
    recalls = []
    for c in range(n_classes):
        mask = labels == c
        if not mask.any():
            log.warning("class %d absent from split; excluded from average class accuracy", c)
            continue
        recalls.append(correct[mask].mean())
    return {"overall_acc": float(100.0 * correct.mean()), "avg_class_acc": float(100.0 * np.mean(recalls))}


def evaluate(model: ModelParams, clouds: list[PointCloud], n_classes: int | None = None,
             batch_size: int = 64) -> dict:
    """Accuracies plus mean per-cloud stress and shared-edge % against the xyz graph."""
    if not clouds:
        raise ValueError("cannot evaluate an empty split")
    out = predict(model, clouds, batch_size)
    labels = np.array([c.label for c in clouds])
    res = classification_metrics(out["pred"], labels, n_classes or model.arch.d_classes)
    res["stress"] = float(out["stress"].mean())
    res["shared_edges"] = float(out["shared"].mean())
    return res


def init_model(config: ExperimentConfig, dataset: DatasetSplit, seed: int) -> ModelParams:
    d_in = dataset.train[0].features.shape[1]
    arch = config.architecture(dataset.n_classes, d_in)
    return ModelParams.init(arch, np.random.default_rng([seed, 1]), np.dtype(config.dtype))


def train(config: ExperimentConfig, dataset: DatasetSplit, seed: int,
          out_dir: str | os.PathLike | None = None) -> tuple[ModelParams, RunMetrics]:
    """Train one model; keeps the parameters of the epoch with the best validation accuracy.

    Ties keep the earliest epoch; with no validation data the final epoch is kept.
    """
    if not dataset.train:
        raise ValueError("training split is empty")
    model = init_model(config, dataset, seed)
    params = model.arrays()
    state = AdamState.zeros(params)
    rng = np.random.default_rng([seed, 2])
    x_all, y_all = _stack(dataset.train, model.dtype)
    metrics = RunMetrics(seed)
    best = None
    epoch_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        epoch_fh = open(out_dir / f"epochs_seed{seed}.jsonl", "w")
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config.lr, config.lr_halving_period)
            order = rng.permutation(len(x_all))
            losses, s2s = [], []
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                parts, grads = loss_and_grads(model, x_all[idx], y_all[idx], config.gamma)
                if not np.isfinite(parts.loss):
                    bad = "task loss" if not np.isfinite(parts.task) else "stress"
                    raise TrainingDiverged(f"non-finite {bad} at epoch {epoch}, batch {b}")
                garr = grads.arrays()
                for p, g in zip(model.mlps(), grads.mlps()):
                    for arr in g.arrays():
                        if not np.all(np.isfinite(arr)):
                            raise TrainingDiverged(
                                f"non-finite gradient at epoch {epoch}, batch {b} in MLP with dims {p.dims}")
                adam_step(params, garr, state, lr)
                losses.append(parts.loss * len(idx))
                s2s.append(parts.s_squared)
            row = {"epoch": epoch, "lr": lr, "train_loss": float(np.sum(losses) / len(x_all)),
                   "train_stress_sq": float(np.concatenate(s2s).mean())}
            if dataset.validation:
                row["val_acc"] = evaluate(model, dataset.validation, dataset.n_classes)["overall_acc"]
                if metrics.best_val_acc is None or row["val_acc"] > metrics.best_val_acc:
                    metrics.best_val_acc, metrics.best_epoch = row["val_acc"], epoch
                    best = model.copy()
            metrics.epochs.append(row)
            if epoch_fh is not None:
                epoch_fh.write(json.dumps(row, sort_keys=True) + "\n")
            log.info("seed %d epoch %d %s", seed, epoch, row)
    finally:
        if epoch_fh is not None:
            epoch_fh.close()
    if best is None:
        best, metrics.best_epoch = model, config.epochs - 1
    if dataset.test:
        ev = evaluate(best, dataset.test, dataset.n_classes)
        metrics.final = {"test_overall_acc": ev["overall_acc"], "test_avg_class_acc": ev["avg_class_acc"],
                         "test_stress": ev["stress"], "test_shared_edges": ev["shared_edges"]}
    if out_dir is not None:
        save_checkpoint(best, out_dir / f"model_seed{seed}.ckpt", config)
    return best, metrics


def seed_average(runs: list[dict]) -> dict:
    """Mean, min and max of each numeric final metric across runs."""
    if not runs:
        raise ValueError("need at least one run")
    out = {"n_runs": len(runs)}
    keys = [k for k in runs[0] if k != "seed" and isinstance(runs[0][k], (int, float))]
    for k in keys:
        vals = np.array([r[k] for r in runs], dtype=float)
        out[k] = float(vals.mean())
        out[k + "_min"] = float(vals.min())
        out[k + "_max"] = float(vals.max())
    return out


def run_experiment(config: ExperimentConfig, out_dir: str | os.PathLike | None = None,
                   dataset: DatasetSplit | None = None) -> dict:
    """Train every seed, write per-seed files and a summary; return the seed-averaged summary."""
    dataset = dataset or get_dataset(config)
    runs = []
    for seed in config.seeds:
        _, m = train(config, dataset, seed, out_dir)
        runs.append(m.summary())
    summary = {"runs": runs, "mean": seed_average(runs)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        config.save(out_dir / "config.json")
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


# --- gradient check ----------------------------------------------------

@dataclass
class GradientCheck:
    max_rel_error: float
    n_checked: int
    tie_flips: int
    worst: tuple | None = None


def gradient_check(config: ExperimentConfig, step: float = 1e-5, seed: int = 0, n_clouds: int = 2,
                   d_classes: int = 3, max_coords: int = 1_000_000) -> GradientCheck:
    """Central differences against the analytic gradient of the full training loss.

    Runs in float64 on random generic-position clouds of ``config.n_points``
    points. Biases get small random values so that no unit sits exactly on a
    ReLU kink. ``tie_flips`` counts probes that changed the k-NN selection;
    any flip makes the comparison meaningless at that coordinate.
    """
    rng = np.random.default_rng([seed, 3])
    arch = config.architecture(d_classes)
    model = ModelParams.init(arch, rng, np.float64)
    for mlp in model.mlps():
        for b in mlp.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(n_clouds, config.n_points, 3))
    y = rng.integers(0, d_classes, size=n_clouds)
    ref_nbr = None
    flips = 0

    def loss_fn():
        nonlocal ref_nbr, flips
        first = ref_nbr is None
        parts, grads = loss_and_grads(model, x, y, config.gamma, need_grads=first)
        if first:
            ref_nbr = parts.nbr
            return parts.loss, grads.arrays()
        flips += int(not np.array_equal(parts.nbr, ref_nbr))
        return parts.loss, None

    rep = finite_diff_check(loss_fn, model.arrays(), step, max_coords=max_coords, seed=seed)
    return GradientCheck(rep.max_rel_error, rep.n_checked, flips, rep.worst)


# --- sweeps --------------------------------------------------------------

AXES = {"d_graph": "d_graph", "gamma": "gamma"}


def model_name(config: ExperimentConfig) -> str:
    if config.mode == BASELINE:
        return "baseline"
    return f"mlp-3-{config.widths.f_hidden}-{config.d_graph}"


def _sweep_row(args):
    config, axis, value, out_dir, dataset = args
    row = {"model": model_name(config), axis: value}
    try:
        cfg = replace(config, **{axis: value})
        row["model"] = model_name(cfg)
        summ = run_experiment(cfg, None if out_dir is None else Path(out_dir) / f"{axis}_{value:g}", dataset)
        m = summ["mean"]
        row.update(stress=m["test_stress"], shared_edges=m["test_shared_edges"],
                   overall_acc=m["test_overall_acc"], avg_class_acc=m["test_avg_class_acc"])
    except Exception as exc:  # a failing row must not stop the sweep
        log.error("sweep row %s=%s failed: %s", axis, value, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def worker_count() -> int:
    raw = os.environ.get("POINTGRAPH_THREADS", "0")
    n = int(raw) if raw.strip() else 0
    return n if n > 0 else (os.cpu_count() or 1)


def sweep(config: ExperimentConfig, axis: str, values: list, out_dir: str | os.PathLike | None = None,
          workers: int | None = None, dataset: DatasetSplit | None = None) -> list[dict]:
    """One seed-averaged row per axis value, in the order given."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    if not values:
        raise ValueError("sweep axis has no values")
    cast = int if axis == "d_graph" else float
    values = [cast(v) for v in values]
    dataset = dataset or get_dataset(config)
    jobs = [(config, axis, v, out_dir, dataset) for v in values]
    workers = workers or worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(j) for j in jobs]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cols = table_columns(axis)
        (out_dir / f"sweep_{axis}.csv").write_text(rows_to_csv(rows, cols))
        (out_dir / f"sweep_{axis}.txt").write_text(rows_to_text(rows, cols))
    return rows


def table_columns(axis: str) -> list[str]:
    if axis == "d_graph":
        return ["model", "d_graph", "stress", "overall_acc", "avg_class_acc"]
    return ["model", "gamma", "stress", "shared_edges", "overall_acc", "avg_class_acc"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def rows_to_csv(rows: list[dict], cols: list[str]) -> str:
    lines = [",".join(cols + ["error"])]
    for r in rows:
        lines.append(",".join([_fmt(r.get(c)) for c in cols] + [r.get("error", "").replace(",", ";")]))
    return "\n".join(lines) + "\n"


def rows_to_text(rows: list[dict], cols: list[str]) -> str:
    cells = [cols] + [[_fmt(r.get(c)) if "error" not in r or c in ("model", cols[1]) else "failed"
                       for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells) + "\n"


# --- hyperplane projection ----------------------------------------------

ANCHORS = ("A", "B", "C", "D", "E", "F")


class DegenerateBasisError(ValueError):
    pass


def anchor_indices(points: np.ndarray) -> dict[str, int]:
    """A/B = argmax/argmin of x, C/D of y, E/F of z, on the original cloud."""
    out = {}
    for axis in range(3):
        out[ANCHORS[2 * axis]] = int(np.argmax(points[:, axis]))
        out[ANCHORS[2 * axis + 1]] = int(np.argmin(points[:, axis]))
    return out


def project_fig3(points: np.ndarray, F: MlpParams | None) -> dict:
    """Map the cloud through F (identity when None) and chart it on the plane through the images of A, B, F.

    Returns ``coords`` (N, 2), the anchor indices and their 2-D images.
    """
    points = np.asarray(points, dtype=np.float64)
    mapped = points if F is None else mlp_forward(F, points)[0]
    if mapped.shape[1] < 3:
        raise DegenerateBasisError(f"mapped space has {mapped.shape[1]} dims; a hyperplane chart needs >= 3")
    anchors = anchor_indices(points)
    a, b, f = mapped[anchors["A"]], mapped[anchors["B"]], mapped[anchors["F"]]
    ab = b - a
    n_ab = np.linalg.norm(ab)
    if n_ab == 0:
        raise DegenerateBasisError("anchors A and B coincide in mapped space")
    u = ab / n_ab
    af = f - a
    w_ = af - (af @ u) * u
    n_w = np.linalg.norm(w_)
    if n_w <= 1e-12 * max(1.0, np.linalg.norm(af)):
        raise DegenerateBasisError("anchors A, B and F are colinear in mapped space")
    w = w_ / n_w
    rel = mapped - a
    coords = np.stack([rel @ u, rel @ w], axis=1)
    return {"coords": coords, "anchors": anchors,
            "anchor_coords": {k: coords[i] for k, i in anchors.items()}}


def write_projection_csv(proj: dict, path: str | os.PathLike) -> None:
    """``label,x,y``: one row per point labelled by index, then the six anchor rows labelled A-F."""
    with open(path, "w") as fh:
        fh.write("label,x,y\n")
        for i, (x, y) in enumerate(proj["coords"]):
            fh.write(f"{i},{float(x)!r},{float(y)!r}\n")
        for k in ANCHORS:
            x, y = proj["anchor_coords"][k]
            fh.write(f"{k},{float(x)!r},{float(y)!r}\n")


def projection_svg(proj: dict, size: int = 400) -> str:
    c = proj["coords"]
    lo, hi = c.min(axis=0), c.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    pad = 20
    scale = (size - 2 * pad) / span
    xy = lambda p: (pad + (p[0] - lo[0]) * scale, size - pad - (p[1] - lo[1]) * scale)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for p in c:
        x, y = xy(p)
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="#4477aa"/>')
    for k in ANCHORS:
        x, y = xy(proj["anchor_coords"][k])
        parts.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="12" fill="#cc3311">{k}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def mapped_features(model: ModelParams, points: np.ndarray) -> np.ndarray:
    return map_features(model, np.asarray(points, dtype=model.dtype)[None])[0][0]
