"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_checkpoint_config
from .config import ExperimentConfig
from .geometry import normalize, read_cloud_csv, read_matrix_csv, read_off, sample_surface, write_cloud_csv
from .harness import (
    evaluate,
    get_dataset,
    gradient_check,
    mapped_features,
    project_fig3,
    projection_svg,
    rows_to_text,
    run_experiment,
    sweep,
    table_columns,
    worker_count,
    write_projection_csv,
)
from .spatial import knn_kdtree, read_graph_csv, shared_edge_percentage, write_graph_csv
from .stress import pairwise_distances, stress

HELP_WIDTH = 80


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pointgraph", formatter_class=_formatter,
                description="Point cloud classification with learned k-NN graphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, formatter_class=_formatter)

    s = add("sample", "Sample a point cloud from a triangle mesh in OFF format.")
    s.add_argument("--in", dest="mesh", required=True, help="input mesh (.off)")
    s.add_argument("--n", type=int, default=1024, help="number of points (default: 1024)")
    s.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    s.add_argument("--raw", action="store_true", help="skip centering and unit-sphere scaling")
    s.add_argument("--out", required=True, help="output cloud CSV")

    s = add("train", "Train every seed of an experiment config.")
    s.add_argument("--config", required=True, help="experiment config JSON")
    s.add_argument("--out", required=True, help="output directory for metrics and checkpoints")
    s.add_argument("--seed", type=int, action="append",
                   help="train this seed instead of the config's seeds (repeatable)")

    s = add("eval", "Evaluate a checkpoint on a dataset split.")
    s.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    s.add_argument("--split", choices=["train", "validation", "test"], default="test",
                   help="split to evaluate (default: test)")
    s.add_argument("--config", help="config JSON describing the dataset (default: checkpoint sidecar)")

    s = add("graph", "Export the directed k-NN graph of a cloud as v,w edge rows.")
    s.add_argument("--cloud", required=True, help="input cloud CSV")
    s.add_argument("--k", type=int, default=16, help="neighbors per node (default: 16)")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", help="build the graph in this model's mapped space")
    g.add_argument("--baseline", action="store_true", help="build the graph over xyz")
    s.add_argument("--out", required=True, help="output edge CSV")

    s = add("compare-graphs", "Print the percentage of edges shared by two graphs.")
    s.add_argument("a", help="first edge CSV")
    s.add_argument("b", help="second edge CSV")

    s = add("stress", "Print the stress between a cloud and its mapped image.")
    s.add_argument("--cloud", required=True, help="input cloud CSV (xyz used)")
    s.add_argument("--mapped", required=True, help="mapped features CSV, one row per point")

    s = add("gradcheck", "Compare analytic and finite-difference gradients on a small model.")
    s.add_argument("--config", required=True, help="experiment config JSON (architecture and gamma)")
    s.add_argument("--step", type=float, default=1e-5, help="central difference step (default: 1e-05)")
    s.add_argument("--seed", type=int, default=0, help="seed for parameters and clouds (default: 0)")
    s.add_argument("--tol", type=float, default=1e-4, help="maximum relative error (default: 0.0001)")

    s = add("project", "Chart a cloud's mapped image on the plane through anchors A, B and F.")
    s.add_argument("--cloud", required=True, help="input cloud CSV")
    s.add_argument("--checkpoint", help="model whose feature map is used (default: identity)")
    s.add_argument("--out", required=True, help="output CSV with label,x,y rows")
    s.add_argument("--svg", help="also write a scatter plot here")

    s = add("sweep", "Run one seed-averaged experiment per value of a config field.")
    s.add_argument("--config", required=True, help="base experiment config JSON")
    s.add_argument("--axis", required=True, choices=["d_graph", "gamma"], help="field to vary")
    s.add_argument("--values", required=True, help="comma-separated values, e.g. 0,0.0001,0.01")
    s.add_argument("--out", help="output directory for tables and per-row runs")
    s.add_argument("--workers", type=int, help="parallel jobs (default: POINTGRAPH_THREADS, 0 = auto)")
    return p


def _load_config(path) -> ExperimentConfig:
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return ExperimentConfig.load(path)


def _load_model(path, dtype=np.float64):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path, dtype)


def cmd_sample(a):
    cloud = sample_surface(read_off(a.mesh), a.n, a.seed)
    write_cloud_csv(cloud if a.raw else normalize(cloud), a.out)


def cmd_train(a):
    cfg = _load_config(a.config)
    if a.seed:
        cfg = replace(cfg, seeds=a.seed)
    summary = run_experiment(cfg, a.out)
    print(json.dumps(summary["mean"], sort_keys=True))


def cmd_eval(a):
    if not Path(a.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {a.checkpoint}")
    cfg = _load_config(a.config) if a.config else load_checkpoint_config(a.checkpoint)
    model = _load_model(a.checkpoint, np.dtype(cfg.dtype))
    data = get_dataset(cfg)
    res = evaluate(model, getattr(data, a.split), data.n_classes)
    print(json.dumps(res, sort_keys=True))


def cmd_graph(a):
    cloud = read_cloud_csv(a.cloud)
    if a.baseline:
        feats = cloud.points
    else:
        feats = mapped_features(_load_model(a.checkpoint), cloud.features)
    write_graph_csv(knn_kdtree(feats, a.k), a.out)


def cmd_compare(a):
    print(f"{shared_edge_percentage(read_graph_csv(a.a), read_graph_csv(a.b)):.2f}")


def cmd_stress(a):
    cloud = read_cloud_csv(a.cloud)
    mapped = read_matrix_csv(a.mapped)
    if len(mapped) != len(cloud.points):
        raise ValueError(f"{a.mapped}: {len(mapped)} rows but the cloud has {len(cloud.points)} points")
    print(f"{stress(pairwise_distances(cloud.points), pairwise_distances(mapped)).s:.6g}")


def cmd_gradcheck(a):
    cfg = _load_config(a.config)
    res = gradient_check(cfg, a.step, a.seed)
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_checked} parameters, "
          f"{res.tie_flips} k-NN tie flips")
    if res.tie_flips:
        raise RuntimeError("k-NN selection changed under probing; try another --seed")
    if not res.max_rel_error < a.tol:
        raise RuntimeError(f"max relative error {res.max_rel_error:.3e} exceeds {a.tol:g}")


def cmd_project(a):
    cloud = read_cloud_csv(a.cloud)
    F = _load_model(a.checkpoint).F if a.checkpoint else None
    proj = project_fig3(cloud.features if F is not None else cloud.points, F)
    write_projection_csv(proj, a.out)
    if a.svg:
        Path(a.svg).write_text(projection_svg(proj))


def cmd_sweep(a):
    cfg = _load_config(a.config)
    values = [v for v in a.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values lists no values")
    try:
        values = [int(v) if a.axis == "d_graph" else float(v) for v in values]
    except ValueError as exc:
        raise UsageError(f"--values: {exc}") from None
    rows = sweep(cfg, a.axis, values, a.out, a.workers or worker_count())
    sys.stdout.write(rows_to_text(rows, table_columns(a.axis)))


COMMANDS = {
    "sample": cmd_sample, "train": cmd_train, "eval": cmd_eval, "graph": cmd_graph,
    "compare-graphs": cmd_compare, "stress": cmd_stress, "gradcheck": cmd_gradcheck,
    "project": cmd_project, "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pointgraph {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"pointgraph {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
