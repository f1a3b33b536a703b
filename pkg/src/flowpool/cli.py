"""Command line: ``flowpool {pool, demo-circle, condition-study, classify, perm-check}``.

Exit codes: 0 success, 1 a check or computation failed, 2 usage or I/O error.
Every output file starts with (CSV: a ``# config:`` comment line) or contains
(JSON: a ``config`` key) the full effective configuration.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

logger = logging.getLogger("flowpool")


class UsageError(Exception):
    """Bad arguments, unreadable input or unwritable output."""


DEFAULTS: Dict[str, Dict] = {
    "pool": dict(m=5, epsilon=0.1, tau=1.0, steps=500, grad_tol=1e-5, objective="divergence", seed=0),
    "demo-circle": dict(n=20, m=12, lr=0.01, iters=300, epsilon=0.1, tau=None, seed=0, record_every=1),
    "condition-study": dict(clouds=70, eps_grid="0.001,0.01,0.1,1,10", m=50, n=100, d=2, fp_m=12, fp_n=20,
                            lam=1e-6, seed=0),
    "classify": dict(pooling="flowpool", folds=10, epochs=300, patience=20, batch_size=32, lr=0.01, d=8, M=5,
                     epsilon=0.1, tau=None, seed=0, workers=1),
    "perm-check": dict(trials=5, seed=0, d=8, M=5, epsilon=0.1, tau=None, break_reference=False, graphs=0),
}


# ----------------------------------------------------------------------------- io helpers

def read_pointcloud(path) -> np.ndarray:
    """Read the pointcloud CSV format: header ``x0,...,x{d-1}``, one point per row.

    Lines starting with ``#`` are comments.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise UsageError(f"{path}: empty pointcloud file")
    header = [h.strip() for h in lines[0].split(",")]
    if header != [f"x{k}" for k in range(len(header))]:
        raise UsageError(f"{path}: header must be x0,...,x{{d-1}}, got {lines[0]!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split(",")
        if len(tokens) != len(header):
            raise UsageError(f"{path}: row {lineno} has {len(tokens)} values, expected {len(header)}")
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise UsageError(f"{path}: row {lineno} is not numeric: {line!r}") from None
    if not rows:
        raise UsageError(f"{path}: no points")
    P = np.asarray(rows)
    if not np.all(np.isfinite(P)):
        raise UsageError(f"{path}: non-finite coordinates")
    return P


def _config_line(config) -> str:
    return "# config: " + json.dumps(config, sort_keys=True)


def write_pointcloud(path, P, config) -> None:
    P = np.asarray(P)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_config_line(config) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(P.shape[1])])
        for row in P:
            w.writerow([repr(float(v)) for v in row])


def write_table(path, header, rows, config) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_config_line(config) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def effective_config(command: str, args) -> Dict:
    """Defaults, overridden by the ``--config`` JSON file, overridden by explicit flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


# ----------------------------------------------------------------------------- commands

def cmd_pool(args) -> int:
    from .flow import FlowError, FlowParams, flowpool, init_reference
    from .sinkhorn import SinkhornParams

    cfg = effective_config("pool", args)
    Y = read_pointcloud(args.input)
    cfg["input"] = str(args.input)
    try:
        params = FlowParams(cfg["tau"], cfg["steps"], cfg["grad_tol"], cfg["objective"],
                            SinkhornParams(epsilon=cfg["epsilon"]))
        X0 = init_reference(cfg["m"], Y.shape[1], cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    try:
        res = flowpool(Y, X0, params)
    except FlowError as exc:
        print(f"flowpool: flow failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    write_pointcloud(out / "x_star.csv", res.x_star, cfg)
    write_table(out / "energy_trace.csv", ["step", "energy"], list(enumerate(res.energies)), cfg)
    print(f"pooled {Y.shape[0]} points to {cfg['m']}: {res.steps_taken} steps, "
          f"final max |grad| {res.final_grad_norm:.3e}, converged={res.converged}")
    return EXIT_OK


def cmd_demo_circle(args) -> int:
    from .experiments import default_demo_flow, unit_circle_demo
    from .flow import FlowError
    from .implicit import ImplicitDiffError

    cfg = effective_config("demo-circle", args)
    base = default_demo_flow(cfg["m"])
    flow = dataclasses.replace(base, tau=cfg["tau"] or base.tau,
                               sinkhorn=dataclasses.replace(base.sinkhorn, epsilon=cfg["epsilon"]))
    cfg["flow"] = dataclasses.asdict(flow)
    out = _out_dir(args)
    try:
        res = unit_circle_demo(cfg["n"], cfg["m"], cfg["lr"], cfg["iters"], cfg["seed"], flow,
                               record_every=cfg["record_every"])
    except (FlowError, ImplicitDiffError) as exc:
        print(f"demo-circle: diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    rows_x = [(k, i, *p) for k, X in enumerate(res.X_traj) for i, p in enumerate(X)]
    rows_y = [(k, j, *p) for k, Y in enumerate(res.Y_traj) for j, p in enumerate(Y)]
    write_table(out / "x_trajectory.csv", ["record", "point", "x0", "x1"], rows_x, cfg)
    write_table(out / "y_trajectory.csv", ["record", "point", "x0", "x1"], rows_y, cfg)
    write_table(out / "objective.csv", ["record", "objective"], list(enumerate(res.objective)), cfg)
    summary = {"config": cfg, "max_x_deviation": res.max_x_dev, "mean_y_deviation": res.mean_y_dev,
               "final_objective": res.objective[-1]}
    write_json(out / "summary.json", summary)
    print(f"max | |x_i| - 1 | = {res.max_x_dev:.3e}; mean | |y_j| - 1 | = {res.mean_y_dev:.3e}")
    return EXIT_OK


def _parse_grid(text) -> list:
    try:
        grid = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad --eps-grid {text!r}; expected comma-separated numbers") from None
    if not grid or any(e <= 0 for e in grid):
        raise UsageError("--eps-grid needs positive values")
    return grid


def cmd_condition_study(args) -> int:
    from .experiments import condition_study

    cfg = effective_config("condition-study", args)
    grid = _parse_grid(cfg["eps_grid"])
    if cfg["clouds"] < 1:
        raise UsageError("--clouds must be >= 1")
    out = _out_dir(args)
    study = condition_study(cfg["clouds"], grid, cfg["m"], cfg["n"], cfg["d"], cfg["seed"], cfg["lam"],
                            cfg["fp_m"], cfg["fp_n"])
    rows = study.rows()
    kx_cols = ["epsilon", "kappa_x_mean", "kappa_x_std", "kappa_x_median",
               "kappa_y_mean", "kappa_y_std", "kappa_y_median", "clouds_ok", "clouds_failed"]
    write_table(out / "condition_numbers.csv", kx_cols, [[r[c] for c in kx_cols] for r in rows], cfg)
    ka_cols = ["epsilon", "kappa_a_mean", "kappa_a_std", "kappa_a_median", "clouds_ok", "clouds_failed"]
    write_table(out / "linear_operator_condition.csv", ka_cols, [[r[c] for c in ka_cols] for r in rows], cfg)
    failed = sum(study.failures.values())
    for r in rows:
        print(f"eps={r['epsilon']:g}: median kappa_x {r['kappa_x_median']:.4g}, kappa_y {r['kappa_y_median']:.4g}, "
              f"kappa(A+lam I) {r['kappa_a_median']:.4g} ({r['clouds_ok']} ok, {r['clouds_failed']} failed)")
    return EXIT_OK if failed < cfg["clouds"] * len(grid) else EXIT_FAIL


def _load_dataset(path):
    from .graphs import DatasetError, parse_tu_dataset

    if path is None:
        raise UsageError("--dataset is required")
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    try:
        return parse_tu_dataset(path)
    except DatasetError as exc:
        raise UsageError(f"cannot parse dataset: {exc}") from None


def cmd_classify(args) -> int:
    from .pipeline import TrainConfig, TrainingError, default_pipeline_flow, train_eval_cv

    cfg = effective_config("classify", args)
    ds = _load_dataset(args.dataset)
    cfg["dataset"] = str(args.dataset)
    try:
        config = TrainConfig(batch_size=cfg["batch_size"], learning_rate=cfg["lr"], max_epochs=cfg["epochs"],
                             patience=cfg["patience"], seed=cfg["seed"], folds=cfg["folds"], d=cfg["d"],
                             M=cfg["M"], pooling=cfg["pooling"], workers=cfg["workers"])
        base = default_pipeline_flow(cfg["M"])
        flow = dataclasses.replace(base, tau=cfg["tau"] or base.tau,
                                   sinkhorn=dataclasses.replace(base.sinkhorn, epsilon=cfg["epsilon"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    try:
        report = train_eval_cv(ds, config, flow)
    except (TrainingError, ValueError) as exc:
        print(f"classify: {exc}", file=sys.stderr)
        return EXIT_FAIL
    payload = report.to_dict()
    payload["cli_config"] = cfg
    payload["tag"] = "baseline" if cfg["pooling"] == "sortpool" else "flowpool"
    write_json(out / f"cv_report_{cfg['pooling']}.json", payload)
    print(f"{cfg['pooling']}: mean accuracy {report.mean:.4f} +- {report.std:.4f} over {config.folds} folds")
    return EXIT_OK


def cmd_perm_check(args) -> int:
    from .experiments import perm_check
    from .pipeline import default_pipeline_flow

    cfg = effective_config("perm-check", args)
    ds = _load_dataset(args.dataset)
    cfg["dataset"] = str(args.dataset)
    if cfg["trials"] < 0:
        raise UsageError("--trials must be >= 0")
    base = default_pipeline_flow(cfg["M"])
    flow = dataclasses.replace(base, tau=cfg["tau"] or base.tau,
                               sinkhorn=dataclasses.replace(base.sinkhorn, epsilon=cfg["epsilon"]))
    graphs = ds.graphs[: cfg["graphs"]] if cfg["graphs"] else ds.graphs
    res = perm_check(graphs, cfg["trials"], cfg["seed"], ds.num_node_label_kinds, cfg["d"], cfg["M"], flow,
                     cfg["break_reference"])
    out = _out_dir(args)
    write_json(out / "perm_check.json", {"config": cfg, "max_deviation": res.max_deviation, "pairs": res.pairs,
                                         "passed": res.passed})
    verdict = "PASS" if res.passed else "FAIL"
    print(f"{verdict}: max deviation {res.max_deviation:.3e} over {res.pairs} (graph, permutation) pairs")
    return EXIT_OK if res.passed else EXIT_FAIL


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowpool", description="FlowPool experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--config", help="JSON file overriding the defaults")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("pool", help="pool a pointcloud CSV")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--grad-tol", dest="grad_tol", type=float)
    p.add_argument("--objective", choices=["divergence", "loss"])
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("demo-circle", help="unit-circle implicit-differentiation demo")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float, help="flow step (default m/4)")
    p.add_argument("--record-every", dest="record_every", type=int)
    p.set_defaults(func=cmd_demo_circle)

    p = sub.add_parser("condition-study", help="condition numbers over an epsilon grid")
    common(p)
    p.add_argument("--clouds", type=int)
    p.add_argument("--eps-grid", dest="eps_grid")
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--fp-m", dest="fp_m", type=int)
    p.add_argument("--fp-n", dest="fp_n", type=int)
    p.add_argument("--lam", type=float)
    p.set_defaults(func=cmd_condition_study)

    p = sub.add_parser("classify", help="k-fold graph classification on a TU dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pooling", choices=["flowpool", "sortpool"])
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float, help="flow step (default M/2)")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("perm-check", help="permutation invariance of pooled representations")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--graphs", type=int, help="check only the first N graphs (0 = all)")
    p.add_argument("--d", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float, help="flow step (default M/2)")
    p.add_argument("--break-reference", dest="break_reference", action="store_true", default=None,
                   help="negative control: a different X0 for every permutation")
    p.set_defaults(func=cmd_perm_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"flowpool {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
