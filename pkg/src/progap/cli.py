"""Command line interface: ``progap {train,account,calibrate,sweep,generate}``.

Exit codes: 0 success, 1 runtime failure (e.g. calibration), 2 usage or
configuration error. ``PROGAP_THREADS`` caps BLAS threads and the number of
seeds run in parallel worker processes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import privacy as pv
from .graph import SbmSpec, generate_sbm, load_graph, save_graph, split_nodes
from .rng import make_rng
from .trainer import ModelConfig, TrainConfig, evaluate, train_progressive

log = logging.getLogger("progap")

SCHEMA_VERSION = 1
N_BOOTSTRAP = 1000


class UsageError(Exception):
    """Bad command line or configuration (exit status 2)."""


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("progap.schemas").joinpath(f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def validate(obj, name: str) -> None:
    jsonschema.validate(obj, load_schema(name))


def parse_epsilon(value) -> float:
    if value is None:
        return math.inf
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity"):
            return math.inf
        value = float(value)
    value = float(value)
    if not value > 0:
        raise ValueError(f"epsilon must be positive, got {value}")
    return value


def _json_num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        config = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    try:
        validate(config, "config")
    except jsonschema.ValidationError as exc:
        raise UsageError(f"{path}: invalid config: {exc.message}") from None
    base = path.parent
    files = config["dataset"].get("files")
    if files:
        for key in ("edges", "features", "labels"):
            files[key] = str((base / files[key]).resolve())
    return config


@lru_cache(maxsize=4)
def _dataset(dataset_json: str):
    dataset = json.loads(dataset_json)
    if "sbm" in dataset:
        return generate_sbm(SbmSpec(**dataset["sbm"]))
    files = dataset["files"]
    graph = load_graph(files["edges"], files["features"], files["labels"])
    return graph, split_nodes(graph, seed=files.get("split_seed", 0))


def build_dataset(config: dict):
    return _dataset(json.dumps(config["dataset"], sort_keys=True))


def _privacy_spec(config: dict, graph, epsilon: float) -> pv.PrivacySpec:
    p = config.get("privacy", {})
    level = p.get("level", "edge")
    if math.isinf(epsilon):
        level = "none"
    delta = p.get("delta", "auto")
    if delta == "auto":
        delta = pv.default_delta(graph.num_nodes if level == "node" else graph.num_edges)
    return pv.PrivacySpec(
        level=level, delta=float(delta), depth=config.get("model", {}).get("depth", 2),
        max_degree=p.get("max_degree", 100), clip=p.get("clip", 1.0),
        epsilon=None if level == "none" else epsilon,
    )


def run_seed(config: dict, seed: int, out_dir: str | None = None) -> dict:
    """Train once and return the per-seed summary (also written to ``out_dir``)."""
    graph, masks = build_dataset(config)
    epsilon = parse_epsilon(config.get("privacy", {}).get("epsilon"))
    spec = _privacy_spec(config, graph, epsilon)
    m = config.get("model", {})
    t = config.get("train", {})
    model_cfg = ModelConfig(depth=m.get("depth", 2), hidden_dim=m.get("hidden_dim", 16),
                            base_layers=m.get("base_layers", 1),
                            head_layers=m.get("head_layers", 1),
                            freeze_prior=m.get("freeze_prior", False))
    default_epochs = 10 if spec.level == "node" else 100
    train_cfg = TrainConfig(epochs=t.get("epochs", default_epochs),
                            learning_rate=t.get("learning_rate", 0.01),
                            patience=t.get("patience"), batch_size=t.get("batch_size", 256),
                            seed=seed)
    model, metrics, report = train_progressive(graph, masks, model_cfg, spec, train_cfg)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "test_acc": _json_num(evaluate(model, graph, masks, "test")),
        "val_acc": _json_num(evaluate(model, graph, masks, "val")),
        "epsilon": None if spec.level == "none" else _json_num(report.epsilon),
        "delta": None if spec.level == "none" else spec.delta,
        "alpha_star": _json_num(report.alpha_star),
        "sigma_ap": _json_num(report.params.get("sigma_ap")),
        "sigma_gp": _json_num(report.params.get("sigma_gp")),
        "K": model_cfg.depth,
        "level": spec.level,
        "seeds": [seed],
        "nap_calls": model.cache.nap_calls,
        "timestamp": _timestamp(),
    }
    validate(summary, "summary")
    if out_dir is not None:
        seed_dir = Path(out_dir) / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        with open(seed_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for rec in metrics:
                fh.write(json.dumps({k: _json_num(v) if isinstance(v, float) else v
                                     for k, v in rec.items()}) + "\n")
        (seed_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", "utf-8")
    return summary


def bootstrap_ci(values, n_resamples: int = N_BOOTSTRAP, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap CI of the mean (seeded)."""
    values = np.asarray(values, dtype=np.float64)
    rng = make_rng(seed, "bootstrap")
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    means = values[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(means, [tail, 100.0 - tail])
    return float(lo), float(hi)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PROGAP_THREADS", "1")))
    except ValueError:
        raise UsageError("PROGAP_THREADS must be an integer") from None


def run_experiment(config: dict, out_dir: str | None) -> dict:
    seeds = config.get("seeds", [0])
    workers = min(_threads(), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(run_seed, [config] * len(seeds), seeds,
                                      [out_dir] * len(seeds)))
    else:
        summaries = [run_seed(config, s, out_dir) for s in seeds]
    accs = [s["test_acc"] for s in summaries]
    finite = [a for a in accs if a is not None]
    lo, hi = bootstrap_ci(finite) if finite else (math.nan, math.nan)
    first = summaries[0]
    aggregate = {
        "schema_version": SCHEMA_VERSION,
        "mean": float(np.mean(finite)) if finite else math.nan,
        "ci_low": lo,
        "ci_high": hi,
        "n_bootstrap": N_BOOTSTRAP,
        "test_accs": accs,
        "seeds": list(seeds),
        "epsilon": first["epsilon"],
        "delta": first["delta"],
        "K": first["K"],
        "level": first["level"],
        "timestamp": _timestamp(),
    }
    validate(aggregate, "aggregate")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "aggregate.json").write_text(json.dumps(aggregate, indent=2) + "\n", "utf-8")
    return aggregate


def _apply_overrides(config: dict, args) -> dict:
    config = json.loads(json.dumps(config))
    if getattr(args, "seeds", None):
        config["seeds"] = args.seeds
    if getattr(args, "epsilon", None) is not None:
        config.setdefault("privacy", {})["epsilon"] = args.epsilon
    if getattr(args, "level", None):
        config.setdefault("privacy", {})["level"] = args.level
    if getattr(args, "depth", None) is not None:
        config.setdefault("model", {})["depth"] = args.depth
    if getattr(args, "out", None):
        config["output_dir"] = args.out
    try:
        validate(config, "config")
    except jsonschema.ValidationError as exc:
        raise UsageError(f"invalid config after overrides: {exc.message}") from None
    return config


def cmd_train(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    aggregate = run_experiment(config, config.get("output_dir"))
    print(json.dumps(aggregate, indent=2))
    return 0


def _fmt_eps(eps: float) -> str:
    return "inf" if math.isinf(eps) else repr(float(eps))


def cmd_sweep(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    eps_list = args.epsilons or config.get("epsilons")
    if not eps_list:
        raise UsageError("sweep needs an 'epsilons' list in the config or --epsilons")
    eps_values = sorted(parse_epsilon(e) for e in eps_list)
    out_root = config.get("output_dir")
    rows = []
    for eps in eps_values:
        cfg = json.loads(json.dumps(config))
        cfg.setdefault("privacy", {})["epsilon"] = "inf" if math.isinf(eps) else eps
        sub = str(Path(out_root) / f"eps_{_fmt_eps(eps)}") if out_root else None
        agg = run_experiment(cfg, sub)
        rows.append({"epsilon": _fmt_eps(eps), "mean_acc": agg["mean"],
                     "ci_low": agg["ci_low"], "ci_high": agg["ci_high"]})
    for i, row in enumerate(rows):
        # trend check: accuracy should not drop as epsilon grows, up to CI overlap
        prev = rows[i - 1] if i else None
        row["monotone_ok"] = prev is None or (
            row["mean_acc"] >= prev["mean_acc"] or row["ci_high"] >= prev["ci_low"])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["epsilon", "mean_acc", "ci_low", "ci_high", "monotone_ok"],
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    text = buf.getvalue()
    if out_root:
        Path(out_root).mkdir(parents=True, exist_ok=True)
        (Path(out_root) / "sweep.csv").write_text(text, "utf-8")
    sys.stdout.write(text)
    return 0


def _account_spec(args, need_epsilon: bool) -> pv.PrivacySpec:
    node = args.level == "node"
    if node:
        missing = [f for f in ("max_degree", "batch_size", "num_nodes", "iterations")
                   if getattr(args, f) is None]
        if missing:
            raise UsageError("node level needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if not need_epsilon:
        if args.sigma is None and args.depth:
            raise UsageError("--sigma is required")
        if node and args.iterations and args.sigma_gp is None:
            raise UsageError("--sigma-gp is required when --iterations > 0")
    try:
        return pv.PrivacySpec(
            level=args.level, delta=args.delta, depth=args.depth,
            max_degree=args.max_degree or 1, clip=args.clip,
            batch_size=args.batch_size, iterations=args.iterations or 0,
            num_nodes=args.num_nodes,
            sigma_ap=None if need_epsilon else (args.sigma if args.depth else 0.0),
            sigma_gp=None if need_epsilon else args.sigma_gp,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_account(args) -> int:
    report = pv.account(_account_spec(args, need_epsilon=False), method=args.method)
    out = report.to_dict()
    validate(out, "report")
    print(json.dumps(out, indent=2))
    return 0


def cmd_calibrate(args) -> int:
    spec = _account_spec(args, need_epsilon=True)
    target = parse_epsilon(args.epsilon)
    try:
        spec = pv.calibrate(replace(spec, epsilon=None if math.isinf(target) else target))
    except pv.CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps({"error": "unreachable", "achievable_epsilon": _json_num(exc.achievable)}))
        return 1
    achieved = 0.0 if math.isinf(target) else pv.account(spec).epsilon
    out = {
        "level": args.level,
        "target_epsilon": _json_num(target),
        "sigma_ap": spec.sigma_ap,
        "sigma_gp": spec.sigma_gp,
        "epsilon": None if math.isinf(target) else _json_num(achieved),
        "delta": spec.delta,
    }
    validate(out, "calibration")
    print(json.dumps(out, indent=2))
    return 0


def cmd_generate(args) -> int:
    try:
        spec = SbmSpec(args.num_nodes, args.num_classes, args.intra_p, args.inter_p,
                       args.feature_dim, args.feature_signal, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    graph, _ = generate_sbm(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"edges": out / "edges.tsv", "features": out / "features.csv", "labels": out / "labels.txt"}
    save_graph(graph, paths["edges"], paths["features"], paths["labels"])
    print(json.dumps({k: str(v) for k, v in paths.items()} | {
        "num_nodes": graph.num_nodes, "num_edges": graph.num_edges}, indent=2))
    return 0


def _add_accounting_flags(p, epsilon: bool) -> None:
    p.add_argument("--level", choices=["edge", "node"], required=True)
    p.add_argument("--depth", "-K", type=int, required=True, help="number of NAP stages K")
    p.add_argument("--delta", type=float, required=True)
    if epsilon:
        p.add_argument("--epsilon", required=True, help="target epsilon (or 'inf')")
    else:
        p.add_argument("--sigma", "--sigma-ap", dest="sigma", type=float,
                       help="aggregation noise std")
        p.add_argument("--sigma-gp", type=float, help="gradient noise std (node level)")
        p.add_argument("--method", choices=["auto", "grid"], default="auto",
                       help="edge level: closed form (auto) or the alpha grid")
    p.add_argument("--max-degree", "-D", type=int)
    p.add_argument("--iterations", "-T", type=int, help="DP-SGD steps per stage")
    p.add_argument("--batch-size", "-B", type=int)
    p.add_argument("--num-nodes", "-N", type=int)
    p.add_argument("--clip", "-C", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (("train", cmd_train, "train once per seed and aggregate"),
                               ("sweep", cmd_sweep, "train over a list of epsilons")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--level", choices=["edge", "node", "none"])
        p.add_argument("--depth", type=int)
        if name == "train":
            p.add_argument("--epsilon", type=parse_epsilon)
        else:
            p.add_argument("--epsilons", nargs="+")
        p.set_defaults(func=fn)

    p = sub.add_parser("account", help="privacy guarantee for given noise scales")
    _add_accounting_flags(p, epsilon=False)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("calibrate", help="noise scales for a target epsilon")
    _add_accounting_flags(p, epsilon=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("generate", help="write a synthetic SBM graph to files")
    p.add_argument("--num-nodes", type=int, required=True)
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--intra-p", type=float, required=True)
    p.add_argument("--inter-p", type=float, required=True)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--feature-signal", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except UsageError as exc:
        print(f"progap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except pv.CalibrationError as exc:
        print(f"progap {args.command}: calibration failed: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"progap {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
