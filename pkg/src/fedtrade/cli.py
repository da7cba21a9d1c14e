"""Batch front-end: generate federations, run experiments, sweep, report.

Everything is driven by JSON configs with strict schemas (unknown keys are
errors). Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numerical
divergence, 5 partial sweep failure. Results files depend only on
(config, seed); wall-clock timestamps live in manifests alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .engine import (
    BASELINE_KINDS,
    METHOD_NAMES,
    DivergenceError,
    ExperimentConfig,
    HarmonizePipeline,
    ResultTable,
    ToySpec,
    TrainingConfig,
    cell_federation,
    direction_records,
    method_config,
    method_label,
    method_mean,
    metric_direction,
    primary_metric_name,
    round_log_text,
    run_experiment,
    summarize_records,
)
from .harmonize import HarmonizeKind, amplified_difference, apply_mixstyle_input
from .model import ModelSpec
from .numerics import rng_derive
from .strategies import StrategyKind
from .synthdata import (
    FederationSpec,
    LoadError,
    ShiftProfile,
    load_federation,
    make_federation,
    persist_federation,
)

RUN_MANIFEST_SCHEMA = "fedtrade-run-v1"
SWEEP_MANIFEST_SCHEMA = "fedtrade-sweep-v1"
DATA_DIR_ENV = "FEDTRADE_DATA_DIR"


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


@contextmanager
def _field(path: str):
    """Re-raise validation ValueErrors with the config-field path prefixed."""
    try:
        yield
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _check_keys(d: dict, allowed, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(allowed))}")


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


# --------------------------------------------------------------------------
# Config -> dataclasses.

_FED_KEYS = ("delta_style", "delta_content", "k", "n_per_client", "h", "w", "n_classes")
_TOY_KEYS = ("anchors", "weights")
_MODEL_KEYS = ("arch", "hidden", "channels", "hook_tag")
_TRAIN_KEYS = ("rounds", "epochs", "lr", "batch_size")
_STRATEGY_KEYS = ("kind", "mu", "lam", "eta", "beta1", "beta2", "tau",
                  "head_epochs", "inner_steps", "inner_lr", "outer_lr", "post_epochs")
_HARMONIZE_KEYS = ("kind", "beta", "alpha", "layer_tag", "plugin_name", "reference_client")
_RUN_KEYS = ("task", "seed", "federation", "toy", "model", "method", "strategy",
             "baseline", "harmonize", "train", "allow_combined", "eval_global")
_SWEEP_KEYS = ("task", "seeds", "cells", "methods", "federation", "model", "train")


def build_federation(cfg: dict, task: str, seed: int, path: str = "federation"):
    if task == "toy":
        toy = cfg.get("toy", {})
        _check_keys(toy, _TOY_KEYS, "toy")
        with _field("toy"):
            return ToySpec(anchors=tuple(toy.get("anchors", ToySpec.anchors)),
                           weights=None if toy.get("weights") is None else tuple(toy["weights"]),
                           master_seed=seed)
    fed = cfg.get("federation", {})
    _check_keys(fed, _FED_KEYS, path)
    with _field(path):
        k = int(fed.get("k", 4))
        shift = ShiftProfile.from_deltas(fed.get("delta_style", 0.0),
                                         fed.get("delta_content", 0.0),
                                         k, int(fed.get("n_classes", 2)))
        kwargs = {}
        if "n_per_client" in fed:
            kwargs["n_per_client"] = tuple(int(n) for n in fed["n_per_client"])
        return FederationSpec(task=task, shift=shift, master_seed=seed,
                              h=int(fed.get("h", 32)), w=int(fed.get("w", 32)),
                              n_classes=int(fed.get("n_classes", 2)), **kwargs)


def build_model(cfg: dict, fed) -> ModelSpec | None:
    if fed.task == "toy":
        if "model" in cfg and cfg["model"]:
            raise ConfigError("model: the toy federation takes no model")
        return None
    m = cfg.get("model", {})
    _check_keys(m, _MODEL_KEYS, "model")
    default_arch = "tiny_convseg" if fed.task == "seg" else "mlp_bn"
    arch = m.get("arch", default_arch)
    with _field("model"):
        if fed.task == "seg":
            in_shape, out_dim = (fed.c, fed.h, fed.w), 1
        else:
            in_shape, out_dim = (fed.c * fed.h * fed.w,), fed.n_classes
        return ModelSpec(arch=arch, in_shape=in_shape, out_dim=out_dim,
                         hidden=tuple(m.get("hidden", (32, 16))),
                         channels=int(m.get("channels", 4)),
                         hook_tag=m.get("hook_tag"))


def build_train(cfg: dict) -> TrainingConfig:
    t = cfg.get("train", {})
    _check_keys(t, _TRAIN_KEYS, "train")
    with _field("train"):
        return TrainingConfig(rounds=int(t.get("rounds", 20)),
                              epochs=int(t.get("epochs", 1)),
                              lr=float(t.get("lr", 0.05)),
                              batch_size=int(t.get("batch_size", 32)))


def _build_strategy(s: dict) -> StrategyKind:
    _check_keys(s, _STRATEGY_KEYS, "strategy")
    if "kind" not in s:
        raise ConfigError("strategy: missing key 'kind'")
    with _field("strategy"):
        return StrategyKind(**s)


def _build_harmonize(h: dict) -> HarmonizeKind:
    _check_keys(h, _HARMONIZE_KEYS, "harmonize")
    with _field("harmonize"):
        return HarmonizeKind(**h)


def build_experiment(cfg: dict) -> ExperimentConfig:
    _check_keys(cfg, _RUN_KEYS, "config")
    task = cfg.get("task")
    if task not in ("seg", "cls", "toy"):
        raise ConfigError(f"task: must be one of seg, cls, toy; got {task!r}")
    with _field("seed"):
        seed = int(cfg.get("seed", 0))
    fed = build_federation(cfg, task, seed)
    model = build_model(cfg, fed)
    train = build_train(cfg)
    picked = [k for k in ("method", "strategy", "baseline") if cfg.get(k) is not None]
    if len(picked) != 1:
        raise ConfigError("config: set exactly one of method, strategy, baseline "
                          f"(got {picked or 'none'})")
    if "method" in picked:
        if cfg.get("harmonize") is not None:
            raise ConfigError("config: 'method' names a catalog entry; use explicit "
                              "strategy/baseline to combine with a harmonize block")
        name = cfg["method"]
        if name not in METHOD_NAMES:
            raise ConfigError(f"method: unknown method {name!r}; valid: {', '.join(sorted(METHOD_NAMES))}")
        with _field("config"):
            return method_config(name, fed, model, train)
    strategy = _build_strategy(cfg["strategy"]) if cfg.get("strategy") is not None else None
    baseline = cfg.get("baseline")
    harmonize = _build_harmonize(cfg["harmonize"]) if cfg.get("harmonize") is not None else HarmonizeKind()
    with _field("config"):
        return ExperimentConfig(federation=fed, train=train, model=model,
                                strategy=strategy, baseline=baseline, harmonize=harmonize,
                                allow_combined=bool(cfg.get("allow_combined", False)),
                                eval_global=bool(cfg.get("eval_global", False)))


# --------------------------------------------------------------------------
# Hashing, manifests, dataset discovery.

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: ExperimentConfig) -> str:
    return hashlib.sha256(_canonical(asdict(config)).encode()).hexdigest()


def federation_digest(fed: FederationSpec) -> str:
    return hashlib.sha256(_canonical(asdict(fed)).encode()).hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def data_root() -> Path | None:
    root = os.environ.get(DATA_DIR_ENV)
    return Path(root) if root else None


def resolve_datasets(fed) -> list | None:
    """Load the persisted federation when the data root has it; else None.

    With a data root configured but no matching dataset, the federation is
    generated and persisted there so later runs reuse identical bytes.
    """
    if fed.task == "toy":
        return None
    root = data_root()
    if root is None:
        return None
    target = root / f"fed-{federation_digest(fed)[:12]}"
    if target.exists():
        datasets, loaded_spec = load_federation(target)
        if asdict(loaded_spec) != asdict(fed):
            raise LoadError(f"dataset at {target} does not match the configured federation")
        return datasets
    datasets = make_federation(fed)
    persist_federation(datasets, fed, target)
    return datasets


def write_run_outputs(out_dir: Path, config: ExperimentConfig, table: ResultTable,
                      log: list[dict], extra_manifest: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(table.to_csv())
    (out_dir / "results.json").write_text(table.to_json())
    (out_dir / "rounds.jsonl").write_text(round_log_text(log))
    manifest = {
        "schema": RUN_MANIFEST_SCHEMA,
        "tool_version": __version__,
        "config_hash": config_digest(config),
        "method": method_label(config),
        "seeds": [config.master_seed],
        "created_utc": _utc_now(),
        "outputs": ["results.csv", "results.json", "rounds.jsonl"],
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Subcommands.

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    config = build_experiment(cfg)
    fed = config.federation
    if fed.task == "toy":
        raise ConfigError("task: the toy federation is analytic; there is nothing to generate")
    if args.out:
        out = Path(args.out)
    else:
        root = data_root() or Path.cwd()
        out = root / f"fed-{federation_digest(fed)[:12]}"
    datasets = make_federation(fed)
    persist_federation(datasets, fed, out)
    print(f"wrote federation ({fed.task}, {fed.k} clients) to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    config = build_experiment(cfg)
    datasets = resolve_datasets(config.federation)
    out = Path(args.out) if args.out else Path.cwd() / f"run-{config_digest(config)[:12]}"
    table, log = run_experiment(config, datasets, jobs=args.jobs)
    write_run_outputs(out, config, table, log)
    print(f"wrote {method_label(config)} results to {out}")
    return 0


def _sweep_plan(cfg: dict):
    _check_keys(cfg, _SWEEP_KEYS, "config")
    task = cfg.get("task")
    if task not in ("seg", "cls", "toy"):
        raise ConfigError(f"task: must be one of seg, cls, toy; got {task!r}")
    if task == "toy":
        raise ConfigError("task: sweeps compare methods on image federations, not the toy")
    cells_cfg = cfg.get("cells")
    if not cells_cfg:
        raise ConfigError("cells: the sweep grid must list at least one cell")
    cells = []
    for i, cell in enumerate(cells_cfg):
        _check_keys(cell, ("delta_style", "delta_content"), f"cells[{i}]")
        cells.append((float(cell.get("delta_style", 0.0)), float(cell.get("delta_content", 0.0))))
    methods = cfg.get("methods")
    if not methods:
        raise ConfigError("methods: the sweep must list at least one method")
    for m in methods:
        if m not in METHOD_NAMES:
            raise ConfigError(f"methods: unknown method {m!r}; valid: {', '.join(sorted(METHOD_NAMES))}")
    seeds = cfg.get("seeds", [0])
    if not seeds:
        raise ConfigError("seeds: need at least one seed")
    return task, cells, methods, [int(s) for s in seeds]


def _run_dir_name(method: str, ds: float, dc: float, seed: int, digest: str) -> str:
    return f"{method}_ds{ds:g}_dc{dc:g}_s{seed}_{digest[:8]}"


def _completed(run_dir: Path, digest: str) -> bool:
    manifest = run_dir / "manifest.json"
    if not manifest.exists():
        return False
    try:
        meta = json.loads(manifest.read_text())
    except json.JSONDecodeError:
        return False
    if meta.get("config_hash") != digest:
        return False
    return all((run_dir / name).exists() for name in ("results.csv", "results.json", "rounds.jsonl"))


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    task, cells, methods, seeds = _sweep_plan(cfg)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    metric = primary_metric_name(task)
    records, failures = [], []
    for ds, dc in cells:
        for seed in seeds:
            run_cfg = dict(cfg, federation=dict(cfg.get("federation", {}),
                                                delta_style=ds, delta_content=dc),
                           seed=seed)
            for bad in ("cells", "methods", "seeds"):
                run_cfg.pop(bad, None)
            fed = build_federation(run_cfg, task, seed)
            model = build_model(run_cfg, fed)
            train = build_train(run_cfg)
            datasets = None
            for name in methods:
                config = method_config(name, fed, model, train)
                digest = config_digest(config)
                run_dir = runs_dir / _run_dir_name(name, ds, dc, seed, digest)
                try:
                    if args.resume and _completed(run_dir, digest):
                        table = ResultTable.from_csv((run_dir / "results.csv").read_text())
                    else:
                        if datasets is None and task != "toy":
                            datasets = resolve_datasets(fed) or make_federation(fed)
                        table, log = run_experiment(config, datasets, jobs=args.jobs)
                        write_run_outputs(run_dir, config, table, log,
                                          {"delta_style": ds, "delta_content": dc, "seed": seed})
                    records.append({
                        "delta_style": ds, "delta_content": dc, "method": name,
                        "seed": seed, "metric": metric,
                        "mean": method_mean(table, name, metric),
                        "per_client": {c: table.value(name, c, metric)
                                       for c in table.client_labels(name)},
                    })
                except (DivergenceError, ValueError) as e:
                    failures.append({"delta_style": ds, "delta_content": dc,
                                     "method": name, "seed": seed, "error": str(e)})
    summary = summarize_records(records)
    lines = ["delta_style,delta_content,method,metric,mean,std,n_seeds"]
    lines += [f"{s['delta_style']!r},{s['delta_content']!r},{s['method']},{s['metric']},"
              f"{s['mean']!r},{s['std']!r},{s['n_seeds']}" for s in summary]
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    (out / "directions.json").write_text(
        json.dumps(direction_records(summary), indent=2, sort_keys=True) + "\n")
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    (out / "sweep_manifest.json").write_text(json.dumps({
        "schema": SWEEP_MANIFEST_SCHEMA,
        "tool_version": __version__,
        "task": task, "metric": metric,
        "cells": [{"delta_style": ds, "delta_content": dc} for ds, dc in cells],
        "methods": list(methods), "seeds": list(seeds),
        "n_failures": len(failures),
        "created_utc": _utc_now(),
    }, indent=2, sort_keys=True) + "\n")
    done = len(records)
    print(f"sweep finished: {done} runs ok, {len(failures)} failed; summary in {out}")
    return 5 if failures else 0


# --------------------------------------------------------------------------
# Reporting.

def _load_sweep(path: Path):
    manifest_path = path / "sweep_manifest.json"
    if not manifest_path.exists():
        raise LoadError(f"{path} has no sweep_manifest.json")
    manifest = json.loads(manifest_path.read_text())
    per_run = []
    for run_dir in sorted((path / "runs").iterdir() if (path / "runs").exists() else []):
        mpath = run_dir / "manifest.json"
        rpath = run_dir / "results.csv"
        if not (mpath.exists() and rpath.exists()):
            continue
        meta = json.loads(mpath.read_text())
        if "delta_style" not in meta:
            continue
        per_run.append((meta, ResultTable.from_csv(rpath.read_text())))
    return manifest, per_run


def _format_cell(value: float, best: bool, markdown: bool) -> str:
    text = f"{value:.4f}"
    if not best:
        return text
    return f"**{text}**" if markdown else f"{text}*"


def _render_table(headers: list[str], rows: list[list[str]], markdown: bool) -> str:
    if markdown:
        out = ["| " + " | ".join(headers) + " |",
               "|" + "|".join("---" for _ in headers) + "|"]
        out += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(out)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(headers), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


def _cell_tables(per_run, metric: str, markdown: bool) -> list[str]:
    """Per heterogeneity cell: method rows, client columns, best per column marked."""
    sign = metric_direction(metric)
    by_cell: dict[tuple, dict[str, dict[str, list[float]]]] = {}
    for meta, table in per_run:
        cell = (meta["delta_style"], meta["delta_content"])
        method = meta["method"]
        cells = by_cell.setdefault(cell, {}).setdefault(method, {})
        for label in table.client_labels(method):
            cells.setdefault(label, []).append(table.value(method, label, metric))
    chunks = []
    for cell in sorted(by_cell):
        methods = by_cell[cell]
        labels = sorted({c for m in methods.values() for c in m if c != "pooled"})
        mean = {m: {c: float(np.mean(v)) for c, v in cols.items()}
                for m, cols in methods.items()}
        local_methods = [m for m in sorted(methods) if any(c != "pooled" for c in methods[m])]
        best = {c: max(sign * mean[m][c] for m in local_methods if c in mean[m])
                for c in labels}
        rows = []
        for m in local_methods:
            row = [m]
            for c in labels:
                if c in mean[m]:
                    row.append(_format_cell(mean[m][c], sign * mean[m][c] == best[c], markdown))
                else:
                    row.append("-")
            rows.append(row)
        title = f"Cell delta_style={cell[0]:g}, delta_content={cell[1]:g} ({metric}, locally tested)"
        chunks.append((f"## {title}" if markdown else title) + "\n\n"
                      + _render_table(["method"] + [f"C{c}" for c in labels], rows, markdown))
        pooled = [m for m in sorted(methods) if "pooled" in methods[m]]
        if pooled:
            pbest = max(sign * mean[m]["pooled"] for m in pooled)
            rows = [[m, _format_cell(mean[m]["pooled"], sign * mean[m]["pooled"] == pbest, markdown)]
                    for m in pooled]
            sub = f"Cell delta_style={cell[0]:g}, delta_content={cell[1]:g} ({metric}, globally tested)"
            chunks.append((f"## {sub}" if markdown else sub) + "\n\n"
                          + _render_table(["method", "pooled"], rows, markdown))
    return chunks


def _summary_table(path: Path, markdown: bool) -> str:
    text = (path / "summary.csv").read_text().strip().splitlines()
    rows = [ln.split(",") for ln in text[1:]]
    fmt_rows = [[r[2], f"{float(r[0]):g}", f"{float(r[1]):g}",
                 f"{float(r[4]):.4f}", f"{float(r[5]):.4f}", r[6]] for r in rows]
    headers = ["method", "delta_style", "delta_content", "mean", "std", "seeds"]
    title = "Mean over clients, averaged over seeds"
    return (f"## {title}" if markdown else title) + "\n\n" + _render_table(headers, fmt_rows, markdown)


def write_pgm(path, image) -> None:
    """Binary 8-bit PGM; images arrive as (C, H, W) or (H, W) in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"need a single-channel image, got shape {arr.shape}")
    data = np.clip(arr, 0.0, 1.0)
    data = np.round(data * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def emit_panel(out_dir: Path, seed: int = 0) -> list[Path]:
    """Sample panel: one shifted image, each harmonization of it, amplified diffs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    fed = cell_federation("seg", 0.9, 0.0, seed, n_per_client=(12, 12, 12, 12))
    datasets = make_federation(fed)
    src = datasets[1]
    img = src.images[src.train_idx[0]]
    paths = [out_dir / "original.pgm"]
    write_pgm(paths[0], img)
    for kind in ("hist_sri", "hist_ari", "fda_sri", "adain"):
        pipeline = HarmonizePipeline(HarmonizeKind(kind=kind), datasets, seed, "seg")
        harmonized = pipeline.transform_static(src.client_id, img[None], "panel")[0]
        for suffix, image in ((f"{kind}.pgm", harmonized),
                              (f"{kind}_diff.pgm", amplified_difference(img, harmonized))):
            paths.append(out_dir / suffix)
            write_pgm(paths[-1], image)
    ref = datasets[0]
    peer = ref.images[ref.train_idx[0]]
    stream = rng_derive(seed, (src.client_id, 0, "panel"))
    mixed = apply_mixstyle_input(img, peer, 0.3, stream, lam=0.5)
    for suffix, image in (("mixstyle_input.pgm", mixed),
                          ("mixstyle_input_diff.pgm", amplified_difference(img, mixed))):
        paths.append(out_dir / suffix)
        write_pgm(paths[-1], image)
    return paths


def cmd_report(args) -> int:
    inputs = [Path(p) for p in args.summaries]
    out = Path(args.out) if args.out else inputs[0]
    out.mkdir(parents=True, exist_ok=True)
    md_parts, txt_parts = ["# Harmonization vs personalization report"], []
    for path in inputs:
        manifest, per_run = _load_sweep(path)
        metric = manifest["metric"]
        md_parts += _cell_tables(per_run, metric, markdown=True)
        txt_parts += _cell_tables(per_run, metric, markdown=False)
        md_parts.append(_summary_table(path, markdown=True))
        txt_parts.append(_summary_table(path, markdown=False))
    (out / "report.md").write_text("\n\n".join(md_parts) + "\n")
    (out / "report.txt").write_text("\n\n".join(txt_parts) + "\n")
    written = [out / "report.md", out / "report.txt"]
    if args.panel:
        written += emit_panel(out / "panel")
    print("wrote " + ", ".join(str(p) for p in written[:2])
          + (f" and {len(written) - 2} panel images" if args.panel else ""))
    return 0


# --------------------------------------------------------------------------
# Entry point.

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedtrade",
        description="Synthetic federation benchmark: data harmonization vs model personalization.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render and persist a federation dataset")
    gen.add_argument("--config", required=True, help="JSON experiment config")
    gen.add_argument("--out", help=f"dataset directory (default: ${DATA_DIR_ENV}/fed-<hash>)")
    gen.set_defaults(func=cmd_generate)

    run = sub.add_parser("run", help="run one experiment and write result files")
    run.add_argument("--config", required=True, help="JSON experiment config")
    run.add_argument("--out", help="output directory (default: ./run-<hash>)")
    run.add_argument("--jobs", type=int, default=1, help="client-update threads per round")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run a methods x cells x seeds grid")
    sweep.add_argument("--config", required=True, help="JSON sweep config")
    sweep.add_argument("--out", required=True, help="sweep output directory")
    sweep.add_argument("--seeds", help="comma-separated seed list overriding the config")
    sweep.add_argument("--jobs", type=int, default=1, help="client-update threads per round")
    sweep.add_argument("--resume", action="store_true",
                       help="skip runs whose outputs already match their config hash")
    sweep.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="render tables from sweep outputs")
    rep.add_argument("summaries", nargs="+", help="sweep output directories")
    rep.add_argument("--out", help="report directory (default: first input)")
    rep.add_argument("--panel", action="store_true",
                     help="also emit a harmonized-sample image panel (PGM)")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except LoadError as e:
        print(f"dataset error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
