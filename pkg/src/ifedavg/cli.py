"""Command-line driver.

Subcommands: ``train``, ``report``, ``synthetic``, ``summarize``.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import artifacts
from .data import (
    DataError,
    RawTable,
    ShiftSpec,
    SyntheticConfig,
    load_csv,
    load_schema,
    load_shift_spec,
    prepare_clients,
    synthetic_table,
)
from .federation import ALGORITHMS, FOUT_MODES, DEFAULT_SEEDS, ConfigError, ExperimentConfig, run_experiment
from .interpret import (
    LAYERS,
    average_heatmaps,
    build_heatmap,
    detect_target_flip,
    flag_cells,
    render_report,
    significance,
)
from .metrics import read_scores, summarize, write_scores, write_summary

log = logging.getLogger("ifedavg")

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


# -- argument types ----------------------------------------------------------

def _algorithms(text: str) -> List[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in ALGORITHMS]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"invalid algorithm {','.join(bad) or text!r} (choose from {', '.join(ALGORITHMS)})")
    return names


def _seeds(text: str) -> List[int]:
    try:
        seeds = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _layers(text: str) -> List[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in LAYERS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown layer(s) {bad} (choose from {', '.join(LAYERS)})")
    return names


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# -- config files ----------------------------------------------------------

_CONFIG_KEYS = {
    "algorithm": str, "rounds": int, "lr": float, "momentum": float, "alpha": float,
    "batch_size": int, "seeds": lambda s: tuple(_seeds(s)), "fout": str, "fin": _bool,
    "standardize": str, "shift_spec": str, "reset_momentum": _bool, "eval_every": int,
    "dataset": str, "init": str,
}


def load_config_file(path: str) -> Dict[str, object]:
    """``key = value`` lines; keys are :class:`ExperimentConfig` fields (dashes allowed)."""
    out: Dict[str, object] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _CONFIG_KEYS[key](value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def config_hash(cfg: ExperimentConfig, extra: Optional[Dict[str, object]] = None) -> str:
    payload = dict(cfg.as_dict(), **(extra or {}))
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _write_json(path: Path, obj) -> None:
    from .interpret import atomic_write

    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fingerprint(table: RawTable) -> Dict[str, object]:
    return {
        "rows": int(len(table.target)),
        "columns": len(table.columns),
        "classes": table.n_classes,
        "clients": {c: int((table.clients == c).sum()) for c in table.client_labels()},
    }


def _mean_line(seed: int, algorithm: str, scores) -> str:
    f1 = np.nanmean([s.f1 for s in scores])
    auc = np.nanmean([s.roc_auc for s in scores])
    bacc = np.nanmean([s.balanced_acc for s in scores])
    return f"{seed} {algorithm}: f1={f1:.4f} roc_auc={auc:.4f} balanced_acc={bacc:.4f}"


# -- train -------------------------------------------------------------------

def _base_config(args) -> Dict[str, object]:
    fields = load_config_file(args.config) if args.config else {}
    overrides = {
        "rounds": args.rounds, "lr": args.lr, "momentum": args.momentum, "alpha": args.alpha,
        "batch_size": args.batch_size, "fout": args.fout, "standardize": args.standardize,
        "shift_spec": args.inject,
    }
    if args.seeds is not None:
        overrides["seeds"] = tuple(args.seeds)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return fields


def cmd_train(args) -> int:
    fields = _base_config(args)
    algorithms = args.algorithm or [fields.pop("algorithm", "ifedavg")]
    fields.pop("algorithm", None)
    if args.dataset is None:
        raise UsageError("--dataset is required")
    fields.setdefault("dataset", Path(args.dataset).stem)
    configs = [ExperimentConfig(algorithm=a, **fields) for a in algorithms]
    for cfg in configs:
        cfg.validate()
    spec = load_shift_spec(configs[0].shift_spec) if configs[0].shift_spec else ShiftSpec()

    timings: Dict[str, float] = {}
    t0 = time.perf_counter()
    schema = load_schema(args.schema) if args.schema else None
    table = load_csv(args.dataset, schema)
    clients = prepare_clients(table, configs[0].standardize, spec)
    timings["load"] = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_scores, paths = [], []
    for cfg in configs:
        t0 = time.perf_counter()
        art = run_experiment(cfg, clients)
        timings[f"train:{cfg.algorithm}"] = time.perf_counter() - t0
        paths += [str(p) for p in artifacts.write_artifacts(art, out, clients[0].features)]
        for run in art.runs:
            print(_mean_line(run.seed, cfg.algorithm, run.scores))
        all_scores += art.scores

    write_scores(all_scores, out / "metrics.csv")
    write_summary(summarize(all_scores), out / "summary.csv")
    _write_json(out / "manifest.json", {
        "config_hash": config_hash(configs[0], {"algorithms": algorithms, "dataset_path": str(args.dataset)}),
        "configs": [c.as_dict() for c in configs],
        "seeds": list(configs[0].seeds),
        "dataset": _fingerprint(table),
        "artifacts": paths + [str(out / "metrics.csv"), str(out / "summary.csv")],
        "wall_clock_seconds": timings,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })
    return 0


# -- report ------------------------------------------------------------------

def cmd_report(args) -> int:
    runs = [Path(r) for r in args.run]
    for run in runs:
        if not run.is_dir():
            raise UsageError(f"run directory {run} does not exist")
        if not artifacts.has_personal(run):
            print(f"error: no personal layers in run {run} (only iFedAvg runs have them)", file=sys.stderr)
            return EXIT_RUNTIME
    trained = artifacts.trained_layers(runs[0])
    layers = args.layer or trained or ["b_in", "w_in"]
    if args.out:
        out = Path(args.out)
    elif len(runs) == 1:
        out = runs[0] / "report"
    else:
        raise UsageError("--out is required when averaging several runs")

    def layer_map(layer):
        # several runs: significance on the seed-averaged layer
        return average_heatmaps([artifacts.read_personal(r, layer) for r in runs])

    for layer in layers:
        hm = layer_map(layer)
        flags = significance(hm, args.threshold)
        render_report(hm, flags, out)
        for i, j in flags.flagged_cells():
            print(f"{layer} {hm.columns[j]}/client{hm.clients[i]}: O ({layer} = {hm.values[i, j]:.4f})")
        for j in np.flatnonzero(flags.columns):
            print(f"{layer} {hm.columns[j]}: x (cross-client SD {hm.values[:, j].std():.4f})")
    if args.detect_flip:
        hm = layer_map("w_out")
        verdicts = detect_target_flip(hm, trained="w_out" in trained)
        for v in verdicts:
            comps = ", ".join(f"{hm.columns[k]}={x:.4f}" for k, x in zip(v.components, v.values))
            print(f"client{v.client}: FLIP SUSPECTED (w_out < 0) {comps}")
        if not verdicts:
            print("no target flip suspected")
    return 0


# -- synthetic ---------------------------------------------------------------

_LAYER_FOR = {"add_bias": "b_in", "scale": "w_in", "mask_conditional": "w_in"}


def cmd_synthetic(args) -> int:
    spec = ShiftSpec()
    for item in args.inject or []:
        spec.mutations += load_shift_spec(item).mutations
    fout = args.fout
    if fout is None:
        fout = "scalar-weight" if any(m.kind == "flip_target" for m in spec.mutations) else "none"
    syn = SyntheticConfig(args.clients, args.samples, args.features)
    cfg = ExperimentConfig(
        algorithm="ifedavg", rounds=args.rounds if args.rounds is not None else 200,
        lr=args.lr if args.lr is not None else 0.002,
        momentum=args.momentum if args.momentum is not None else 0.5,
        batch_size=args.batch_size if args.batch_size is not None else 32,
        seeds=tuple(args.seeds or DEFAULT_SEEDS), fout=fout,
        standardize=args.standardize or "per-client", dataset="synthetic",
    )
    cfg.validate()
    trains_w_out = fout in ("weight", "both", "scalar-weight")
    for seed in cfg.seeds:
        clients = prepare_clients(synthetic_table(syn, seed), cfg.standardize, spec)
        art = run_experiment(replace(cfg, seeds=(seed,)), clients)
        run = art.runs[0]
        if args.out:
            artifacts.write_artifacts(art, args.out, clients[0].features)
        print(f"seed {seed}")
        for line in synthetic_verdicts(run.personal, clients[0].features, spec, args.threshold, trains_w_out):
            print(line)
    return 0


def synthetic_verdicts(personal, features: Sequence[str], spec: ShiftSpec,
                       threshold: float = 2.0, trains_w_out: bool = False) -> List[str]:
    """One verdict line per injected mutation (or the flagged cells when nothing was injected)."""
    heatmaps = {l: build_heatmap(personal, l, features) for l in ("b_in", "w_in")}
    cells = {l: flag_cells(hm, threshold) for l, hm in heatmaps.items()}
    lines = []
    if not spec.mutations:
        for layer, hm in heatmaps.items():
            for i, j in np.argwhere(cells[layer]):
                lines.append(f"{hm.columns[j]}/client{hm.clients[i]}: FLAGGED ({layer} = {hm.values[i, j]:.4f})")
        return lines or ["no significant cells"]
    for m in spec.mutations:
        if m.kind == "flip_target":
            if not trains_w_out:
                lines.append(f"client{m.client}: w_out not trained; rerun with --fout scalar-weight")
                continue
            hm = build_heatmap(personal, "w_out")
            suspects = {v.client: v for v in detect_target_flip(hm)}
            row = hm.values[hm.clients.index(m.client)]
            if m.client in suspects:
                lines.append(f"client{m.client}: FLIP SUSPECTED (w_out < 0) w_out = {row.min():.4f}")
            else:
                lines.append(f"client{m.client}: no flip detected (w_out = {row.min():.4f})")
            for other in sorted(set(suspects) - {m.client}):
                lines.append(f"client{other}: FLIP SUSPECTED (w_out < 0) [not injected]")
            continue
        layer = _LAYER_FOR[m.kind]
        hm = heatmaps[layer]
        i = hm.clients.index(m.client)
        j = hm.columns.index(m.feature) if m.feature in hm.columns else int(m.feature)
        verdict = "FLAGGED" if cells[layer][i, j] else "NOT FLAGGED"
        lines.append(f"{hm.columns[j]}/client{m.client}: {verdict} ({layer} = {hm.values[i, j]:.4f})")
    return lines


# -- summarize ---------------------------------------------------------------

def cmd_summarize(args) -> int:
    scores = []
    for path in args.metrics:
        scores += read_scores(path)
    rows = summarize(scores, args.order)
    if args.out:
        write_summary(rows, args.out)
    for r in rows:
        print(f"{r.dataset} {r.algorithm} {r.metric}: mean={r.mean:.4f} worst={r.worst:.4f} seed_sd={r.seed_sd:.4f}")
    return 0


# -- parser ------------------------------------------------------------------

def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rounds", type=int)
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--batch-size", type=int, dest="batch_size", help="0 = full batch")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--fout", choices=FOUT_MODES)
    p.add_argument("--standardize", choices=("per-client", "global"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifedavg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run algorithms x seeds on a CSV dataset")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--schema")
    p.add_argument("--algorithm", type=_algorithms, help="comma-separated: " + ",".join(ALGORITHMS))
    p.add_argument("--alpha", type=float)
    p.add_argument("--inject", help="shift spec, or @file")
    p.add_argument("--out", default="out")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="heatmaps and significance flags for an iFedAvg run")
    p.add_argument("--run", required=True, nargs="+",
                   help="directory <out>/<seed>/ifedavg; several directories are averaged (seed-averaged mode)")
    p.add_argument("--layer", type=_layers)
    p.add_argument("--detect-flip", action="store_true")
    p.add_argument("--threshold", type=float, default=2.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synthetic", help="inject shifts into a synthetic federation and check detection")
    p.add_argument("--inject", action="append", help="shift spec or @file; repeatable")
    p.add_argument("--clients", type=int, default=8)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--features", type=int, default=10)
    p.add_argument("--threshold", type=float, default=2.0)
    p.add_argument("--out")
    _add_training_flags(p)
    p.set_defaults(func=cmd_synthetic)

    p = sub.add_parser("summarize", help="client mean / worst client / seed SD from metrics CSVs")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--order", choices=("seed-first", "client-first"), default="seed-first",
                   help="average clients over seeds before (default) or after the client mean")
    p.add_argument("--out")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: config: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        msg = " ".join(str(exc).split())
        print(f"error: runtime: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
