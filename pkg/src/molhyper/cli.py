"""Command-line entry points.

Exit codes: 0 ok, 1 usage or SMILES error, 2 data/config/checkpoint error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, DatasetSpec, FeatureCache, load_csv
from .funcgroups import MODES, EmptyMolecule, build_hypergraph
from .model import CheckpointError, ConfigError, Model, ModelConfig, collate, forward, load_checkpoint, preset, prepare, save_checkpoint
from .smiles import SmilesError, dump, parse_smiles
from .structlearn import membership_pairs
from .train import NumericFailure, Normalizer, TrainConfig, dumps_metrics, evaluate, gradcheck, metric_name, train_loop, write_history

log = logging.getLogger("molhyper")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def load_config(path: str | None) -> tuple[ModelConfig, TrainConfig, dict]:
    """Read a run config.

    Keys: ``preset`` (dataset name), ``variant``, ``k``, ``model`` (field
    overrides), ``train`` (TrainConfig fields), ``data`` (``smiles_column``,
    ``label_columns``, ``name``).
    """
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(raw) - {"preset", "variant", "k", "model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    variant = raw.get("variant", "MolHMPN_NoMod")
    if "preset" in raw:
        mcfg = preset(raw["preset"], variant, raw.get("k", 1))
    else:
        mcfg = ModelConfig(variant=variant, k=raw.get("k", 0))
    overrides = raw.get("model", {})
    bad = set(overrides) - set(ModelConfig.__dataclass_fields__)
    if bad:
        raise ConfigError(f"unknown model config keys: {sorted(bad)}")
    mcfg = replace(mcfg, **overrides)
    mcfg.validate()
    try:
        tcfg = TrainConfig.from_dict(raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    data = raw.get("data", {})
    if "preset" in raw:
        data.setdefault("name", raw["preset"])
    return mcfg, tcfg, data


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_parse(args) -> int:
    inputs = [args.smiles] if args.smiles is not None else _read_lines(args.file)
    status = EXIT_OK
    for s in inputs:
        try:
            print(dump(parse_smiles(s)))
        except SmilesError as exc:
            print(f"error: {type(exc).__name__} at offset {exc.offset}: {exc.reason} [{s}]", file=sys.stderr)
            status = EXIT_USAGE
    return status


def _read_lines(path: str) -> list[str]:
    try:
        return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def cmd_hypergraph(args) -> int:
    if args.k < 0:
        raise UsageError("--k must be >= 0")
    g = parse_smiles(args.smiles)
    h = build_hypergraph(g, k=args.k, mode=args.mode, cycles=not args.no_cycles)
    if args.json:
        print(h.dumps())
    else:
        for e in h.edges:
            ext = sorted(e.members - e.seed_members)
            print(f"{e.origin}\t{sorted(e.members)}" + (f"\textended_by={ext}" if ext else ""))
    return EXIT_OK


def _dataset_for(data_path: str, mcfg: ModelConfig, data: dict):
    spec = DatasetSpec(
        path=data_path,
        smiles_column=data.get("smiles_column", "smiles"),
        label_columns=data.get("label_columns"),
        task=mcfg.task,
        name=data.get("name", ""),
    )
    ds = load_csv(spec)
    print(f"loaded {len(ds)} rows from {data_path} ({ds.rows_skipped} skipped, {ds.n_tasks} tasks)", file=sys.stderr)
    return spec, ds


def cmd_train(args) -> int:
    mcfg, tcfg, data = load_config(args.config)
    if args.seeds:
        try:
            tcfg.seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise UsageError(f"--seeds must be comma-separated integers: {args.seeds!r}") from exc
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    tcfg.validate()
    spec, ds = _dataset_for(args.data, mcfg, data)
    mcfg = replace(mcfg, n_tasks=ds.n_tasks)
    records = FeatureCache(args.cache_dir, disk=not args.no_cache).get(ds, mcfg)
    results, report = train_loop(records, ds.labels, ds.missing, mcfg, tcfg, ds.name)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.json")
    metrics_path.write_text(dumps_metrics(report) + "\n")
    saved_main = False
    for r in results:
        if r.history:
            write_history(out.with_name(f"{out.stem}.seed{r.seed}.history.csv"), r.history)
        if r.model is None:
            continue
        extra = {
            "dataset": ds.name, "smiles_column": spec.smiles_column, "label_columns": ds.label_columns,
            "normalizer": r.norm.to_dict(), "seed": r.seed, "train": tcfg.to_dict(),
        }  # fmt: skip
        save_checkpoint(out.with_name(f"{out.stem}.seed{r.seed}{out.suffix}"), r.model, extra)
        if not saved_main:
            save_checkpoint(out, r.model, extra)
            saved_main = True
    print(dumps_metrics(report))
    if not saved_main:
        print("error: every seed aborted with a numeric failure", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.ckpt)
    data = {"smiles_column": extra.get("smiles_column", "smiles"), "label_columns": extra.get("label_columns")}
    _, ds = _dataset_for(args.data, model.cfg, data)
    if ds.n_tasks != model.cfg.n_tasks:
        raise DataError(f"checkpoint predicts {model.cfg.n_tasks} tasks but data has {ds.n_tasks}")
    records = [prepare(g, model.cfg) for g in ds.mols]
    norm = Normalizer.from_dict(extra["normalizer"]) if "normalizer" in extra else None
    metric, per_task = evaluate(model, records, ds.labels, ds.missing, norm)
    report = {"metric_name": metric_name(model.cfg.task), "metric": metric, "per_task": per_task,
              "n_rows": len(ds), "rows_skipped": ds.rows_skipped, "variant": model.cfg.variant}  # fmt: skip
    print(dumps_metrics(report))
    return EXIT_OK


def inspect_molecule(model: Model, smiles: str, extra: dict | None = None) -> dict:
    """Prediction plus the adjusted hypergraph with per-member keep probabilities."""
    g = parse_smiles(smiles)
    rec = prepare(g, model.cfg)
    out = forward(model, collate([rec]), training=False)
    raw = out.pred.data[0]
    if model.cfg.task == "classification":
        pred = (1.0 / (1.0 + np.exp(-raw))).tolist()
    else:
        norm = Normalizer.from_dict(extra["normalizer"]) if extra and "normalizer" in extra else None
        pred = (norm.decode(raw) if norm else raw).tolist()
    h = rec.hypergraph
    probs = out.sample.probs if out.sample is not None else np.ones(len(rec.mem_atom))
    kept = out.sample.hard if out.sample is not None else np.ones(len(rec.mem_atom), dtype=bool)
    edges = [{"origin": e.origin, "seed": sorted(e.seed_members), "members": []} for e in h.edges]
    for n, (a, k) in enumerate(membership_pairs(h)):
        edges[k]["members"].append(
            {"atom": a, "keep_probability": float(probs[n]), "kept": bool(kept[n]), "seed": a in h.edges[k].seed_members}
        )
    for e in edges:
        e["adjusted"] = [m["atom"] for m in e["members"] if m["kept"]]
    return {"smiles": smiles, "task": model.cfg.task, "prediction": pred, "variant": model.cfg.variant,
            "k": model.cfg.k, "hypergraph": {"smiles": smiles, "edges": edges}}  # fmt: skip


def cmd_inspect(args) -> int:
    model, extra = load_checkpoint(args.ckpt)
    print(json.dumps(inspect_molecule(model, args.smiles, extra), sort_keys=True, indent=2))
    return EXIT_OK


GRADCHECK_POOL = (
    "CCO", "CC(=O)O", "c1ccccc1O", "CC(N)C(=O)O", "C1CCOC1", "CC#N", "OC(=O)c1ccccc1", "CCS(=O)(=O)N",
    "C=CC=O", "CN(C)C=O", "CCOC(=O)C", "Nc1ccncc1", "CC(C)Br", "O=[N+]([O-])c1ccccc1",
)  # fmt: skip


def run_gradcheck(mcfg: ModelConfig, seed: int, tol: float = 1e-4, max_coords: int | None = None):
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(GRADCHECK_POOL), 3, replace=False)
    mols = [parse_smiles(GRADCHECK_POOL[i]) for i in picks]
    model = Model.init(mcfg, seed=seed)
    labels = (rng.random((3, mcfg.n_tasks)) < 0.5).astype(float) if mcfg.task == "classification" else rng.normal(size=(3, mcfg.n_tasks))
    report = gradcheck(model, [prepare(g, mcfg) for g in mols], labels, seed=seed, max_coords=max_coords)
    return [GRADCHECK_POOL[i] for i in picks], report, all(r.rel_error < tol for r in report)


def cmd_gradcheck(args) -> int:
    if args.config:
        mcfg, _, _ = load_config(args.config)
    else:
        mcfg = ModelConfig(variant="MolHMPN_K", k=1, latent_dim=8, head_widths=[8])
    smiles, report, ok = run_gradcheck(mcfg, args.seed, args.tol, None if args.max_coords <= 0 else args.max_coords)
    print(f"molecules: {', '.join(smiles)}")
    for r in report:
        print(f"{'PASS' if r.rel_error < args.tol else 'FAIL'} {r.name} coords={r.n_checked} rel_err={r.rel_error:.3e}")
    print(f"{'PASS' if ok else 'FAIL'}: {len(report)} tensors, max rel_err {max(r.rel_error for r in report):.3e}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="molhyper", description="Functional-group hypergraph message passing for molecular properties.")
    p.add_argument("--version", action="version", version=f"molhyper {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("parse", help="parse SMILES and dump the molecular graph")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--smiles")
    src.add_argument("--file", help="one SMILES per line")
    sp.set_defaults(fn=cmd_parse)

    sp = sub.add_parser("hypergraph", help="build and dump a hypergraph")
    sp.add_argument("--smiles", required=True)
    sp.add_argument("--mode", choices=MODES, default="functional_group")
    sp.add_argument("--k", type=int, default=0)
    sp.add_argument("--no-cycles", action="store_true", help="omit ring hyperedges")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_hypergraph)

    sp = sub.add_parser("train", help="train over seeds; write checkpoint, metrics and history")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--seeds", help='comma-separated, e.g. "0,1,2,3,4"')
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--metrics", help="metrics JSON path (default: next to the checkpoint)")
    sp.add_argument("--cache-dir")
    sp.add_argument("--no-cache", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("inspect", help="prediction and adjusted hypergraph for one molecule")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--smiles", required=True)
    sp.set_defaults(fn=cmd_inspect)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--max-coords", type=int, default=0, help="sampled coordinates per tensor; 0 checks all")
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except SmilesError as exc:
        print(f"error: {type(exc).__name__} at offset {exc.offset}: {exc.reason}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, CheckpointError, EmptyMolecule, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
