"""CSV ingestion and the per-(dataset, mode, k) featurization cache."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featurize import SCHEMA
from .funcgroups import EmptyMolecule
from .model import ModelConfig, MolRecord, prepare
from .smiles import MolGraph, SmilesError, parse_smiles

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_CLASS_VALUES = {"0": 0.0, "1": 1.0, "0.0": 0.0, "1.0": 1.0}


class DataError(ValueError):
    pass


class MissingColumn(DataError):
    pass


class NoValidRows(DataError):
    pass


@dataclass
class DatasetSpec:
    path: str
    smiles_column: str = "smiles"
    label_columns: list[str] | None = None  # None: every other numeric column
    task: str = "regression"
    name: str = ""


@dataclass
class Dataset:
    name: str
    task: str
    smiles: list[str]
    mols: list[MolGraph]
    labels: np.ndarray
    missing: np.ndarray
    label_columns: list[str]
    rows_in: int
    skipped: list[tuple[int, str]] = field(default_factory=list)
    content_hash: str = ""

    def __len__(self) -> int:
        return len(self.smiles)

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    @property
    def rows_skipped(self) -> int:
        return len(self.skipped)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _find_column(header: list[str], name: str) -> int:
    for i, h in enumerate(header):
        if h == name:
            return i
    lowered = [h.lower() for h in header]
    if name.lower() in lowered:
        return lowered.index(name.lower())
    raise MissingColumn(f"column {name!r} not in header {header}")


def load_csv(spec: DatasetSpec) -> Dataset:
    """Read a SMILES + labels CSV; bad rows are skipped and counted."""
    if spec.task not in ("classification", "regression"):
        raise DataError(f"task must be classification or regression, got {spec.task!r}")
    try:
        raw = Path(spec.path).read_bytes()
        text = raw.decode("utf-8-sig")
    except OSError as exc:
        raise DataError(f"cannot read {spec.path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{spec.path} is not UTF-8: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise NoValidRows(f"{spec.path} is empty")
    header, body = [h.strip() for h in rows[0]], [r for r in rows[1:] if any(c.strip() for c in r)]
    s_col = _find_column(header, spec.smiles_column)
    if spec.label_columns:
        l_cols = [_find_column(header, c) for c in spec.label_columns]
    else:
        # every other column whose non-empty cells are all numeric
        l_cols = [
            i for i in range(len(header))
            if i != s_col
            and any(i < len(r) and r[i].strip() for r in body)
            and all(_is_number(r[i].strip()) for r in body if i < len(r) and r[i].strip())
        ]  # fmt: skip
    if not l_cols:
        raise MissingColumn(f"{spec.path}: no label columns")

    smiles, mols, labels, missing, skipped = [], [], [], [], []
    for line_no, r in enumerate(body, start=2):
        if s_col >= len(r):
            skipped.append((line_no, "missing SMILES cell"))
            continue
        s = r[s_col].strip()
        try:
            g = parse_smiles(s)
        except (SmilesError, EmptyMolecule) as exc:
            skipped.append((line_no, f"{type(exc).__name__}: {exc}"))
            continue
        y, miss, bad = [], [], None
        for c in l_cols:
            cell = r[c].strip() if c < len(r) else ""
            if cell == "":
                y.append(0.0)
                miss.append(True)
                continue
            if spec.task == "classification":
                if cell not in _CLASS_VALUES:
                    bad = f"label {cell!r} is not 0/1"
                    break
                y.append(_CLASS_VALUES[cell])
            else:
                try:
                    v = float(cell)
                except ValueError:
                    bad = f"label {cell!r} is not a number"
                    break
                if not np.isfinite(v):
                    bad = f"label {cell!r} is not finite"
                    break
                y.append(v)
            miss.append(False)
        if bad:
            skipped.append((line_no, bad))
            continue
        smiles.append(s)
        mols.append(g)
        labels.append(y)
        missing.append(miss)
    if skipped:
        log.warning("%s: skipped %d of %d rows", spec.path, len(skipped), len(body))
        for line_no, why in skipped:
            log.info("  line %d: %s", line_no, why)
    if not smiles:
        raise NoValidRows(f"{spec.path}: no valid rows out of {len(body)}")
    return Dataset(
        name=spec.name or Path(spec.path).stem,
        task=spec.task,
        smiles=smiles,
        mols=mols,
        labels=np.asarray(labels, dtype=np.float64),
        missing=np.asarray(missing, dtype=bool),
        label_columns=[header[c] for c in l_cols],
        rows_in=len(body),
        skipped=skipped,
        content_hash=hashlib.sha256(raw).hexdigest(),
    )


# ---------------------------------------------------------------------------
# featurization cache
# ---------------------------------------------------------------------------


def default_cache_dir() -> Path:
    return Path(os.environ.get("MOLHYPER_CACHE_DIR", "cache"))


_ARRAYS = ("x", "bond_attr", "bonds", "mem_atom", "mem_he", "mem_seed")


def _pack(records: list[MolRecord]) -> dict[str, np.ndarray]:
    out = {}
    for name in _ARRAYS:
        parts = [getattr(r, name) for r in records]
        out[name] = np.concatenate(parts) if parts else np.zeros(0)
        out[name + "_len"] = np.array([len(p) for p in parts], dtype=np.int64)
    out["n_he"] = np.array([r.n_he for r in records], dtype=np.int64)
    out["schema_version"] = np.array([SCHEMA_VERSION])
    return out


def _unpack(arrs) -> list[MolRecord]:
    split = {}
    for name in _ARRAYS:
        ends = np.cumsum(arrs[name + "_len"])
        split[name] = np.split(arrs[name], ends[:-1]) if len(ends) else []
    recs = []
    for i, n_he in enumerate(arrs["n_he"]):
        recs.append(
            MolRecord(
                x=split["x"][i],
                bond_attr=split["bond_attr"][i].reshape(-1, SCHEMA.bond_dim),
                bonds=split["bonds"][i].reshape(-1, 2).astype(np.int64),
                mem_atom=split["mem_atom"][i].astype(np.int64),
                mem_he=split["mem_he"][i].astype(np.int64),
                mem_seed=split["mem_seed"][i].astype(bool),
                n_he=int(n_he),
            )
        )
    return recs


class FeatureCache:
    """Featurized records per (dataset hash, mode, k, cycles), in memory and on disk.

    ``builds`` counts how many times records were computed from molecules,
    so reuse is observable.
    """

    def __init__(self, root: str | Path | None = None, disk: bool = True) -> None:
        self.root = Path(root) if root is not None else default_cache_dir()
        self.disk = disk
        self.builds = 0
        self.disk_hits = 0
        self._mem: dict[tuple, list[MolRecord]] = {}

    def path_for(self, dataset: Dataset, cfg: ModelConfig) -> Path:
        tag = f"{cfg.hyperedge_mode}-{cfg.k}" + ("" if cfg.cycles else "-nocycles")
        return self.root / dataset.content_hash / f"{tag}.bin"

    def get(self, dataset: Dataset, cfg: ModelConfig) -> list[MolRecord]:
        key = (dataset.content_hash, cfg.hyperedge_mode, cfg.k, cfg.cycles, SCHEMA_VERSION)
        if key in self._mem:
            return self._mem[key]
        path = self.path_for(dataset, cfg)
        recs = None
        if self.disk and path.exists():
            try:
                with np.load(path) as arrs:
                    if int(arrs["schema_version"][0]) == SCHEMA_VERSION and len(arrs["n_he"]) == len(dataset):
                        recs = _unpack(arrs)
                        self.disk_hits += 1
            except (OSError, ValueError, KeyError) as exc:
                log.warning("ignoring unreadable cache file %s: %s", path, exc)
        if recs is None:
            recs = [prepare(g, cfg) for g in dataset.mols]
            self.builds += 1
            if self.disk:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                with open(tmp, "wb") as fh:
                    np.savez(fh, **_pack(recs))
                tmp.replace(path)
        self._mem[key] = recs
        return recs


def cache_build(dataset: Dataset, cfg: ModelConfig, cache: FeatureCache | None = None) -> list[MolRecord]:
    return (cache or FeatureCache(disk=False)).get(dataset, cfg)
