"""Full network assembly: membership adjustment, prediction stack, readout and head.

Variants
--------
``MolHMPN_K``      extended hypergraph, learned membership, then prediction.
``MolHMPN_NoMod``  no extension and no membership learning.
``AtomGC_only``    bond-level stage only; hypergraph ignored.
``FuncGC_only``    hyperedge stage only, localized input is the plain mean of
                   member raw atom features; prediction from hyperedges only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .featurize import SCHEMA, atom_feature_matrix, bond_feature_matrix
from .funcgroups import MODES, Hypergraph, build_hypergraph
from .hypermp import MLP, GraphBatch, HyperMPParams, func_gc, hyperedge_pairs, hypermp_layer, member_mean
from .smiles import MolGraph
from .structlearn import MembershipSample, encode_membership, score_and_sample
from .tensor import Tensor

VARIANTS = ("MolHMPN_K", "MolHMPN_NoMod", "AtomGC_only", "FuncGC_only")
Z_INITS = ("ZERO", "MEAN")
TASK_KINDS = ("classification", "regression")

MAGIC = b"MHPN"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "MolHMPN_NoMod"
    k: int = 0
    hyperedge_mode: str = "functional_group"
    cycles: bool = True
    latent_dim: int = 128
    z_init: str = "MEAN"
    gnn_dropout: float = 0.0
    theta_dropout: float = 0.0
    regressor_dropout: float = 0.0
    head_widths: list[int] = field(default_factory=list)
    task: str = "classification"
    n_tasks: int = 1
    n_layers: int = 1
    n_theta_layers: int = 1
    seed_floor: bool = True
    straight_through: bool = False

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.hyperedge_mode not in MODES:
            raise ConfigError(f"unknown hyperedge_mode {self.hyperedge_mode!r}")
        if self.variant == "MolHMPN_K" and self.hyperedge_mode != "functional_group":
            raise ConfigError("MolHMPN_K requires hyperedge_mode functional_group")
        if self.variant != "MolHMPN_K" and self.hyperedge_mode == "functional_group" and self.k:
            raise ConfigError("extension radius k > 0 needs variant MolHMPN_K")
        if self.z_init not in Z_INITS:
            raise ConfigError(f"z_init must be one of {Z_INITS}")
        if self.task not in TASK_KINDS:
            raise ConfigError(f"task must be one of {TASK_KINDS}")
        if self.k < 0 or self.latent_dim < 1 or self.n_tasks < 1 or self.n_layers < 1 or self.n_theta_layers < 1:
            raise ConfigError("k must be >= 0; latent_dim, n_tasks and layer counts >= 1")
        for name in ("gnn_dropout", "theta_dropout", "regressor_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")

    @property
    def uses_atoms(self) -> bool:
        return self.variant != "FuncGC_only"

    @property
    def uses_hyperedges(self) -> bool:
        return self.variant != "AtomGC_only"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.head_widths = list(cfg.head_widths)
        cfg.validate()
        return cfg


# Per-dataset hyperparameter rows. "nomod" rows configure the variant without
# membership learning, "k" rows the variant with it. A missing MLP entry means
# a linear head.
_NOMOD_ROWS = {
    "tox21": ("ZERO", False, 0.2, 0.2, [64], 128),
    "clintox": ("ZERO", False, 0.3, 0.3, [64, 32], 128),
    "sider": ("MEAN", False, 0.0, 0.1, [64], 128),
    "bbbp": ("MEAN", False, 0.0, 0.0, [128], 256),
    "bace": ("MEAN", True, 0.2, 0.0, [64, 32], 128),
    "esol": ("MEAN", True, 0.0, 0.0, [128], 256),
    "freesolv": ("MEAN", False, 0.4, 0.4, [], 128),
    "lipophilicity": ("MEAN", False, 0.2, 0.2, [], 128),
}
_K_ROWS = {
    "tox21": ("ZERO", False, 0.2, 0.2, 0.2, [64], 128),
    "clintox": ("ZERO", False, 0.3, 0.3, 0.3, [128], 256),
    "sider": ("MEAN", False, 0.0, 0.0, 0.1, [64], 128),
    "bbbp": ("MEAN", False, 0.0, 0.0, 0.0, [128, 64], 256),
    "bace": ("MEAN", True, 0.0, 0.0, 0.0, [128], 256),
    "esol": ("MEAN", True, 0.0, 0.0, 0.0, [128], 256),
    "freesolv": ("MEAN", False, 0.4, 0.4, 0.4, [], 128),
    "lipophilicity": ("MEAN", False, 0.2, 0.2, 0.2, [], 128),
}
DATASET_TASKS = {
    "tox21": ("classification", 12),
    "clintox": ("classification", 2),
    "sider": ("classification", 27),
    "bbbp": ("classification", 1),
    "bace": ("classification", 1),
    "esol": ("regression", 1),
    "freesolv": ("regression", 1),
    "lipophilicity": ("regression", 1),
}


def preset(dataset: str, variant: str = "MolHMPN_NoMod", k: int = 1) -> ModelConfig:
    """Hyperparameters for a benchmark dataset."""
    key = dataset.lower()
    if key not in DATASET_TASKS:
        raise ConfigError(f"no preset for dataset {dataset!r}; known: {sorted(DATASET_TASKS)}")
    task, n_tasks = DATASET_TASKS[key]
    if variant == "MolHMPN_K":
        z, cyc, gnn, theta, regr, head, latent = _K_ROWS[key]
    else:
        z, cyc, gnn, regr, head, latent = _NOMOD_ROWS[key]
        theta, k = 0.0, 0
    cfg = ModelConfig(
        variant=variant, k=k, cycles=cyc, latent_dim=latent, z_init=z, gnn_dropout=gnn,
        theta_dropout=theta, regressor_dropout=regr, head_widths=list(head), task=task, n_tasks=n_tasks,
    )  # fmt: skip
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# per-molecule records and batching
# ---------------------------------------------------------------------------


@dataclass
class MolRecord:
    """Featurized molecule plus its hypergraph membership in flat arrays.

    Membership pairs follow :func:`structlearn.membership_pairs` order.
    """

    x: np.ndarray
    bond_attr: np.ndarray
    bonds: np.ndarray  # (n_bonds, 2)
    mem_atom: np.ndarray
    mem_he: np.ndarray
    mem_seed: np.ndarray
    n_he: int
    hypergraph: Hypergraph | None = None

    @property
    def n_atoms(self) -> int:
        return self.x.shape[0]


def prepare(g: MolGraph, cfg: ModelConfig) -> MolRecord:
    h = build_hypergraph(g, k=cfg.k, mode=cfg.hyperedge_mode, cycles=cfg.cycles)
    return record_from(g, h)


def record_from(g: MolGraph, h: Hypergraph) -> MolRecord:
    mem_atom, mem_he, mem_seed = [], [], []
    for k, e in enumerate(h.edges):
        for a in sorted(e.members):
            mem_atom.append(a)
            mem_he.append(k)
            mem_seed.append(a in e.seed_members)
    bonds = np.array([b.endpoints for b in g.bonds], dtype=np.int64).reshape(-1, 2)
    return MolRecord(
        x=atom_feature_matrix(g),
        bond_attr=bond_feature_matrix(g),
        bonds=bonds,
        mem_atom=np.array(mem_atom, dtype=np.int64),
        mem_he=np.array(mem_he, dtype=np.int64),
        mem_seed=np.array(mem_seed, dtype=bool),
        n_he=len(h.edges),
        hypergraph=h,
    )


def collate(records: list[MolRecord]) -> GraphBatch:
    """Stack records into one batch with offset indices; ``z`` is left empty."""
    xs, attrs, ei, ej, ma, mh, ms, amol, hmol = [], [], [], [], [], [], [], [], []
    a_off = h_off = 0
    for m, r in enumerate(records):
        xs.append(r.x)
        if r.bonds.size:
            # each bond becomes two directed rows
            ei += [r.bonds[:, 0] + a_off, r.bonds[:, 1] + a_off]
            ej += [r.bonds[:, 1] + a_off, r.bonds[:, 0] + a_off]
            attrs += [r.bond_attr, r.bond_attr]
        ma.append(r.mem_atom + a_off)
        mh.append(r.mem_he + h_off)
        ms.append(r.mem_seed)
        amol.append(np.full(r.n_atoms, m, dtype=np.int64))
        hmol.append(np.full(r.n_he, m, dtype=np.int64))
        a_off += r.n_atoms
        h_off += r.n_he

    def cat(parts, dtype, width=None):
        if parts:
            return np.concatenate(parts).astype(dtype)
        return np.zeros((0, width) if width else 0, dtype=dtype)

    he_mol = cat(hmol, np.int64)
    pair_k, pair_m = hyperedge_pairs(he_mol)
    batch = GraphBatch(
        x=Tensor(cat(xs, np.float64, SCHEMA.atom_dim)),
        edge_attr=Tensor(cat(attrs, np.float64, SCHEMA.bond_dim)),
        edge_i=cat(ei, np.int64),
        edge_j=cat(ej, np.int64),
        z=Tensor(np.zeros((h_off, 0))),
        mem_atom=cat(ma, np.int64),
        mem_he=cat(mh, np.int64),
        atom_mol=cat(amol, np.int64),
        he_mol=he_mol,
        n_mols=len(records),
        mem_seed=cat(ms, bool),
        pair_k=pair_k,
        pair_m=pair_m,
    )
    batch.validate()
    return batch


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class Readout:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, width: int, rng) -> "Readout":
        limit = np.sqrt(6.0 / (width + 1))
        return cls(Tensor(rng.uniform(-limit, limit, (width, 1)), requires_grad=True), Tensor(np.zeros(1), requires_grad=True))

    def __call__(self, h: Tensor, seg: np.ndarray, n: int) -> Tensor:
        gate = T.sigmoid(T.add(T.matmul(h, self.w), self.b))
        return T.concat([T.segment_sum(T.mul(gate, h), seg, n), T.segment_max(h, seg, n)])


@dataclass
class Model:
    cfg: ModelConfig
    G: list[HyperMPParams]
    F: list[HyperMPParams]
    g_theta: MLP | None
    z_proj: MLP | None
    readout_atom: Readout | None
    readout_he: Readout | None
    head: MLP

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        cfg.validate()
        rng = np.random.default_rng(seed)
        L = cfg.latent_dim
        d, de = SCHEMA.atom_dim, SCHEMA.bond_dim
        atom_part, func_part = cfg.uses_atoms, cfg.uses_hyperedges
        loc_width = d if cfg.variant == "FuncGC_only" else None

        def stack(n):
            out = []
            for i in range(n):
                node_w = d if i == 0 or not atom_part else L
                out.append(HyperMPParams.init(node_w, de, L, L, rng, atom_part, func_part, loc_width))
            return out

        G = stack(cfg.n_layers)
        F, g_theta = [], None
        if cfg.variant == "MolHMPN_K":
            F = [HyperMPParams.init(d if i == 0 else L, de, L, L, rng) for i in range(cfg.n_theta_layers)]
            g_theta = MLP.init([2 * L, L, 1], rng, sigmoid_out=True)
        z_proj = MLP.init([d, L], rng) if func_part and cfg.z_init == "MEAN" else None
        ro_atom = Readout.init(L, rng) if atom_part else None
        ro_he = Readout.init(L, rng) if func_part else None
        width = 2 * L * (int(atom_part) + int(func_part))
        head = MLP.init([width, *cfg.head_widths, cfg.n_tasks], rng)
        return cls(cfg, G, F, g_theta, z_proj, ro_atom, ro_he, head)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, p in enumerate(self.F):
            out += list(p.named(f"F.{i}"))
        if self.g_theta is not None:
            out += list(self.g_theta.named("g_theta"))
        if self.z_proj is not None:
            out += list(self.z_proj.named("z_proj"))
        for i, p in enumerate(self.G):
            out += list(p.named(f"G.{i}"))
        for name, ro in (("readout.atom", self.readout_atom), ("readout.he", self.readout_he)):
            if ro is not None:
                out += [(f"{name}.w", ro.w), (f"{name}.b", ro.b)]
        out += list(self.head.named("head"))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing, extra = set(named) - set(state), set(state) - set(named)
            raise CheckpointError(f"parameter mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, t in named.items():
            if t.data.shape != state[n].shape:
                raise CheckpointError(f"{n}: shape {state[n].shape} != expected {t.data.shape}")
            t.data = np.array(state[n], dtype=np.float64)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    pred: Tensor
    sample: MembershipSample | None
    alpha: Tensor | None
    beta: Tensor | None
    x_final: Tensor
    z_final: Tensor


def _init_z(model: Model, batch: GraphBatch) -> Tensor:
    L = model.cfg.latent_dim
    if model.cfg.z_init == "ZERO" or model.z_proj is None:
        return Tensor(np.zeros((batch.n_hyperedges, L)))
    return model.z_proj(member_mean(batch, batch.x))


def forward(
    model: Model,
    batch: GraphBatch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    keep_all: bool = False,
) -> ForwardOutput:
    """Run the network on a collated batch.

    ``keep_all`` replaces the sampled membership with all-ones weights, which
    turns the learned-membership variant into a plain pass over the extended
    hypergraph.
    """
    cfg = model.cfg
    sample = None
    if training and rng is None and (cfg.gnn_dropout or cfg.theta_dropout or cfg.regressor_dropout):
        raise ValueError("training with dropout needs a random generator")

    if cfg.variant == "MolHMPN_K" and not keep_all:
        enc = replace(batch, z=_init_z(model, batch), mem_weight=None)
        x_hat, z_hat = encode_membership(enc, model.F, cfg.theta_dropout, rng, training)
        sample = score_and_sample(
            x_hat, z_hat, batch.mem_atom, batch.mem_he, model.g_theta, temperature, rng, training,
            seed_mask=batch.mem_seed, seed_floor=cfg.seed_floor, straight_through=cfg.straight_through,
            dropout=cfg.theta_dropout,
        )  # fmt: skip
        batch = replace(batch, mem_weight=sample.weights)

    if cfg.uses_hyperedges:
        batch = replace(batch, z=_init_z(model, batch))

    alpha = beta = None
    for i, p in enumerate(model.G):
        if cfg.variant == "FuncGC_only":
            raw_mean = member_mean(batch, batch.x)
            z_new, beta = func_gc(batch, batch.x, p, cfg.gnn_dropout, rng, training, localized_input=raw_mean)
            batch = replace(batch, z=z_new)
        else:
            out = hypermp_layer(batch, p, cfg.gnn_dropout, rng, training)
            batch, alpha, beta = out.batch, out.alpha, out.beta if out.beta is not None else beta

    parts = []
    if model.readout_atom is not None:
        parts.append(model.readout_atom(batch.x, batch.atom_mol, batch.n_mols))
    if model.readout_he is not None:
        parts.append(model.readout_he(batch.z, batch.he_mol, batch.n_mols))
    pooled = parts[0] if len(parts) == 1 else T.concat(parts)
    pred = model.head(pooled, cfg.regressor_dropout, rng, training)
    return ForwardOutput(pred, sample, alpha, beta, batch.x, batch.z)


def predict(model: Model, mols: list[MolGraph]) -> np.ndarray:
    """Evaluation-mode predictions (logits or standardized values) for molecules."""
    batch = collate([prepare(g, model.cfg) for g in mols])
    return forward(model, batch, training=False).pred.data.copy()


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: Model, extra: dict | None = None) -> None:
    """Write ``MHPN`` | u32 version | u64 header length | JSON header | float64 LE blobs."""
    manifest, blobs, offset = [], [], 0
    for name, t in model.named_parameters():
        data = np.ascontiguousarray(t.data, dtype="<f8")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"config": model.cfg.to_dict(), "tensors": manifest, "extra": extra or {}}, sort_keys=True)
    hb = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    body = raw[16 + hlen :]
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 8 * n > len(body):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        state[entry["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=start).reshape(shape).astype(np.float64)
    model = Model.init(ModelConfig.from_dict(header["config"]))
    model.load_state(state)
    return model, header.get("extra", {})
