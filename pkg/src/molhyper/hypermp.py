"""Hyper-message-passing layer: bond-level AtomGC followed by hyperedge-level FuncGC."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class MLP:
    """Linear -> ReLU -> dropout -> ... -> Linear; optional sigmoid output."""

    weights: list[Tensor]
    biases: list[Tensor]
    sigmoid_out: bool = False

    @classmethod
    def init(cls, widths: list[int], rng: np.random.Generator, sigmoid_out: bool = False) -> "MLP":
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True))
            bs.append(Tensor(np.zeros(fan_out), requires_grad=True))
        return cls(ws, bs, sigmoid_out)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def __call__(self, x: Tensor, dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise T.ShapeMismatch(f"MLP expects width {self.in_dim}, got shape {x.shape}")
        h = x
        last = len(self.weights) - 1
        for n, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.add(T.matmul(h, w), b)
            if n < last:
                h = T.dropout(T.relu(h), dropout, rng, training)
        return T.sigmoid(h) if self.sigmoid_out else h

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for n, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.{n}.W", w
            yield f"{prefix}.{n}.b", b


def mlp(in_dim: int, out_dim: int, hidden: int, rng, sigmoid_out: bool = False) -> MLP:
    return MLP.init([in_dim, hidden, out_dim], rng, sigmoid_out)


_ATOM_PARTS = ("f_bond", "f_attn", "f_atom")
_FUNC_PARTS = ("g_atom_to_fg", "g_edge", "g_attn", "g_fg")


@dataclass
class HyperMPParams:
    latent_dim: int
    f_bond: MLP | None = None
    f_attn: MLP | None = None
    f_atom: MLP | None = None
    g_atom_to_fg: MLP | None = None
    g_edge: MLP | None = None
    g_attn: MLP | None = None
    g_fg: MLP | None = None

    @classmethod
    def init(
        cls,
        node_width: int,
        edge_width: int,
        hyperedge_width: int,
        latent_dim: int,
        rng: np.random.Generator,
        atom_part: bool = True,
        func_part: bool = True,
        localized_input_width: int | None = None,
    ) -> "HyperMPParams":
        L = latent_dim
        p = cls(latent_dim=L)
        if atom_part:
            pair = 2 * node_width + edge_width
            p.f_bond = mlp(pair, L, L, rng)
            p.f_attn = mlp(pair, 1, L, rng, sigmoid_out=True)
            p.f_atom = mlp(node_width + L, L, L, rng)
        if func_part:
            loc_in = L if localized_input_width is None else localized_input_width
            p.g_atom_to_fg = mlp(hyperedge_width + loc_in, L, L, rng)
            p.g_edge = mlp(2 * L, L, L, rng)
            p.g_attn = mlp(2 * L, 1, L, rng, sigmoid_out=True)
            p.g_fg = mlp(hyperedge_width + L, L, L, rng)
        return p

    @property
    def has_atom_part(self) -> bool:
        return self.f_bond is not None

    @property
    def has_func_part(self) -> bool:
        return self.g_fg is not None

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for part in _ATOM_PARTS + _FUNC_PARTS:
            m = getattr(self, part)
            if m is not None:
                yield from m.named(f"{prefix}.{part}")


@dataclass
class GraphBatch:
    """A batch of molecules with their hypergraphs, flattened with offsets.

    Bonds are stored as two directed rows; ``edge_i`` is the receiving atom and
    ``edge_j`` its neighbour. Membership pairs link atoms to hyperedges and may
    carry a weight column (all ones when absent). ``pair_k``/``pair_m`` list the
    ordered hyperedge pairs inside each molecule, ``k != m``.
    """

    x: Tensor
    edge_attr: Tensor
    edge_i: np.ndarray
    edge_j: np.ndarray
    z: Tensor
    mem_atom: np.ndarray
    mem_he: np.ndarray
    atom_mol: np.ndarray
    he_mol: np.ndarray
    n_mols: int
    mem_seed: np.ndarray | None = None
    mem_weight: Tensor | None = None
    pair_k: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pair_m: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_atoms(self) -> int:
        return self.x.shape[0]

    @property
    def n_hyperedges(self) -> int:
        return self.z.shape[0]

    def validate(self) -> None:
        n, h = self.n_atoms, self.n_hyperedges
        for name, arr, bound in (
            ("edge_i", self.edge_i, n),
            ("edge_j", self.edge_j, n),
            ("mem_atom", self.mem_atom, n),
            ("mem_he", self.mem_he, h),
            ("pair_k", self.pair_k, h),
            ("pair_m", self.pair_m, h),
        ):
            if arr.size and (arr.min() < 0 or arr.max() >= bound):
                raise T.ShapeMismatch(f"{name} references an index outside [0, {bound})")
        if self.atom_mol.shape[0] != n or self.he_mol.shape[0] != h:
            raise T.ShapeMismatch("segment ids must cover every atom and hyperedge")
        if self.pair_k.size and np.any(self.he_mol[self.pair_k] != self.he_mol[self.pair_m]):
            raise T.ShapeMismatch("hyperedge pairs must stay inside one molecule")


def hyperedge_pairs(he_mol: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All ordered (k, m), k != m, with both hyperedges in the same molecule."""
    ks, ms = [], []
    if he_mol.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    boundaries = np.flatnonzero(np.diff(he_mol)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [he_mol.size]])
    for s, e in zip(starts, ends):
        idx = np.arange(s, e)
        kk, mm = np.meshgrid(idx, idx, indexing="ij")
        off = kk != mm
        ks.append(kk[off])
        ms.append(mm[off])
    return np.concatenate(ks).astype(np.int64), np.concatenate(ms).astype(np.int64)


def membership_weights(batch: GraphBatch) -> Tensor:
    if batch.mem_weight is not None:
        return batch.mem_weight
    return Tensor(np.ones((batch.mem_atom.shape[0], 1)))


def atom_gc(
    batch: GraphBatch, p: HyperMPParams, dropout: float = 0.0, rng=None, training: bool = False
) -> tuple[Tensor, Tensor, Tensor]:
    """Bond update, sigmoid-gated neighbour sum, node update.

    Returns ``(x_new, edge_new, alpha)``; ``alpha`` has one entry per directed
    bond and is not normalized over neighbours.
    """
    x = batch.x
    pair = T.concat([T.row_gather(x, batch.edge_i), T.row_gather(x, batch.edge_j), batch.edge_attr])
    edge_new = p.f_bond(pair, dropout, rng, training)
    alpha = p.f_attn(pair, dropout, rng, training)
    agg = T.segment_sum(T.mul(alpha, edge_new), batch.edge_i, batch.n_atoms)
    x_new = p.f_atom(T.concat([x, agg]), dropout, rng, training)
    return x_new, edge_new, alpha


def localize(batch: GraphBatch, x: Tensor) -> Tensor:
    """Weighted sum of member atom rows per hyperedge."""
    w = membership_weights(batch)
    return T.segment_sum(T.mul(T.row_gather(x, batch.mem_atom), w), batch.mem_he, batch.n_hyperedges)


def member_mean(batch: GraphBatch, x: Tensor, eps: float = 1e-12) -> Tensor:
    w = membership_weights(batch)
    total = localize(batch, x)
    count = T.segment_sum(w, batch.mem_he, batch.n_hyperedges)
    return T.div(total, T.add(count, eps))


def func_gc(
    batch: GraphBatch,
    x_new: Tensor,
    p: HyperMPParams,
    dropout: float = 0.0,
    rng=None,
    training: bool = False,
    localized_input: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Localize hyperedges, learn pairwise hyperedge messages, update hyperedges.

    Atom rows are read but never written. Returns ``(z_new, beta)`` where
    ``beta`` is aligned with ``batch.pair_k``/``batch.pair_m``.
    """
    z = batch.z
    local = localize(batch, x_new) if localized_input is None else localized_input
    z_loc = p.g_atom_to_fg(T.concat([z, local]), dropout, rng, training)
    if batch.pair_k.size:
        pair = T.concat([T.row_gather(z_loc, batch.pair_k), T.row_gather(z_loc, batch.pair_m)])
        z_edge = p.g_edge(pair, dropout, rng, training)
        beta = p.g_attn(pair, dropout, rng, training)
        agg = T.segment_sum(T.mul(beta, z_edge), batch.pair_k, batch.n_hyperedges)
    else:
        beta = Tensor(np.zeros((0, 1)))
        agg = Tensor(np.zeros((batch.n_hyperedges, p.latent_dim)))
    z_new = p.g_fg(T.concat([z, agg]), dropout, rng, training)
    return z_new, beta


@dataclass
class LayerOutput:
    batch: GraphBatch
    alpha: Tensor | None
    beta: Tensor | None


def hypermp_layer(
    batch: GraphBatch, p: HyperMPParams, dropout: float = 0.0, rng=None, training: bool = False
) -> LayerOutput:
    """AtomGC then FuncGC; either half may be absent from ``p``."""
    alpha = beta = None
    x_new, e_new = batch.x, batch.edge_attr
    if p.has_atom_part:
        x_new, e_new, alpha = atom_gc(batch, p, dropout, rng, training)
    z_new = batch.z
    if p.has_func_part:
        z_new, beta = func_gc(batch, x_new, p, dropout, rng, training)
    return LayerOutput(replace(batch, x=x_new, edge_attr=e_new, z=z_new), alpha, beta)
