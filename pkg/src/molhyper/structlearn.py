"""Learned hyperedge membership via Gumbel-sigmoid sampling.

A stack of HyperMP layers encodes the graph and its extended hypergraph; an
MLP with sigmoid output scores every candidate (atom, hyperedge) pair; the
score is relaxed into a sample with logistic (difference-of-Gumbels) noise and
a temperature. Training uses the relaxed sample as a soft weight, evaluation
thresholds the noiseless score at 0.5.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .funcgroups import Hyperedge, Hypergraph
from .hypermp import MLP, GraphBatch, HyperMPParams, hypermp_layer
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


class DegenerateProb(ValueError):
    """Raised only when clamping is disabled and a probability hits 0 or 1."""


@dataclass
class MembershipSample:
    probs: np.ndarray
    soft: np.ndarray
    hard: np.ndarray
    temperature: float
    seed: int | None
    weights: Tensor  # per-pair weight column used downstream


def encode_membership(
    batch: GraphBatch, layers: list[HyperMPParams], dropout: float = 0.0, rng=None, training: bool = False
) -> tuple[Tensor, Tensor]:
    """Run the encoder stack; returns final node and hyperedge embeddings."""
    for p in layers:
        batch = hypermp_layer(batch, p, dropout, rng, training).batch
    return batch.x, batch.z


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return -np.log(-np.log(u))


def relaxed_bernoulli(probs: np.ndarray, temperature: float, noise0: np.ndarray, noise1: np.ndarray) -> np.ndarray:
    """sigmoid((logit(p) + noise0 - noise1) / temperature) on plain arrays."""
    p = np.clip(probs, PROB_EPS, 1 - PROB_EPS)
    z = (np.log(p) - np.log1p(-p) + noise0 - noise1) / temperature
    return T._stable_sigmoid(np.asarray(z, dtype=np.float64))


def temperature_at(epoch: int, n_epochs: int, start: float = 1.0, end: float = 0.1) -> float:
    """Linear annealing from ``start`` at epoch 0 to ``end`` at the last epoch."""
    if n_epochs <= 1:
        return end
    return start + (end - start) * epoch / (n_epochs - 1)


def score_and_sample(
    x_hat: Tensor,
    z_hat: Tensor,
    mem_atom: np.ndarray,
    mem_he: np.ndarray,
    g_theta: MLP,
    temperature: float,
    rng: np.random.Generator | None,
    training: bool,
    seed_mask: np.ndarray | None = None,
    seed_floor: bool = True,
    noiseless: bool = False,
    straight_through: bool = False,
    dropout: float = 0.0,
    clamp: bool = True,
    seed: int | None = None,
) -> MembershipSample:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = mem_atom.shape[0]
    pair = T.concat([T.row_gather(x_hat, mem_atom), T.row_gather(z_hat, mem_he)])
    probs = g_theta(pair, dropout, rng, training)  # (n, 1), sigmoid output
    p = probs.data[:, 0]
    if not clamp and np.any((p <= 0.0) | (p >= 1.0)):
        raise DegenerateProb("membership probability reached 0 or 1")
    n_clamped = int(np.sum((p < PROB_EPS) | (p > 1 - PROB_EPS)))
    if n_clamped:
        log.debug("clamped %d membership probabilities to [%g, %g]", n_clamped, PROB_EPS, 1 - PROB_EPS)
    seeds = np.zeros(n, dtype=bool) if seed_mask is None or not seed_floor else np.asarray(seed_mask, dtype=bool)
    keep_col = seeds[:, None].astype(np.float64)

    if training:
        if noiseless:
            e0 = e1 = np.zeros((n, 1))
        else:
            if rng is None:
                raise ValueError("training-mode sampling needs a random generator")
            e0, e1 = gumbel_noise(rng, (n, 1)), gumbel_noise(rng, (n, 1))
        pc = T.clip(probs, PROB_EPS, 1 - PROB_EPS)
        if noiseless and temperature == 1.0:
            # sigmoid(logit(p)) is the identity; skip the round trip so it is exact
            soft_t = pc
        else:
            logit = T.sub(T.log(pc), T.log(T.sub(1.0, pc)))
            soft_t = T.sigmoid(T.mul(T.add(logit, Tensor(e0 - e1)), 1.0 / temperature))
        soft = soft_t.data[:, 0].copy()
        hard = soft > 0.5
        if straight_through:
            # forward value is the hard mask, gradient is that of the soft sample
            w = T.add(soft_t, Tensor(hard[:, None].astype(np.float64) - soft_t.data))
        else:
            w = soft_t
        weights = T.where(keep_col > 0, Tensor(np.ones((n, 1))), w)
    else:
        soft = p.copy()
        hard = p > 0.5
        weights = Tensor(np.where(seeds | hard, 1.0, 0.0)[:, None])
    hard = hard | seeds
    return MembershipSample(p.copy(), soft, hard, temperature, seed, weights)


def membership_pairs(h: Hypergraph) -> list[tuple[int, int]]:
    """Canonical (atom, hyperedge) pair order: hyperedge order, then atom index."""
    return [(a, k) for k, e in enumerate(h.edges) for a in sorted(e.members)]


def adjust_hypergraph(h: Hypergraph, keep: np.ndarray, seed_floor: bool = True) -> Hypergraph:
    """Drop the members whose pair is not kept.

    ``keep`` is aligned with :func:`membership_pairs`. Seed members survive
    when ``seed_floor`` is set; without it a hyperedge that would become empty
    keeps its seed members instead.
    """
    pairs = membership_pairs(h)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape[0] != len(pairs):
        raise ValueError(f"keep mask has {keep.shape[0]} entries for {len(pairs)} membership pairs")
    kept: list[set[int]] = [set() for _ in h.edges]
    for (a, k), flag in zip(pairs, keep):
        if flag:
            kept[k].add(a)
    edges = []
    for k, e in enumerate(h.edges):
        members = kept[k] | set(e.seed_members) if seed_floor else kept[k]
        if not members:
            members = set(e.seed_members)
        edges.append(Hyperedge(frozenset(members), e.origin, e.seed_members))
    return Hypergraph(tuple(edges), h.molecule)
