"""Independent reference implementations used by the tests."""

from __future__ import annotations

import itertools

import numpy as np

# 50 molecules of at most 20 heavy atoms, mostly ring systems.
RING_CORPUS = [
    "C1CC1", "C1CCC1", "C1CCCC1", "C1CCCCC1", "c1ccccc1",
    "c1ccc2ccccc2c1", "c1ccc2cc3ccccc3cc2c1", "c1ccc2c(c1)ccc1ccccc12", "c1ccc(cc1)-c1ccccc1", "c1ccc2[nH]ccc2c1",
    "Cn1cnc2c1c(=O)n(C)c(=O)n2C", "O=c1[nH]c(=O)c2[nH]cnc2[nH]1", "Cn1cnc2c1c(=O)[nH]c(=O)n2C", "c1ccc2ncccc2c1", "C1CCC2(C1)CCCCC2",
    "C1CC2CCC1C2", "C1C2CC3CC1CC(C2)C3", "C12C3C4C1C5C2C3C45", "C1C2C1C2", "C1CCC2CCCCC2C1",
    "C1CCC2C(C1)CCC1C2CCC2CCCC21", "c1ccc2c(c1)Cc1ccccc12", "c1ccc2cccc2cc1", "c1cc2ccc3cccc4ccc(c1)c2c34", "c1ccc2c(c1)c1ccccc1c1ccccc21",
    "C1CCCCCCCCCCC1", "C1CCCCCCC1", "C1CCNCC1", "C1COCCN1", "C1COCCO1",
    "c1cncnc1", "c1c[nH]cn1", "c1cscn1", "c1ccoc1", "c1ccsc1",
    "c1ccc2occc2c1", "c1ccc2sccc2c1", "c1ccc2c(c1)[nH]c1ccccc12", "c1ccc2nc3ccccc3cc2c1", "c1ccc2c(c1)Nc1ccccc1S2",
    "CC1(C)C2CCC1(C)C(=O)C2", "C1CC12CC2", "C1CC2CCC1CC2", "CC(=O)Oc1ccccc1C(=O)O", "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "CN1CCCC1c1cccnc1", "O=c1ccc2ccccc2o1", "CC(C)C1CCC(C)CC1O", "C1CN2CCC1CC2", "c1ccccc1.C1CC1",
]  # fmt: skip


def simple_cycles(n: int, edges: list[tuple[int, int]]) -> list[tuple[frozenset[int], int]]:
    """Every simple cycle as (vertex set, edge bitmask), by exhaustive DFS.

    Each cycle is found from its smallest vertex, in both directions; the
    edge mask deduplicates them.
    """
    eid = {}
    adj = [[] for _ in range(n)]
    for k, (a, b) in enumerate(edges):
        eid[frozenset((a, b))] = k
        adj[a].append(b)
        adj[b].append(a)
    found: dict[int, frozenset[int]] = {}

    def dfs(start, v, path, mask):
        for w in adj[v]:
            e = eid[frozenset((v, w))]
            if mask >> e & 1:
                continue
            if w == start and len(path) >= 3:
                found[mask | 1 << e] = frozenset(path)
            elif w > start and w not in path:
                dfs(start, w, path + [w], mask | 1 << e)

    for s in range(n):
        dfs(s, s, [s], 0)
    return [(verts, mask) for mask, verts in found.items()]


def exhaustive_sssr(n: int, edges: list[tuple[int, int]]) -> list[frozenset[int]]:
    """Greedy minimum cycle basis over all simple cycles, GF(2) independence."""
    cycles = sorted(simple_cycles(n, edges), key=lambda c: (len(c[0]), sorted(c[0])))
    basis_rows: dict[int, int] = {}  # pivot bit -> reduced row
    out = []
    for verts, mask in cycles:
        r = mask
        while r:
            top = r.bit_length() - 1
            if top in basis_rows:
                r ^= basis_rows[top]
            else:
                basis_rows[top] = r
                out.append(verts)
                break
    return out


def cyclomatic(n: int, edges: list[tuple[int, int]]) -> int:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    comps = n
    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            comps -= 1
    return len(edges) - n + comps


def brute_auroc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g
