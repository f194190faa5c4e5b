from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molhyper import tensor as T
from molhyper.featurize import SCHEMA
from molhyper.funcgroups import build_hypergraph
from molhyper.hypermp import MLP, HyperMPParams, hypermp_layer
from molhyper.model import ModelConfig, collate, prepare
from molhyper.smiles import parse_smiles
from molhyper.structlearn import (
    DegenerateProb,
    adjust_hypergraph,
    encode_membership,
    membership_pairs,
    relaxed_bernoulli,
    score_and_sample,
    temperature_at,
)
from molhyper.tensor import Tensor

ASPIRIN = "CC(=O)Oc1ccccc1C(=O)O"
L = 6


def constant_scorer(m: float, width: int = 2 * L) -> MLP:
    """g_theta whose output is m for every input."""
    g = MLP.init([width, L, 1], np.random.default_rng(0), sigmoid_out=True)
    for w in g.weights:
        w.data[:] = 0.0
    g.biases[-1].data[:] = np.log(m) - np.log1p(-m)
    return g


def pairs(n):
    x = Tensor(np.zeros((n, L)))
    z = Tensor(np.zeros((1, L)))
    return x, z, np.arange(n), np.zeros(n, dtype=np.int64)


@pytest.mark.parametrize("m", [0.1, 0.3, 0.5, 0.9])
def test_thresholded_samples_are_bernoulli(m):
    n = 100_000
    x, z, ma, mh = pairs(n)
    s = score_and_sample(x, z, ma, mh, constant_scorer(m), 1.0, np.random.default_rng(int(m * 100)), training=True)
    freq = s.hard.mean()
    sigma = np.sqrt(m * (1 - m) / n)
    assert abs(freq - m) < 3 * sigma


def test_noiseless_unit_temperature_is_identity():
    x, z, ma, mh = pairs(5)
    g = MLP.init([2 * L, L, 1], np.random.default_rng(4), sigmoid_out=True)
    xr = Tensor(np.random.default_rng(5).normal(size=(5, L)))
    s = score_and_sample(xr, z, ma, mh, g, 1.0, None, training=True, noiseless=True)
    assert (s.soft == s.probs).all()


def test_low_temperature_saturates_outside_the_noise_band():
    # sigmoid(z / s) is within 1e-6 of {0, 1} exactly when |z| >= s * log((1 - 1e-6) / 1e-6)
    s = 1e-4
    band = s * np.log((1 - 1e-6) / 1e-6)
    rng = np.random.default_rng(0)
    m = rng.uniform(0.01, 0.99, 10_000)
    e0, e1 = -np.log(-np.log(rng.random(m.shape))), -np.log(-np.log(rng.random(m.shape)))
    soft = relaxed_bernoulli(m, s, e0, e1)
    zval = np.log(m) - np.log1p(-m) + e0 - e1
    outside = np.abs(zval) >= band * (1 + 1e-9)
    dist = np.minimum(soft, 1 - soft)
    assert (dist[outside] <= 1e-6).all()
    assert outside.mean() > 0.99


def test_temperature_must_be_positive():
    x, z, ma, mh = pairs(2)
    with pytest.raises(ValueError):
        score_and_sample(x, z, ma, mh, constant_scorer(0.5), 0.0, np.random.default_rng(0), True)


def test_degenerate_probability_clamped_or_raised():
    x, z, ma, mh = pairs(3)
    g = constant_scorer(0.5)
    g.biases[-1].data[:] = 60.0  # sigmoid rounds to exactly 1.0
    s = score_and_sample(x, z, ma, mh, g, 1.0, np.random.default_rng(0), True)
    assert np.isfinite(s.soft).all()
    with pytest.raises(DegenerateProb):
        score_and_sample(x, z, ma, mh, g, 1.0, np.random.default_rng(0), True, clamp=False)


def test_eval_is_deterministic_threshold():
    x, z, ma, mh = pairs(4)
    g = MLP.init([2 * L, L, 1], np.random.default_rng(1), sigmoid_out=True)
    xr = Tensor(np.random.default_rng(2).normal(size=(4, L)))
    a = score_and_sample(xr, z, ma, mh, g, 0.5, np.random.default_rng(0), training=False)
    b = score_and_sample(xr, z, ma, mh, g, 0.5, np.random.default_rng(99), training=False)
    assert (a.weights.data == b.weights.data).all()
    assert (a.hard == (a.probs > 0.5)).all()


def test_seed_pairs_forced_kept():
    x, z, ma, mh = pairs(6)
    seeds = np.array([True, True, False, False, False, True])
    s = score_and_sample(x, z, ma, mh, constant_scorer(0.01), 1.0, np.random.default_rng(0), True, seed_mask=seeds)
    assert (s.weights.data[seeds, 0] == 1.0).all()
    assert s.hard[seeds].all()
    off = score_and_sample(
        x, z, ma, mh, constant_scorer(0.01), 1.0, np.random.default_rng(0), True, seed_mask=seeds, seed_floor=False
    )
    assert (off.weights.data[seeds, 0] < 1.0).any()


def test_hard_mask_matches_soft_threshold():
    x, z, ma, mh = pairs(1000)
    s = score_and_sample(x, z, ma, mh, constant_scorer(0.4), 0.7, np.random.default_rng(3), True)
    assert (s.hard == (s.soft > 0.5)).all()


def test_straight_through_forward_is_hard():
    x, z, ma, mh = pairs(50)
    s = score_and_sample(x, z, ma, mh, constant_scorer(0.5), 1.0, np.random.default_rng(0), True, straight_through=True)
    w = s.weights.data[:, 0]
    np.testing.assert_allclose(w, s.hard.astype(float), atol=1e-15)


def _soft_mask_loss(g, seed):
    xr = Tensor(np.random.default_rng(7).normal(size=(8, L)))
    zr = Tensor(np.random.default_rng(8).normal(size=(2, L)))
    ma, mh = np.arange(8) % 8, np.array([0, 0, 0, 0, 1, 1, 1, 1])
    s = score_and_sample(xr, zr, ma, mh, g, 0.7, np.random.default_rng(seed), True)
    target = np.linspace(0.0, 1.0, 8)[:, None]
    return T.sum_all(T.square(T.sub(s.weights, target)))


def test_soft_mask_gradient_matches_finite_differences():
    g = MLP.init([2 * L, L, 1], np.random.default_rng(3), sigmoid_out=True)
    for _, t in g.named("g"):
        t.zero_grad()
    with T.Tape():
        T.backward(_soft_mask_loss(g, 11))
    for name, t in g.named("g"):
        flat = t.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-5
            up = _soft_mask_loss(g, 11).item()
            flat[i] = orig - 1e-5
            down = _soft_mask_loss(g, 11).item()
            flat[i] = orig
            num[i] = (up - down) / 2e-5
        ana = t.grad.reshape(-1)
        err = np.linalg.norm(ana - num) / max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8)
        assert err < 1e-4, name


def test_encode_one_layer_equals_layer():
    cfg = ModelConfig(latent_dim=L, variant="MolHMPN_K", k=1)
    b = collate([prepare(parse_smiles(ASPIRIN), cfg)])
    b = replace(b, z=Tensor(np.random.default_rng(0).normal(size=(b.n_hyperedges, L))))
    p = HyperMPParams.init(SCHEMA.atom_dim, SCHEMA.bond_dim, L, L, np.random.default_rng(1))
    x_hat, z_hat = encode_membership(b, [p])
    ref = hypermp_layer(b, p).batch
    assert (x_hat.data == ref.x.data).all() and (z_hat.data == ref.z.data).all()
    assert x_hat.shape == (13, L) and z_hat.shape == (3, L)
    assert np.isfinite(x_hat.data).all() and np.isfinite(z_hat.data).all()


def test_adjust_all_keep_is_identity():
    h = build_hypergraph(parse_smiles(ASPIRIN), k=1)
    assert adjust_hypergraph(h, np.ones(len(membership_pairs(h)), dtype=bool)) == h


def test_adjust_all_drop_leaves_seed_floor():
    h = build_hypergraph(parse_smiles(ASPIRIN), k=1)
    adj = adjust_hypergraph(h, np.zeros(len(membership_pairs(h)), dtype=bool))
    assert [e.members for e in adj.edges] == [e.seed_members for e in h.edges]
    adj = adjust_hypergraph(h, np.zeros(len(membership_pairs(h)), dtype=bool), seed_floor=False)
    assert all(e.members for e in adj.edges)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 3), st.integers(0, 10_000))
def test_adjusted_members_stay_in_extended_scope(k, seed):
    h = build_hypergraph(parse_smiles("CC(=O)Nc1ccc(O)cc1"), k=k)
    keep = np.random.default_rng(seed).random(len(membership_pairs(h))) < 0.5
    adj = adjust_hypergraph(h, keep)
    for a, b in zip(adj.edges, h.edges):
        assert b.seed_members <= a.members <= b.members


def test_adjust_rejects_misaligned_mask():
    h = build_hypergraph(parse_smiles("CCO"))
    with pytest.raises(ValueError):
        adjust_hypergraph(h, np.ones(99, dtype=bool))


def test_temperature_schedule():
    assert temperature_at(0, 500) == 1.0
    assert temperature_at(499, 500) == pytest.approx(0.1)
    vals = [temperature_at(e, 500) for e in range(500)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
