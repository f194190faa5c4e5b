from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molhyper import tensor as T
from molhyper.featurize import SCHEMA
from molhyper.hypermp import GraphBatch, HyperMPParams, atom_gc, func_gc, hyperedge_pairs, hypermp_layer
from molhyper.model import ModelConfig, collate, prepare
from molhyper.smiles import parse_smiles
from molhyper.tensor import Tensor

from oracles import RING_CORPUS

L = 12
CFG = ModelConfig(latent_dim=L)


def params(seed=0):
    return HyperMPParams.init(SCHEMA.atom_dim, SCHEMA.bond_dim, L, L, np.random.default_rng(seed))


def batch_for(smiles_list, seed=1):
    b = collate([prepare(parse_smiles(s), CFG) for s in smiles_list])
    rng = np.random.default_rng(seed)
    return replace(b, z=Tensor(rng.normal(size=(b.n_hyperedges, L))))


def test_layer_shapes_and_finiteness():
    b = batch_for(["CC(=O)Oc1ccccc1C(=O)O"])
    out = hypermp_layer(b, params())
    assert out.batch.x.shape == (13, L)
    assert out.batch.z.shape == (3, L)
    assert out.batch.edge_attr.shape == (26, L)
    assert np.isfinite(out.batch.x.data).all() and np.isfinite(out.batch.z.data).all()


def test_isolated_atom_gets_empty_sum():
    p = params()
    b = batch_for(["C"])
    x_new, _, _ = atom_gc(b, p)
    expected = p.f_atom(T.concat([b.x, Tensor(np.zeros((1, L)))]))
    np.testing.assert_array_equal(x_new.data, expected.data)


def test_zero_attention_surrogate():
    p = params()
    p.f_attn.weights[-1].data[:] = 0.0
    p.f_attn.biases[-1].data[:] = -30.0
    b = batch_for(["CC(=O)Oc1ccccc1C(=O)O"])
    x_new, _, alpha = atom_gc(b, p)
    assert alpha.data.max() < 1e-13
    expected = p.f_atom(T.concat([b.x, Tensor(np.zeros((b.n_atoms, L)))]))
    assert np.abs(x_new.data - expected.data).max() < 1e-9


def test_symmetric_atoms_identical():
    b = batch_for(["CC"])
    x_new, _, _ = atom_gc(b, params())
    np.testing.assert_array_equal(x_new.data[0], x_new.data[1])


def test_single_hyperedge_gets_empty_pair_sum():
    p = params()
    b = batch_for(["c1ccccc1"])
    assert b.n_hyperedges == 1 and b.pair_k.size == 0
    x_new, _, _ = atom_gc(b, p)
    z_new, beta = func_gc(b, x_new, p)
    expected = p.g_fg(T.concat([b.z, Tensor(np.zeros((1, L)))]))
    np.testing.assert_array_equal(z_new.data, expected.data)
    assert beta.shape == (0, 1)


def test_identical_localized_features_give_symmetric_pairs():
    p = params()
    b = batch_for(["CC.CC"])  # one molecule, two identical remainder hyperedges
    b = replace(b, z=Tensor(np.ones((2, L))))
    assert b.pair_k.tolist() == [0, 1] and b.pair_m.tolist() == [1, 0]
    x_new, _, _ = atom_gc(b, p)
    _, beta = func_gc(b, x_new, p)
    assert beta.data[0, 0] == beta.data[1, 0]


def _permute_atoms(b: GraphBatch, perm: np.ndarray) -> GraphBatch:
    """Relabel atom i as perm[i]."""
    inv = np.argsort(perm)
    return replace(
        b,
        x=Tensor(b.x.data[inv]),
        edge_i=perm[b.edge_i],
        edge_j=perm[b.edge_j],
        mem_atom=perm[b.mem_atom],
        atom_mol=b.atom_mol[inv],
    )


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(RING_CORPUS), st.integers(0, 1000))
def test_atom_permutation_equivariance(smiles, seed):
    b = batch_for([smiles])
    perm = np.random.default_rng(seed).permutation(b.n_atoms)
    p = params()
    a = hypermp_layer(b, p).batch
    c = hypermp_layer(_permute_atoms(b, perm), p).batch
    np.testing.assert_allclose(c.x.data[perm], a.x.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(c.z.data, a.z.data, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(RING_CORPUS), st.integers(0, 1000))
def test_hyperedge_permutation_equivariance(smiles, seed):
    b = batch_for([smiles])
    perm = np.random.default_rng(seed).permutation(b.n_hyperedges)
    inv = np.argsort(perm)
    pk, pm = hyperedge_pairs(b.he_mol)
    c = replace(b, z=Tensor(b.z.data[inv]), mem_he=perm[b.mem_he], pair_k=perm[pk], pair_m=perm[pm])
    p = params()
    za = hypermp_layer(b, p).batch.z.data
    zc = hypermp_layer(c, p).batch.z.data
    np.testing.assert_allclose(zc[perm], za, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(RING_CORPUS + ["CCO", "CC(=O)N", "C"]), min_size=2, max_size=4))
def test_batching_invariance(smiles_list):
    p = params()
    joint = hypermp_layer(batch_for(smiles_list, seed=3), p).batch
    z_all = batch_for(smiles_list, seed=3).z.data
    a_off = h_off = 0
    for s in smiles_list:
        single = batch_for([s])
        single = replace(single, z=Tensor(z_all[h_off : h_off + single.n_hyperedges]))
        out = hypermp_layer(single, p).batch
        np.testing.assert_allclose(out.x.data, joint.x.data[a_off : a_off + single.n_atoms], rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.z.data, joint.z.data[h_off : h_off + single.n_hyperedges], rtol=0, atol=1e-12)
        a_off += single.n_atoms
        h_off += single.n_hyperedges


def test_identical_molecules_in_one_batch():
    b = batch_for(["CC(=O)O", "CC(=O)O"])
    b = replace(b, z=Tensor(np.tile(b.z.data[:1], (b.n_hyperedges, 1))))
    out = hypermp_layer(b, params()).batch
    n = b.n_atoms // 2
    np.testing.assert_array_equal(out.x.data[:n], out.x.data[n:])


def test_attention_range_and_isolation():
    b = batch_for(["CC(=O)Oc1ccccc1C(=O)O", "CCN", "c1ccccc1CO"])
    out = hypermp_layer(b, params())
    for att in (out.alpha.data, out.beta.data):
        assert (att > 0).all() and (att < 1).all()
    assert (b.he_mol[b.pair_k] == b.he_mol[b.pair_m]).all()
    assert (b.pair_k != b.pair_m).all()


def test_no_write_back_to_atoms():
    b = batch_for(["CC(=O)Oc1ccccc1C(=O)O"])
    p = params()
    before = hypermp_layer(b, p).batch
    for w in p.g_fg.weights:
        w.data = w.data + 0.5
    after = hypermp_layer(b, p).batch
    assert after.x.data.tobytes() == before.x.data.tobytes()
    assert after.z.data.tobytes() != before.z.data.tobytes()


def test_empty_hypergraph():
    b = batch_for(["CCO"])
    b = replace(
        b,
        z=Tensor(np.zeros((0, L))),
        mem_atom=np.zeros(0, dtype=np.int64),
        mem_he=np.zeros(0, dtype=np.int64),
        he_mol=np.zeros(0, dtype=np.int64),
        pair_k=np.zeros(0, dtype=np.int64),
        pair_m=np.zeros(0, dtype=np.int64),
    )
    out = hypermp_layer(b, params()).batch
    assert out.z.shape == (0, L)
    assert out.x.shape == (3, L)


def test_validate_rejects_bad_indices():
    b = batch_for(["CCO"])
    with pytest.raises(T.ShapeMismatch):
        replace(b, mem_atom=b.mem_atom + 10).validate()
    with pytest.raises(T.ShapeMismatch):
        two = batch_for(["CCO", "CCO"])
        replace(two, pair_k=np.array([0]), pair_m=np.array([2])).validate()


def test_parameter_widths():
    p = params()
    pair = 2 * SCHEMA.atom_dim + SCHEMA.bond_dim
    assert p.f_bond.in_dim == pair and p.f_attn.in_dim == pair
    assert p.f_atom.in_dim == SCHEMA.atom_dim + L
    assert p.g_atom_to_fg.in_dim == 2 * L
    assert p.g_edge.in_dim == 2 * L and p.g_attn.in_dim == 2 * L
    assert p.g_fg.in_dim == 2 * L
    assert all(len(m.weights) == 2 for m in (p.f_bond, p.f_attn, p.f_atom, p.g_atom_to_fg, p.g_edge, p.g_attn, p.g_fg))


def test_gradients_match_finite_differences_on_aspirin():
    p = HyperMPParams.init(SCHEMA.atom_dim, SCHEMA.bond_dim, 4, 4, np.random.default_rng(0))
    b = collate([prepare(parse_smiles("CC(=O)Oc1ccccc1C(=O)O"), CFG)])
    b = replace(b, z=Tensor(np.random.default_rng(1).normal(size=(b.n_hyperedges, 4))))

    def loss():
        out = hypermp_layer(b, p).batch
        return T.add(T.sum_all(T.square(out.x)), T.sum_all(T.square(out.z)))

    for _, t in p.named("p"):
        t.zero_grad()
    with T.Tape():
        T.backward(loss())
    rng = np.random.default_rng(2)
    for name, t in p.named("p"):
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, min(4, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + 1e-5
            up = loss().item()
            flat[i] = orig - 1e-5
            down = loss().item()
            flat[i] = orig
            num = (up - down) / 2e-5
            ana = t.grad.reshape(-1)[i]
            assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-6), name
