import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poumor import diffcore as dc
from poumor.gating import (FixedGates, GatingNetwork, check_partition, embed_coords, fixed_gates,
                           gate_weights, grid_embedding)
from poumor.spectral import GridSpec


def test_embed_examples():
    np.testing.assert_array_equal(embed_coords(0.0), [0.0, 1.0])
    np.testing.assert_allclose(embed_coords(np.pi / 2), [1.0, 0.0], atol=1e-16)
    th = np.array([0.3, 1.7])
    assert embed_coords(th).tolist() == [np.sin(0.3), np.sin(1.7), np.cos(0.3), np.cos(1.7)]


def test_embed_periodic():
    th = np.linspace(0, 2 * np.pi, 7, endpoint=False)
    np.testing.assert_allclose(embed_coords(th[:, None] + 2 * np.pi), embed_coords(th[:, None]), atol=1e-14)


def test_embedding_injective_on_grid():
    e = grid_embedding(GridSpec((8, 6))).reshape(-1, 4)
    d = np.linalg.norm(e[:, None] - e[None], axis=-1)
    assert np.min(d[~np.eye(len(e), dtype=bool)]) > 1e-3


def test_zero_mlp_gives_uniform_gates():
    g = GridSpec((8, 8))
    net = GatingNetwork(g, 3)
    w = gate_weights(net, net.init(np.random.default_rng(0)))
    np.testing.assert_allclose(w, 1 / 3, atol=1e-15)


def test_softmax_scalar_example():
    w = dc.softmax(np.array([10.0, -10.0]))
    np.testing.assert_allclose(w, [1 / (1 + np.exp(-20)), np.exp(-20) / (1 + np.exp(-20))], rtol=1e-14)
    assert w[1] == pytest.approx(2.06e-9, rel=0.01)
    assert abs(w.sum() - 1) <= 1e-15


def test_softmax_shift_invariance():
    z = np.random.default_rng(1).standard_normal((5, 4))
    np.testing.assert_allclose(dc.softmax(z + 123.4), dc.softmax(z), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1), st.floats(0.1, 30.0))
def test_partition_of_unity(n_experts, seed, scale):
    g = GridSpec((8, 8))
    net = GatingNetwork(g, n_experts, hidden=(16,))
    rng = np.random.default_rng(seed)
    p = {k: rng.standard_normal(v.shape) * scale for k, v in net.init(rng).items()}
    w = gate_weights(net, p)
    assert w.shape == (8, 8, n_experts)
    assert np.max(np.abs(w.sum(-1) - 1)) <= 1e-12
    assert w.min() >= 0


def test_gates_ignore_field_values():
    net = GatingNetwork(GridSpec((8,)), 2, hidden=(4,))
    p = net.init(np.random.default_rng(2))
    # the evaluator has no field argument; repeated calls agree exactly
    np.testing.assert_array_equal(gate_weights(net, p), gate_weights(net, p))


def test_gate_gradient_check():
    net = GatingNetwork(GridSpec((6, 6)), 3, hidden=(5,))
    rng = np.random.default_rng(3)
    p = {k: rng.standard_normal(v.shape) for k, v in net.init(rng).items()}
    tgt = rng.standard_normal((6, 6, 3))
    rep = dc.grad_check(lambda q: dc.sum(dc.mul(net(q), tgt)), p)
    assert rep["max_rel_error"] < 1e-6


def test_fixed_gates_examples():
    m = np.zeros((4, 4), bool)
    m[:2] = True
    fg = fixed_gates([m, ~m])
    w = fg({})
    assert set(np.unique(w)) == {0.0, 1.0}
    np.testing.assert_array_equal(w.sum(-1), 1.0)
    one = fixed_gates([np.ones((4, 4))])
    np.testing.assert_array_equal(one({}), 1.0)


def test_fixed_gates_reject_bad_partition():
    m = np.zeros((4, 4))
    m[0] = 1.0
    with pytest.raises(ValueError):
        fixed_gates([m, m])
    with pytest.raises(ValueError):
        check_partition(np.full((4, 2), 0.5 + 2e-9))
    check_partition(np.full((4, 2), 0.5 + 1e-10))
    with pytest.raises(ValueError):
        FixedGates(GridSpec((4,)), 2)({})


def test_quarter_disk_fixed_gates_partition():
    from poumor import datagen
    grid = datagen.disk_grid(64)
    data = datagen.gen_poisson_pairs(datagen.SampleSpec("quarter-disk-poisson", grid, count=1, seed=0))
    inside = data.mask[0]
    fg = fixed_gates([inside, ~inside], grid)
    w = fg({})
    assert np.all((w == 0) | (w == 1))
    assert np.max(np.abs(w.sum(-1) - 1)) == 0.0
    # the inside gate is a unit quarter disk inside a box of side 2.5
    frac = inside.mean()
    assert frac == pytest.approx(np.pi / 4 / 2.5 ** 2, abs=0.01)
