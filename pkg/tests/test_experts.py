import numpy as np
import pytest

from poumor import diffcore as dc
from poumor import spectral as sp
from poumor.experts import (MorExpert, MorLayer, MorLayerConfig, ZeroExpert, expert_config,
                            zero_expert)
from poumor.spectral import GridSpec


def identity_layer(grid, channels=1, keep=None):
    """h = identity (single linear layer), g = identity at every retained mode, no skip."""
    cfg = MorLayerConfig(channels, channels, lift=channels, hidden=(), keep=keep, skip=False)
    layer = MorLayer(cfg, grid, "L")
    p = layer.init(np.random.default_rng(0))
    p["L.h.w0"] = np.eye(channels)
    p["L.g.re"] = np.broadcast_to(np.eye(channels), p["L.g.re"].shape).copy()
    p["L.g.im"] = np.zeros_like(p["L.g.im"])
    return layer, p


def band_limit(u, keep):
    uh = np.fft.fftn(u, axes=(1, 2))
    for ax, k in zip((1, 2), keep):
        f = np.abs(np.fft.fftfreq(u.shape[ax], 1.0 / u.shape[ax]))
        shape = [1] * u.ndim
        shape[ax] = -1
        uh = uh * (f <= k).reshape(shape)
    return np.real(np.fft.ifftn(uh, axes=(1, 2)))


def test_identity_configured_layer_is_band_limited_identity():
    g = GridSpec((16, 16))
    layer, p = identity_layer(g)
    u = np.random.default_rng(1).standard_normal((2, 16, 16, 1))
    np.testing.assert_allclose(layer(p, u), band_limit(u, (4, 4)), atol=1e-12)


def test_laplacian_configured_layer_matches_spectral_module():
    g = GridSpec((16, 12))
    layer, p = identity_layer(g)
    ks = sp.kgrid(g, half=True, channels=False)
    idx = [dc.mode_indices(16, 4), dc.mode_indices(12, 3, half=True)]
    k2 = np.take(ks[0], idx[0], axis=0) ** 2 + np.take(ks[1], idx[1], axis=1) ** 2
    p["L.g.re"] = -k2[..., None, None]
    u = np.random.default_rng(2).standard_normal((1, 16, 12, 1))
    ub = band_limit(u, (4, 3))
    np.testing.assert_allclose(layer(p, u), sp.spectral_laplacian(ub[0], g)[None], atol=1e-10)


def test_zero_g_with_identity_skip_is_identity():
    g = GridSpec((8, 8))
    layer = MorLayer(MorLayerConfig(2, 2, lift=4), g, "L")
    p = layer.init(np.random.default_rng(3))
    p["L.g.re"][:] = 0.0
    p["L.g.im"][:] = 0.0
    u = np.random.default_rng(4).standard_normal((1, 8, 8, 2))
    np.testing.assert_array_equal(layer(p, u), u)


@pytest.mark.parametrize("g_mode", ["tensor", "mlp"])
def test_zero_init_scale_starts_as_skip_path(g_mode):
    g = GridSpec((16,))
    layer = MorLayer(MorLayerConfig(2, 2, lift=4, g_mode=g_mode, g_init_scale=0.0), g, "L")
    p = layer.init(np.random.default_rng(5))
    u = np.random.default_rng(6).standard_normal((3, 16, 2))
    np.testing.assert_array_equal(layer(p, u), u)


def test_output_real_and_linear_in_g():
    g = GridSpec((12, 8))
    layer = MorLayer(MorLayerConfig(1, 1, lift=3, skip=False), g, "L")
    p = layer.init(np.random.default_rng(5))
    u = np.random.default_rng(6).standard_normal((1, 12, 8, 1))
    y = layer(p, u)
    assert np.isrealobj(y)
    p2 = dict(p, **{"L.g.re": 2 * p["L.g.re"], "L.g.im": 2 * p["L.g.im"]})
    np.testing.assert_allclose(layer(p2, u), 2 * y, rtol=1e-13, atol=1e-14)


def test_h_is_local():
    g = GridSpec((8, 8))
    layer = MorLayer(MorLayerConfig(2, 2, lift=5), g, "L")
    p = layer.init(np.random.default_rng(7))
    u = np.random.default_rng(8).standard_normal((64, 2))
    perm = np.random.default_rng(9).permutation(64)
    from poumor.experts import mlp_apply
    direct = mlp_apply(p, u, "L.h", 3)
    permuted = mlp_apply(p, u[perm], "L.h", 3)
    np.testing.assert_array_equal(permuted[np.argsort(perm)], direct)


def test_layer_rejects_nan_and_bad_channels():
    g = GridSpec((8,))
    layer = MorLayer(MorLayerConfig(1, 1), g, "L")
    p = layer.init(np.random.default_rng(0))
    u = np.zeros((1, 8, 1))
    u[0, 3, 0] = np.nan
    with pytest.raises(FloatingPointError):
        layer(p, u)
    with pytest.raises(dc.ShapeError):
        layer(p, np.zeros((1, 8, 2)))
    with pytest.raises(ValueError):
        MorLayer(MorLayerConfig(1, 1, keep=(5,)), g, "L")


def test_single_identity_layer_expert():
    g = GridSpec((16,))
    cfg = expert_config(1, 1, depth=1, lift=1, hidden=(), skip=False)
    ex = MorExpert(cfg, g, "e")
    p = ex.init(np.random.default_rng(0))
    p["e.l0.h.w0"] = np.eye(1)
    p["e.l0.g.re"][:] = 1.0
    p["e.l0.g.im"][:] = 0.0
    x = g.coords()[0]
    u = (np.sin(x) + 0.5 * np.cos(3 * x))[None, :, None]
    np.testing.assert_allclose(ex(p, u), u, atol=1e-12)


def test_zero_input_gives_zero_output():
    g = GridSpec((8, 8))
    ex = MorExpert(expert_config(1, 1, width=4), g, "e")
    p = ex.init(np.random.default_rng(1))
    np.testing.assert_array_equal(ex(p, np.zeros((1, 8, 8, 1))), 0.0)


def test_two_layer_expert_gradient_check():
    g = GridSpec((8, 8))
    ex = MorExpert(expert_config(1, 1, width=2, depth=2, lift=2, hidden=(4,)), g, "e")
    p = ex.init(np.random.default_rng(2))
    u = np.random.default_rng(3).standard_normal((1, 8, 8, 1))
    rep = dc.grad_check(lambda q: dc.sum(dc.square(ex(q, u))), p, max_entries=200)
    assert rep["max_rel_error"] < 1e-4


def test_mlp_g_mode_gradient_check():
    g = GridSpec((8,))
    ex = MorExpert(expert_config(1, 1, width=2, depth=1, lift=2, hidden=(3,), g_mode="mlp"), g, "e")
    p = ex.init(np.random.default_rng(4))
    u = np.random.default_rng(5).standard_normal((2, 8, 1))
    rep = dc.grad_check(lambda q: dc.sum(dc.square(ex(q, u))), p)
    assert rep["max_rel_error"] < 1e-4


def test_layer_chain_validation():
    from poumor.experts import ExpertConfig
    with pytest.raises(ValueError):
        MorExpert(ExpertConfig([MorLayerConfig(1, 2), MorLayerConfig(3, 1)]), GridSpec((8,)), "e")


def test_zero_expert():
    u = np.random.default_rng(6).standard_normal((2, 8, 3))
    z = ZeroExpert(2)
    assert z.init(np.random.default_rng(0)) == {}
    np.testing.assert_array_equal(z({}, u), np.zeros((2, 8, 2)))
    np.testing.assert_array_equal(zero_expert(u), np.zeros_like(u))


def test_init_scales():
    g = GridSpec((32, 32))
    layer = MorLayer(MorLayerConfig(4, 4, lift=16), g, "L")
    p = layer.init(np.random.default_rng(7))
    assert np.std(p["L.g.re"]) == pytest.approx(np.sqrt(1 / layer.n_modes), rel=0.05)
    assert np.std(p["L.h.w1"]) == pytest.approx(np.sqrt(1 / 32), rel=0.1)
