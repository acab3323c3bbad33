import numpy as np
import pytest

from poumor import datagen as D
from poumor import spectral as sp
from poumor.spectral import GridSpec


def test_gp_pointwise_variance_monte_carlo():
    g = GridSpec((16, 16), (4.0, 4.0))
    draws = D.sample_gp(g, length_scale=0.3, seed=0, variance=2.0, size=10000)
    var = np.mean(draws ** 2, axis=0)
    stderr = 2.0 * np.sqrt(2.0 / 10000)
    assert np.max(np.abs(var - 2.0)) < 4 * stderr
    assert abs(draws.mean()) < 4 * np.sqrt(2.0 / draws[:, 0, 0].size)


def test_gp_nearby_covariance_monte_carlo():
    g = GridSpec((16, 16), (4.0, 4.0))
    draws = D.sample_gp(g, length_scale=0.3, seed=1, size=10000)
    h = 4.0 / 16
    for lag in (1, 2, 3):
        prod = draws * np.roll(draws, lag, axis=1)
        est = prod.mean()
        # pointwise products share draws, so bound the error with per-draw averages
        se = prod.mean(axis=(1, 2)).std() / np.sqrt(len(draws))
        assert abs(est - D.se_kernel(lag * h, 0.3)) < 4 * se


def test_gp_seeded():
    g = D.disk_grid(16)
    np.testing.assert_array_equal(D.sample_gp(g, seed=5), D.sample_gp(g, seed=5))
    assert not np.array_equal(D.sample_gp(g, seed=5), D.sample_gp(g, seed=6))


def test_gp_rejects_non_pd_kernel():
    g = GridSpec((16,))
    with pytest.raises(ValueError):
        D.sample_gp(g, kernel=lambda r: np.where(r < 1.0, 1.0, -1.0))


def test_disk_zero_field():
    g = D.disk_grid(32)
    u, v = D.disk_pair(g, np.zeros(g.n))
    np.testing.assert_array_equal(v, 0.0)


def test_fd_laplacian_polynomial_second_order():
    errs = []
    for n in (32, 64, 128):
        g = D.disk_grid(n)
        x, y = g.coords()
        r2 = x ** 2 + y ** 2
        u = 1 - r2
        exact = 16 * r2 - 8
        inner = (np.abs(x) < 1.1) & (np.abs(y) < 1.1)
        err = np.max(np.abs(D.fd_laplacian(u ** 2, g) - exact)[inner])
        h = g.spacing[0]
        # truncation error of the 5-point stencil on this quartic is exactly 4 h^2
        assert err == pytest.approx(4 * h * h, rel=1e-6)
        errs.append(err)
    np.testing.assert_allclose(np.log2(np.array(errs[:-1]) / errs[1:]), 2.0, atol=1e-6)


def test_disk_pairs_vanish_on_boundary():
    g = D.disk_grid(64)
    data = D.gen_disk_pairs(D.SampleSpec("disk-laplacian", g, count=3, seed=2))
    r = np.sqrt(sum(c ** 2 for c in g.coords()))
    h = g.spacing[0]
    gp = D.sample_gp(g, 0.25, 2)
    assert np.max(np.abs(data.u[0, ..., 0][r > 1])) < 1e-8
    assert np.max(np.abs(data.v[0, ..., 0][r > 1])) < 1e-8
    band = (r > 1 - h) & (r <= 1)
    assert np.max(np.abs(data.u[0, ..., 0][band])) <= 2 * h * np.max(np.abs(gp))
    np.testing.assert_array_equal(data.mask[0], r <= 1)


def test_disk_pairs_deterministic():
    g = D.disk_grid(32)
    a = D.gen_disk_pairs(D.SampleSpec("disk-laplacian", g, count=2, seed=4))
    b = D.gen_disk_pairs(D.SampleSpec("disk-laplacian", g, count=2, seed=4))
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.v, b.v)


def _fd_div_tanh_grad(f, x, y, h=1e-3):
    def d(fun, axis):
        if axis == 0:
            return lambda a, b: (-fun(a + 2 * h, b) + 8 * fun(a + h, b) - 8 * fun(a - h, b) + fun(a - 2 * h, b)) / (12 * h)
        return lambda a, b: (-fun(a, b + 2 * h) + 8 * fun(a, b + h) - 8 * fun(a, b - h) + fun(a, b - 2 * h)) / (12 * h)
    tx = lambda a, b: np.tanh(d(f, 0)(a, b))  # noqa: E731
    ty = lambda a, b: np.tanh(d(f, 1)(a, b))  # noqa: E731
    return d(tx, 0)(x, y) + d(ty, 1)(x, y)


def test_poisson_zero_frequencies_match_fd_oracle():
    rng = np.random.default_rng(0)
    r = np.sqrt(rng.uniform(0, 0.8, 200))
    t = rng.uniform(0, np.pi / 2, 200)
    x, y = r * np.cos(t), r * np.sin(t)
    freqs = np.zeros((10, 2))
    u, v = D.poisson_fields(x, y, freqs)
    np.testing.assert_allclose(v, 10 * (1 - x ** 2 - y ** 2), atol=1e-14)
    oracle = _fd_div_tanh_grad(lambda a, b: 10 * (1 - a ** 2 - b ** 2), x, y)
    assert np.max(np.abs(u - oracle)) < 1e-4


def test_poisson_random_frequencies_satisfy_pde():
    rng = np.random.default_rng(1)
    freqs = rng.uniform(0, 10, (10, 2))
    r = np.sqrt(rng.uniform(0, 0.8, 200))
    t = rng.uniform(0, np.pi / 2, 200)
    x, y = r * np.cos(t), r * np.sin(t)
    u, _ = D.poisson_fields(x, y, freqs)
    oracle = _fd_div_tanh_grad(lambda a, b: D.poisson_fields(a, b, freqs)[1], x, y, h=2e-4)
    assert np.max(np.abs(u - oracle)) < 1e-4 * max(1.0, np.max(np.abs(u)))


def test_quarter_disk_mask_geometry():
    g = D.disk_grid(256)
    x, y = g.coords()
    canon = (x ** 2 + y ** 2 <= 1) & (x >= 0) & (y >= 0)
    np.testing.assert_array_equal(D.quarter_disk_mask(g, 0.0), canon)
    h = g.spacing[0]
    for angle in (0.0, 0.7, 2.5):
        area = D.quarter_disk_mask(g, angle).sum() * h * h
        assert abs(area - np.pi / 4) < (np.pi / 2 + 2) * h


def test_poisson_pairs_carry_angle_and_mask():
    g = D.disk_grid(64)
    data = D.gen_poisson_pairs(D.SampleSpec("quarter-disk-poisson", g, count=2, seed=3))
    for i in range(2):
        np.testing.assert_array_equal(data.mask[i], D.quarter_disk_mask(g, data.meta[i]["angle"]))
        assert np.all(data.u[i, ..., 0][~data.mask[i]] == 0)


def test_poisson_nyquist_check():
    with pytest.raises(ValueError):
        D.gen_poisson_pairs(D.SampleSpec("quarter-disk-poisson", D.disk_grid(10), count=1))


def closure_spec(**kw):
    base = dict(count=1, seed=0, snapshots=200, nu=1e-3, dt=1e-3)
    base.update(kw)
    return D.SampleSpec("burgers-closure", GridSpec((256,)), **base)


def test_box_filter_examples():
    np.testing.assert_allclose(D.box_filter(np.full(64, 2.5), 8), 2.5, rtol=1e-15)
    u = np.random.default_rng(2).standard_normal((3, 64))
    assert np.max(np.abs(D.box_filter(u, 8).mean(-1) - u.mean(-1))) <= 1e-12
    with pytest.raises(ValueError):
        D.box_filter(u, 3)


def test_box_filter_damps_high_shells():
    spec = closure_spec()
    data = D.gen_burgers_closure(spec)
    g = spec.grid
    _, e_f = sp.energy_spectrum(data.fine[0, -1], g)
    _, e_b = sp.energy_spectrum(data.filtered[0, -1], g)
    assert np.all(e_b[16:] <= e_f[16:] + 1e-30)
    assert data.coarse.shape[1] == data.fine.shape[1] == 201
    assert data.coarse.shape[2] == 256 // 8


def test_closure_deterministic_and_blowup():
    a = D.gen_burgers_closure(closure_spec(snapshots=20))
    b = D.gen_burgers_closure(closure_spec(snapshots=20))
    np.testing.assert_array_equal(a.coarse, b.coarse)
    with pytest.raises(D.SolverInstability):
        D.burgers_dns(D.random_ic(GridSpec((64,)), 5.0, 8, 0), GridSpec((64,)), 0.0, 1.0, 50)


def test_substeps_refine_the_dns_between_snapshots():
    spec = closure_spec(snapshots=6, dt=4e-3, substeps=4)
    data = D.gen_burgers_closure(spec)
    u0 = D.random_ic(spec.grid, spec.ic_amplitude, spec.ic_modes, spec.seed)
    fine = D.burgers_dns(u0, spec.grid, spec.nu, 1e-3, 24)[::4]
    np.testing.assert_allclose(data.coarse[0], D.closure_from_fine(fine, spec)[1], rtol=0, atol=1e-14)
    with pytest.raises(ValueError):
        closure_spec(substeps=0)


def test_burgers_dns_conserves_mean_and_dissipates():
    g = GridSpec((128,))
    u0 = D.random_ic(g, 0.1, 8, 3)
    assert np.sqrt(np.mean(u0 ** 2)) == pytest.approx(0.1)
    out = D.burgers_dns(u0, g, 1e-2, 1e-3, 500, save_every=100)
    assert out.shape == (6, 128)
    assert np.max(np.abs(out.mean(-1) - u0.mean())) < 1e-13
    energy = np.mean(out ** 2, axis=-1)
    assert np.all(np.diff(energy) < 0)


def test_ood_pair():
    # a shocked state: N = 1024 at t = 2
    spec = D.SampleSpec("burgers-closure", GridSpec((1024,)), count=1, seed=0, snapshots=2000)
    fine = D.burgers_dns(D.random_ic(spec.grid, 0.1, 8, 0), spec.grid, 1e-3, 1e-3, 2000, save_every=2000)[-1]
    ind, ood = D.gen_ood_pair(spec, fine)
    # filtering the field behind the OOD IC reproduces the in-distribution IC
    np.testing.assert_array_equal(D.subsample(D.box_filter(fine, 8), 8), ind)
    np.testing.assert_array_equal(D.subsample(fine, 8), ood)
    cg = D.coarse_grid(spec)
    _, e_in = sp.energy_spectrum(ind, cg)
    _, e_ood = sp.energy_spectrum(ood, cg)
    assert e_ood[32:].sum() > 1.3 * e_in[32:].sum()
    small = closure_spec(snapshots=50)
    a = D.gen_ood_pair(small)
    b = D.gen_ood_pair(small)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_sample_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        D.SampleSpec("fractal", GridSpec((8,)))
    with pytest.raises(ValueError):
        D.SampleSpec("burgers-closure", GridSpec((96,)), stride=64)
    with pytest.raises(ValueError):
        D.SampleSpec("disk-laplacian", D.disk_grid(8), count=0)
    s = closure_spec()
    assert D.SampleSpec.from_dict(s.to_dict()) == s
