"""Synthetic exemplar data: disk pairs, quarter-disk Poisson pairs, 1D Burgers closure."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import spectral
from .spectral import GridSpec

KINDS = ("disk-laplacian", "quarter-disk-poisson", "burgers-closure", "ood-ic")


@dataclass
class SampleSpec:
    kind: str
    grid: GridSpec
    count: int = 1000
    seed: int = 0
    length_scale: float = 0.25
    freq_bound: float = 10.0
    n_terms: int = 10
    nu: float = 1e-3
    dt: float = 1e-3
    filter_width: int = 8
    stride: int = 8
    snapshots: int = 4000
    substeps: int = 1  # DNS steps per stored snapshot; the DNS step is dt / substeps
    ic_amplitude: float = 0.1
    ic_modes: int = 8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        for name in ("count", "length_scale", "filter_width", "stride", "snapshots", "dt", "substeps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"sample spec: {name} must be positive")
        if self.kind in ("burgers-closure", "ood-ic"):
            if self.grid.d != 1:
                raise ValueError("closure generator is one-dimensional")
            n = self.grid.n[0]
            if n % self.stride or n % self.filter_width:
                raise ValueError(f"stride {self.stride} and filter width {self.filter_width} must divide {n}")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = GridSpec.from_dict(d["grid"])
        return cls(**d)


def disk_grid(n: int = 64, half_width: float = 1.25) -> GridSpec:
    """Periodic box [-a, a]^2 embedding the unit disk."""
    return GridSpec((n, n), (2 * half_width, 2 * half_width), (-half_width, -half_width))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------- Gaussian processes

def se_kernel(r, length_scale: float, variance: float = 1.0):
    return variance * np.exp(-0.5 * (np.asarray(r) / length_scale) ** 2)


def sample_gp(grid: GridSpec, length_scale: float = 0.25, seed=0, variance: float = 1.0,
              kernel=None, size: int | None = None, jitter: float = 1e-5) -> np.ndarray:
    """Zero-mean stationary GP draw(s) on the grid by circulant embedding.

    The covariance is the kernel of the periodic (minimum-image) distance.
    Returns shape ``grid.n`` or ``(size, *grid.n)``.
    """
    kernel = kernel or (lambda r: se_kernel(r, length_scale, variance))
    lag2 = 0.0
    for ax, (n, L) in enumerate(zip(grid.n, grid.lengths)):
        j = np.arange(n)
        d = np.minimum(j, n - j) * (L / n)
        shape = [1] * grid.d
        shape[ax] = n
        lag2 = lag2 + d.reshape(shape) ** 2
    c = kernel(np.sqrt(lag2))
    lam = np.real(np.fft.fftn(c))
    # min-image wrapping leaves tiny negative eigenvalues; absorb them as jitter
    if lam.min() < -jitter * lam.max():
        raise ValueError(f"covariance is not positive definite (min eigenvalue {lam.min():.3e})")
    lam = np.clip(lam, 0.0, None)
    rng = _rng(seed)
    shape = grid.n if size is None else (size, *grid.n)
    xi = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    axes = tuple(range(-grid.d, 0))
    draw = np.fft.fftn(np.sqrt(lam / grid.size) * xi, axes=axes)
    return np.real(draw)


# ---------------------------------------------------------------- disk exemplar

def fd_laplacian(f: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Second-order 5-point (2d+1 point) periodic finite-difference Laplacian."""
    out = np.zeros_like(f)
    for ax, h in enumerate(grid.spacing):
        out += (np.roll(f, 1, axis=ax) - 2 * f + np.roll(f, -1, axis=ax)) / h ** 2
    return out


def disk_mask(grid: GridSpec, radius: float = 1.0) -> np.ndarray:
    x = grid.coords()
    return sum(c ** 2 for c in x) <= radius ** 2


def bump(grid: GridSpec) -> np.ndarray:
    r2 = sum(c ** 2 for c in grid.coords())
    return np.where(r2 < 1.0, 1.0 - r2, 0.0)


@dataclass
class PairData:
    """Pairs on a common grid; fields are zero outside each sample's mask."""

    grid: GridSpec
    u: np.ndarray        # (N, n.., 1)
    v: np.ndarray        # (N, n.., 1)
    mask: np.ndarray     # (N, n..) bool
    meta: list = field(default_factory=list)

    def __len__(self):
        return len(self.u)

    def split(self, n_train: int):
        a = PairData(self.grid, self.u[:n_train], self.v[:n_train], self.mask[:n_train], self.meta[:n_train])
        b = PairData(self.grid, self.u[n_train:], self.v[n_train:], self.mask[n_train:], self.meta[n_train:])
        return a, b


def disk_pair(grid: GridSpec, gp: np.ndarray):
    u = bump(grid) * gp
    v = fd_laplacian(u ** 2, grid)
    return u, v


def gen_disk_pairs(spec: SampleSpec) -> PairData:
    """u = bump * GP, v = FD-Laplacian(u^2), both restricted to the unit disk."""
    grid = spec.grid
    mask = disk_mask(grid)
    us, vs, meta = [], [], []
    for i in range(spec.count):
        u, v = disk_pair(grid, sample_gp(grid, spec.length_scale, spec.seed + i))
        us.append(np.where(mask, u, 0.0))
        vs.append(np.where(mask, v, 0.0))
        meta.append({"seed": spec.seed + i})
    masks = np.broadcast_to(mask, (spec.count, *grid.n)).copy()
    return PairData(grid, np.stack(us)[..., None], np.stack(vs)[..., None], masks, meta)


# ---------------------------------------------------------------- quarter-disk Poisson

def check_nyquist(grid: GridSpec, freq_bound: float):
    h = min(grid.spacing)
    if not np.pi / h > np.sqrt(2) * freq_bound:
        raise ValueError(f"grid spacing {h:.4g} cannot resolve frequency {freq_bound:g} "
                         f"(need pi/h > sqrt(2) * f)")


def quarter_disk_mask(grid: GridSpec, angle: float) -> np.ndarray:
    xb, yb = _canonical(grid, angle)
    return (xb ** 2 + yb ** 2 <= 1.0) & (xb >= 0) & (yb >= 0)


def _canonical(grid: GridSpec, angle: float):
    # x = R(angle) xbar  =>  xbar = R^T x
    x, y = grid.coords()
    c, s = np.cos(angle), np.sin(angle)
    return c * x + s * y, -s * x + c * y


def poisson_fields(xb, yb, freqs):
    """(u_hat, v_hat) at canonical coordinates for frequency pairs (M, 2).

    v = psi S, u = d/dx tanh(v_x) + d/dy tanh(v_y), derivatives in closed form.
    """
    r2 = xb ** 2 + yb ** 2
    inside = r2 < 1.0
    psi = np.where(inside, 1.0 - r2, 0.0)
    px = np.where(inside, -2 * xb, 0.0)
    py = np.where(inside, -2 * yb, 0.0)
    pxx = pyy = np.where(inside, -2.0, 0.0)
    S = Sx = Sy = Sxx = Syy = 0.0
    for a, b in freqs:
        ca, sa, cb, sb = np.cos(a * xb), np.sin(a * xb), np.cos(b * yb), np.sin(b * yb)
        S = S + ca * cb
        Sx = Sx - a * sa * cb
        Sy = Sy - b * ca * sb
        Sxx = Sxx - a * a * ca * cb
        Syy = Syy - b * b * ca * cb
    v = psi * S
    vx = px * S + psi * Sx
    vy = py * S + psi * Sy
    vxx = pxx * S + 2 * px * Sx + psi * Sxx
    vyy = pyy * S + 2 * py * Sy + psi * Syy
    u = vxx / np.cosh(vx) ** 2 + vyy / np.cosh(vy) ** 2
    return np.where(inside, u, 0.0), v


def gen_poisson_pairs(spec: SampleSpec) -> PairData:
    """Pairs (u, v) with div tanh(grad v) = u on randomly rotated quarter disks."""
    grid = spec.grid
    if grid.d != 2:
        raise ValueError("quarter-disk generator is two-dimensional")
    check_nyquist(grid, spec.freq_bound)
    us, vs, masks, meta = [], [], [], []
    for i in range(spec.count):
        rng = np.random.default_rng(spec.seed + i)
        freqs = rng.uniform(0.0, spec.freq_bound, (spec.n_terms, 2))
        angle = float(rng.uniform(0.0, 2 * np.pi))
        xb, yb = _canonical(grid, angle)
        u, v = poisson_fields(xb, yb, freqs)
        m = (xb ** 2 + yb ** 2 <= 1.0) & (xb >= 0) & (yb >= 0)
        us.append(np.where(m, u, 0.0))
        vs.append(np.where(m, v, 0.0))
        masks.append(m)
        meta.append({"seed": spec.seed + i, "angle": angle})
    return PairData(grid, np.stack(us)[..., None], np.stack(vs)[..., None], np.stack(masks), meta)


# ---------------------------------------------------------------- Burgers closure

class SolverInstability(FloatingPointError):
    pass


def box_filter(u: np.ndarray, width: int, axis: int = -1) -> np.ndarray:
    """Periodic top-hat of ``width`` cells: b+1 point stencil, half weight at the ends."""
    if width <= 0 or width % 2:
        raise ValueError("box filter width must be a positive even number of cells")
    half = width // 2
    out = 0.5 * (np.roll(u, half, axis=axis) + np.roll(u, -half, axis=axis))
    for j in range(-half + 1, half):
        out = out + np.roll(u, j, axis=axis)
    return out / width


def subsample(u: np.ndarray, stride: int, axis: int = -1) -> np.ndarray:
    idx = [slice(None)] * u.ndim
    idx[axis] = slice(None, None, stride)
    return u[tuple(idx)]


def random_ic(grid: GridSpec, amplitude: float, modes: int, seed) -> np.ndarray:
    """Flat-spectrum field on modes 1..``modes`` of a 1D grid, scaled to rms ``amplitude``."""
    rng = _rng(seed)
    n = grid.n[0]
    spec = np.zeros(n // 2 + 1, complex)
    spec[1:modes + 1] = rng.standard_normal(modes) + 1j * rng.standard_normal(modes)
    u = np.fft.irfft(spec, n)
    return amplitude * u / np.sqrt(np.mean(u ** 2))


def burgers_dns(u0: np.ndarray, grid: GridSpec, nu: float, dt: float, steps: int,
                save_every: int = 1) -> np.ndarray:
    """Pseudo-spectral RK4 for u_t + u u_x = nu u_xx with 2/3-rule dealiasing.

    Returns (steps // save_every + 1, n) snapshots including u0.
    """
    n = grid.n[0]
    k = 2 * np.pi / grid.lengths[0] * np.arange(n // 2 + 1)
    dealias = np.arange(n // 2 + 1) < (n // 3)
    ik = 1j * k

    def rhs(uh):
        u = np.fft.irfft(uh, n)
        return -0.5 * ik * np.fft.rfft(u * u) * dealias - nu * k ** 2 * uh

    uh = np.fft.rfft(u0)
    out = [np.asarray(u0, float).copy()]
    for it in range(1, steps + 1):
        k1 = rhs(uh)
        k2 = rhs(uh + 0.5 * dt * k1)
        k3 = rhs(uh + 0.5 * dt * k2)
        k4 = rhs(uh + dt * k3)
        uh = uh + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if it % save_every == 0:
            u = np.fft.irfft(uh, n)
            if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > 1e6:
                raise SolverInstability(f"DNS blew up at step {it}")
            out.append(u)
    return np.stack(out)


@dataclass
class ClosureData:
    fine_grid: GridSpec
    coarse_grid: GridSpec
    fine: np.ndarray       # (S, T, N_f)
    filtered: np.ndarray   # (S, T, N_f)
    coarse: np.ndarray     # (S, T, N_c)
    spec: SampleSpec | None = None

    def series(self) -> np.ndarray:
        """Coarse series with a trailing channel axis: (S, T, N_c, 1)."""
        return self.coarse[..., None]


def coarse_grid(spec: SampleSpec) -> GridSpec:
    return GridSpec((spec.grid.n[0] // spec.stride,), spec.grid.lengths, spec.grid.origin)


def closure_from_fine(fine: np.ndarray, spec: SampleSpec):
    filtered = box_filter(fine, spec.filter_width)
    return filtered, subsample(filtered, spec.stride)


def gen_burgers_closure(spec: SampleSpec, snapshots: int | None = None) -> ClosureData:
    """``count`` DNS trajectories, their box-filtered versions and the strided coarse series.

    Snapshots are ``dt`` apart; the DNS takes ``substeps`` steps between them.
    """
    steps = spec.snapshots if snapshots is None else snapshots
    fines = []
    for i in range(spec.count):
        u0 = random_ic(spec.grid, spec.ic_amplitude, spec.ic_modes, spec.seed + i)
        fines.append(burgers_dns(u0, spec.grid, spec.nu, spec.dt / spec.substeps,
                                 steps * spec.substeps, save_every=spec.substeps))
    fine = np.stack(fines)
    filtered, coarse = closure_from_fine(fine, spec)
    return ClosureData(spec.grid, coarse_grid(spec), fine, filtered, coarse, spec)


def gen_ood_pair(spec: SampleSpec, fine_snapshot: np.ndarray | None = None):
    """(filtered coarse IC, unfiltered subsampled IC) from the same fine field.

    Without ``fine_snapshot`` a fresh DNS is run from ``spec.seed`` for
    ``spec.snapshots`` steps and its last state is used.
    """
    if fine_snapshot is None:
        u0 = random_ic(spec.grid, spec.ic_amplitude, spec.ic_modes, spec.seed)
        n = spec.snapshots * spec.substeps
        fine_snapshot = burgers_dns(u0, spec.grid, spec.nu, spec.dt / spec.substeps, n, save_every=n)[-1]
    fine_snapshot = np.asarray(fine_snapshot, float)
    in_dist = subsample(box_filter(fine_snapshot, spec.filter_width), spec.stride)
    ood = subsample(fine_snapshot, spec.stride)
    return in_dist, ood


def generate(spec: SampleSpec):
    if spec.kind == "disk-laplacian":
        return gen_disk_pairs(spec)
    if spec.kind == "quarter-disk-poisson":
        return gen_poisson_pairs(spec)
    if spec.kind == "burgers-closure":
        return gen_burgers_closure(spec)
    return gen_ood_pair(spec)
