"""Torus grids, wavenumbers, spectral derivatives and explicit pseudo-spectral steps.

Arrays are channels-last: ``(*batch, n_1, ..., n_d, channels)``; the spatial
axes are passed explicitly where a batch dimension may be present.  The PDE
steps are written with :mod:`poumor.diffcore` ops so they run on plain arrays
or on tape nodes alike.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class GridSpec:
    n: tuple[int, ...]
    lengths: tuple[float, ...] = ()
    origin: tuple[float, ...] = ()

    def __post_init__(self):
        n = tuple(int(k) for k in self.n)
        if not 1 <= len(n) <= 3:
            raise ValueError(f"grid dimension must be 1, 2 or 3, got {len(n)}")
        for k in n:
            if k < 4 or k % 2:
                raise ValueError(f"points per axis must be even and >= 4, got {k}")
        lengths = tuple(float(x) for x in self.lengths) or (2 * math.pi,) * len(n)
        origin = tuple(float(x) for x in self.origin) or (0.0,) * len(n)
        if len(lengths) != len(n) or len(origin) != len(n):
            raise ValueError("lengths/origin must match the number of axes")
        if any(x <= 0 for x in lengths):
            raise ValueError("periods must be positive")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "origin", origin)

    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.n))

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    def axes(self, batched: bool = True) -> tuple[int, ...]:
        off = 1 if batched else 0
        return tuple(range(off, off + self.d))

    def coords(self) -> list[np.ndarray]:
        """Physical coordinates, one meshgrid array per axis (indexing='ij')."""
        pts = [o + L * np.arange(n) / n for o, L, n in zip(self.origin, self.lengths, self.n)]
        return np.meshgrid(*pts, indexing="ij")

    def angles(self) -> list[np.ndarray]:
        """Torus angles in [0, 2pi) of every grid point."""
        return [2 * np.pi * (c - o) / L for c, o, L in zip(self.coords(), self.origin, self.lengths)]

    def to_dict(self) -> dict:
        return {"n": list(self.n), "lengths": list(self.lengths), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["n"]), tuple(d.get("lengths", ())), tuple(d.get("origin", ())))


@dataclass
class Field:
    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == self.grid.d:
            self.values = self.values[..., None]
        if self.values.shape[: self.grid.d] != self.grid.n:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.n}")
        if np.iscomplexobj(self.values):
            raise ValueError("fields are real in physical space")

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


def wavenumbers(grid: GridSpec) -> list[np.ndarray]:
    """Per-axis physical wavenumbers in FFT order (multiples of 2pi/L)."""
    return [2 * np.pi / L * np.fft.fftfreq(n, 1.0 / n) for n, L in zip(grid.n, grid.lengths)]


def kgrid(grid: GridSpec, half: bool = False, channels: bool = True) -> list[np.ndarray]:
    """Broadcastable wavenumber arrays for a spectrum laid out (n_1, ..., n_d[, 1]).

    With ``half`` the last axis holds the non-negative half of a real transform.
    """
    ks = wavenumbers(grid)
    if half:
        n, L = grid.n[-1], grid.lengths[-1]
        ks[-1] = 2 * np.pi / L * np.arange(n // 2 + 1)
    out = []
    for i, k in enumerate(ks):
        shape = [1] * grid.d + ([1] if channels else [])
        shape[i] = k.size
        out.append(k.reshape(shape))
    return out


def ksquared(grid: GridSpec, half: bool = False, channels: bool = True) -> np.ndarray:
    return sum(k * k for k in kgrid(grid, half, channels))


def truncate_modes(spectrum: np.ndarray, keep: Sequence[int], axes: Sequence[int] | None = None) -> np.ndarray:
    """Zero every full-FFT mode with |index| > keep_i on some axis (low-pass projection)."""
    spectrum = np.asarray(spectrum)
    if axes is None:
        axes = tuple(range(len(keep)))
    if len(axes) != len(keep):
        raise ValueError("one keep value per axis")
    mask = np.ones([spectrum.shape[a] for a in axes], dtype=bool)
    for i, (ax, k) in enumerate(zip(axes, keep)):
        n = spectrum.shape[ax]
        if k <= 0:
            raise ValueError(f"keep must be positive, got {k}")
        kept = np.zeros(n, dtype=bool)
        kept[dc.mode_indices(n, k)] = True
        shape = [1] * len(axes)
        shape[i] = n
        mask = mask & kept.reshape(shape)
    full = np.ones(spectrum.ndim, dtype=int)
    for i, ax in enumerate(axes):
        full[ax] = mask.shape[i]
    return spectrum * mask.reshape(full)


def _spatial_axes(grid, arr):
    # Field layout: spatial axes sit right before the channel axis
    nd = np.ndim(dc.value(arr))
    return tuple(range(nd - 1 - grid.d, nd - 1))


def spectral_gradient(u, grid: GridSpec):
    """Gradient of each channel; output channels ordered axis-major (d * m)."""
    axes = _spatial_axes(grid, u)
    shape = grid.n
    uh = dc.rfft(u, axes)
    parts = [dc.irfft(dc.mul(uh, 1j * k), shape, axes) for k in kgrid(grid, half=True)]
    return parts[0] if len(parts) == 1 else dc.concat(parts, axis=-1)


def spectral_divergence(w, grid: GridSpec):
    """Divergence of a field whose channels are (d * m), axis-major; returns m channels."""
    axes = _spatial_axes(grid, w)
    m = dc.value(w).shape[-1] // grid.d
    comps = dc.split(w, [m] * grid.d, axis=-1)
    acc = None
    for c, k in zip(comps, kgrid(grid, half=True)):
        term = dc.mul(dc.rfft(c, axes), 1j * k)
        acc = term if acc is None else dc.add(acc, term)
    return dc.irfft(acc, grid.n, axes)


def spectral_laplacian(u, grid: GridSpec):
    axes = _spatial_axes(grid, u)
    return dc.irfft(dc.mul(dc.rfft(u, axes), -ksquared(grid, half=True) + 0j), grid.n, axes)


def burgers_step(u, grid: GridSpec, nu: float, dt: float):
    """One explicit Euler step of u_t + u u_x = nu u_xx (1-D, channels-last)."""
    if grid.d != 1:
        raise ValueError("burgers_step is one-dimensional")
    _check_finite(u)
    axes = _spatial_axes(grid, u)
    (k,) = kgrid(grid, half=True)
    uh = dc.rfft(u, axes)
    ux = dc.irfft(dc.mul(uh, 1j * k), grid.n, axes)
    uxx = dc.irfft(dc.mul(uh, -(k * k) + 0j), grid.n, axes)
    rhs = dc.sub(dc.mul(u, ux), dc.scale(uxx, nu))
    return dc.sub(u, dc.scale(rhs, dt))


def chorin_euler_step(v, grid: GridSpec, nu: float, dt: float):
    """Explicit Euler step of incompressible Navier-Stokes with a Chorin projection.

    ``v`` has d velocity channels.  The advective flux is evaluated
    pseudo-spectrally, viscosity enters as ``nu*|k|^2``, and the updated
    velocity is projected onto divergence-free fields (the k = 0 mode is left
    unprojected).  For d = 1 this degenerates to :func:`burgers_step`.
    """
    if grid.d == 1:
        return burgers_step(v, grid, nu, dt)
    _check_finite(v)
    d = grid.d
    if dc.value(v).shape[-1] != d:
        raise ValueError(f"chorin_euler_step expects {d} velocity channels")
    axes = _spatial_axes(grid, v)
    ks = kgrid(grid, half=True, channels=False)
    k2 = sum(k * k for k in ks)
    comps = dc.split(v, [1] * d, axis=-1)
    vh = [dc.rfft(c, axes) for c in comps]
    # nonlinear term N_i = i k_j F(v_i v_j)
    new = []
    for i in range(d):
        acc = None
        for j in range(d):
            term = dc.mul(dc.rfft(dc.mul(comps[i], comps[j]), axes), 1j * ks[j][..., None])
            acc = term if acc is None else dc.add(acc, term)
        visc = dc.mul(vh[i], nu * k2[..., None] + 0j)
        new.append(dc.sub(vh[i], dc.scale(dc.add(acc, visc), dt)))
    projected = _project(new, ks, k2)
    return dc.concat([dc.irfft(p, grid.n, axes) for p in projected], axis=-1)


def _nyquist_free(ks):
    # the sign of k at a Nyquist index is ambiguous, so those modes cannot be
    # projected consistently with Hermitian symmetry; drop them
    keep = np.ones(np.broadcast_shapes(*(k.shape for k in ks)), dtype=bool)
    for k in ks:
        keep = keep & (np.abs(k) < np.max(np.abs(k)))
    return keep


def _project(vh, ks, k2):
    inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)[..., None]
    keep = _nyquist_free(ks)[..., None]
    kdotv = None
    for k, c in zip(ks, vh):
        term = dc.mul(c, k[..., None] + 0j)
        kdotv = term if kdotv is None else dc.add(kdotv, term)
    kdotv = dc.mul(kdotv, inv + 0j)
    return [dc.mul(dc.sub(c, dc.mul(kdotv, k[..., None] + 0j)), keep + 0j) for k, c in zip(ks, vh)]


def project_divergence_free(v, grid: GridSpec):
    axes = _spatial_axes(grid, v)
    ks = kgrid(grid, half=True, channels=False)
    k2 = sum(k * k for k in ks)
    comps = dc.split(v, [1] * grid.d, axis=-1)
    vh = [dc.rfft(c, axes) for c in comps]
    return dc.concat([dc.irfft(p, grid.n, axes) for p in _project(vh, ks, k2)], axis=-1)


def _check_finite(u):
    if not np.all(np.isfinite(dc.value(u))):
        raise FloatingPointError("NaN or inf in solver input")


def shell_index(grid: GridSpec) -> np.ndarray:
    """Integer |k| shell of every full-FFT mode, in units of the fundamental."""
    k0 = min(2 * np.pi / L for L in grid.lengths)
    kmag = np.sqrt(ksquared(grid, half=False, channels=False))
    return np.rint(kmag / k0).astype(int)


def energy_spectrum(values: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Shell-binned energy of a (n_1, ..., n_d, m) field.

    Energies are normalised per grid point, so the shell sum equals
    ``mean(u**2)`` summed over channels.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == grid.d:
        values = values[..., None]
    uh = np.fft.fftn(values, axes=tuple(range(grid.d)), norm="ortho")
    power = (np.abs(uh) ** 2).sum(axis=-1) / grid.size
    shells = shell_index(grid)
    energy = np.bincount(shells.ravel(), weights=power.ravel())
    return np.arange(energy.size), energy


def rms_fluctuations(series: np.ndarray, grid: GridSpec, wall_axis: int = 0) -> np.ndarray:
    """RMS of (value - time mean) per wall-normal bin and channel.

    ``series`` has shape (T, n_1, ..., n_d, m); returns (n_wall, m).
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == grid.d + 1:
        series = series[..., None]
    if series.shape[0] < 2:
        raise ValueError("rms_fluctuations needs at least two snapshots")
    fluct = series - series.mean(axis=0, keepdims=True)
    other = tuple(1 + a for a in range(grid.d) if a != wall_axis)
    ms = (fluct ** 2).mean(axis=(0,) + other)
    return np.sqrt(ms)


def write_spectrum_csv(path, shells, energy):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shell", "energy"])
        for s, e in zip(shells, energy):
            w.writerow([int(s), repr(float(e))])


def write_rms_csv(path, rms: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "channel", "rms"])
        for b in range(rms.shape[0]):
            for c in range(rms.shape[1]):
                w.writerow([b, c, repr(float(rms[b, c]))])
