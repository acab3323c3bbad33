"""Smooth periodic extension of functions known on an embedded domain.

The extension minimises the H1 seminorm on the torus subject to matching the
given values on the domain.  The first-order conditions form the symmetric
saddle system

    [ F^-1 |k|^2 F   R^T ] [u_e   ]   [0]
    [ R              0   ] [lambda] = [u]

which is solved matrix-free through its normal equations with conjugate
gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spectral
from .spectral import GridSpec


class ExtensionError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


@dataclass
class DomainMask:
    grid: GridSpec
    indicator: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.indicator = np.asarray(self.indicator, dtype=bool)
        if self.indicator.shape != self.grid.n:
            raise ValueError(f"mask shape {self.indicator.shape} does not match grid {self.grid.n}")

    @property
    def count(self) -> int:
        return int(self.indicator.sum())

    @property
    def nontrivial(self) -> bool:
        return 0 < self.count < self.indicator.size

    def boundary(self) -> np.ndarray:
        """Points of X with at least one axis neighbour outside X (periodic)."""
        ind = self.indicator
        edge = np.zeros_like(ind)
        for ax in range(ind.ndim):
            for shift in (1, -1):
                edge |= ~np.roll(ind, shift, axis=ax)
        return ind & edge


@dataclass
class ExtensionResult:
    values: np.ndarray
    seminorm: float
    iterations: int
    residual: float
    constraint_residual: float
    history: list = field(default_factory=list, repr=False)

    def diagnostics(self) -> dict:
        return {"seminorm": self.seminorm, "iterations": self.iterations,
                "residual": self.residual, "constraint_residual": self.constraint_residual}


def restrict(values: np.ndarray, mask: DomainMask) -> np.ndarray:
    values = np.asarray(values)
    if values.shape[: mask.grid.d] != mask.grid.n:
        raise ValueError(f"field shape {values.shape} does not match mask {mask.grid.n}")
    return values[mask.indicator]


def extend_transpose(w: np.ndarray, mask: DomainMask) -> np.ndarray:
    w = np.asarray(w)
    if w.shape[0] != mask.count:
        raise ValueError(f"expected {mask.count} masked values, got {w.shape[0]}")
    out = np.zeros(mask.grid.n + w.shape[1:], dtype=w.dtype)
    out[mask.indicator] = w
    return out


def stiffness(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    """F^-1 |k|^2 F u for a scalar field (i.e. -Laplacian)."""
    axes = tuple(range(grid.d))
    k2 = spectral.ksquared(grid, half=True, channels=False)
    return np.fft.irfftn(np.fft.rfftn(u, axes=axes) * k2, s=grid.n, axes=axes)


def h1_seminorm(u: np.ndarray, grid: GridSpec) -> float:
    """Discrete sum over modes of |k|^2 |F u|^2 (unitary F)."""
    axes = tuple(range(grid.d))
    uh = np.fft.fftn(u, axes=axes, norm="ortho")
    k2 = spectral.ksquared(grid, half=False, channels=False)
    return float(np.sum(k2 * np.abs(uh) ** 2))


def apply_saddle_operator(q: np.ndarray, mask: DomainMask, scale: float = 1.0) -> np.ndarray:
    """A q for q = [u_e (flattened grid); lambda (|X|)].

    ``scale`` multiplies both constraint blocks; it changes lambda but not u_e.
    """
    grid = mask.grid
    n = grid.size
    ue = q[:n].reshape(grid.n)
    lam = q[n:]
    top = stiffness(ue, grid) + scale * extend_transpose(lam, mask)
    bottom = scale * restrict(ue, mask)
    return np.concatenate([top.ravel(), bottom])


def dense_saddle_matrix(mask: DomainMask, scale: float = 1.0) -> np.ndarray:
    """Assemble A column by column (small grids only; used as a check)."""
    size = mask.grid.size + mask.count
    A = np.empty((size, size))
    e = np.zeros(size)
    for j in range(size):
        e[j] = 1.0
        A[:, j] = apply_saddle_operator(e, mask, scale)
        e[j] = 0.0
    return A


def _constant_trace(u: np.ndarray, mask: DomainMask):
    full = extend_transpose(u, mask)
    trace = full[mask.boundary()]
    if trace.size and np.ptp(trace) <= 1e-12:
        return float(trace[0])
    return None


def solve_smooth_extension(u: np.ndarray, mask: DomainMask, tol: float = 1e-10,
                           max_iters: int | None = None, constraint_tol: float = 1e-6,
                           preconditioner: bool = False, scale: float | None = None,
                           shortcut: bool = True, method: str = "normal") -> ExtensionResult:
    """Minimum-H1-seminorm extension of ``u`` (values on X in scan order) to the torus.

    ``method="normal"`` runs CG on the normal equations of the saddle system.
    ``method="reduced"`` eliminates the constraint and runs CG on the
    stiffness restricted to the complement of X; same minimiser, far fewer
    iterations, used for bulk preprocessing.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = mask.grid
    u = np.asarray(u, dtype=float)
    if u.shape != (mask.count,):
        raise ValueError(f"expected {mask.count} values on X, got shape {u.shape}")
    if shortcut:
        c = _constant_trace(u, mask)
        if c is not None:
            full = np.full(grid.n, c)
            full[mask.indicator] = u
            return ExtensionResult(full, h1_seminorm(full, grid), 0, 0.0,
                                   float(np.max(np.abs(restrict(full, mask) - u), initial=0.0)))
    n = grid.size
    if max_iters is None:
        max_iters = 10 * n
    if method == "reduced":
        return _solve_reduced(u, mask, tol, max_iters, constraint_tol)
    if method != "normal":
        raise ValueError(f"unknown extension method {method!r}")
    if scale is None:
        # balance the constraint rows against the stiffness spectrum
        scale = 0.25 * float(spectral.ksquared(grid, channels=False).max())

    def A(q):
        return apply_saddle_operator(q, mask, scale)

    b = np.concatenate([np.zeros(n), scale * u])
    rhs = A(b)
    q = np.concatenate([extend_transpose(u, mask).ravel(), np.zeros(mask.count)])
    if preconditioner:
        diag = _normal_diagonal(mask, scale)
        minv = 1.0 / diag
    else:
        minv = None
    q, iters, history = _cg(lambda x: A(A(x)), rhs, q, tol, max_iters, minv)
    ue = q[:n].reshape(grid.n)
    cres = float(np.max(np.abs(restrict(ue, mask) - u)))
    if history[-1] > tol or cres > constraint_tol:
        raise ExtensionError(
            f"CG did not converge in {iters} iterations (residual {history[-1]:.3e}, "
            f"constraint {cres:.3e})", history)
    return ExtensionResult(ue, h1_seminorm(ue, grid), iters, history[-1], cres, history)


def _solve_reduced(u, mask, tol, max_iters, constraint_tol):
    grid = mask.grid
    comp = ~mask.indicator
    base = extend_transpose(u, mask)

    def op(w):
        full = np.zeros(grid.n)
        full[comp] = w
        return stiffness(full, grid)[comp]

    rhs = -stiffness(base, grid)[comp]
    w, iters, history = _cg(op, rhs, np.zeros(int(comp.sum())), tol, max_iters)
    if history[-1] > tol:
        raise ExtensionError(f"CG did not converge in {iters} iterations "
                             f"(residual {history[-1]:.3e})", history)
    ue = base.copy()
    ue[comp] = w
    cres = float(np.max(np.abs(restrict(ue, mask) - u)))
    return ExtensionResult(ue, h1_seminorm(ue, grid), iters, history[-1], cres, history)


def _normal_diagonal(mask: DomainMask, scale: float) -> np.ndarray:
    # diag(A^2) = row norms of the symmetric A
    grid = mask.grid
    k2 = spectral.ksquared(grid, channels=False)
    n = grid.size
    # every column of the circulant stiffness has the same norm: sum |k|^4 / n
    top = np.full(n, np.sum(k2 ** 2) / n) + scale ** 2 * mask.indicator.ravel()
    bottom = np.full(mask.count, scale ** 2)
    return np.concatenate([top, bottom])


def _cg(op, b, x0, tol, max_iters, minv=None):
    """Conjugate gradients on an SPD operator; relative residual stopping."""
    bnorm = np.linalg.norm(b) or 1.0
    x = x0.copy()
    r = b - op(x)
    z = r if minv is None else minv * r
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    it = 0
    while history[-1] > tol and it < max_iters:
        Ap = op(p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        history.append(np.linalg.norm(r) / bnorm)
        z = r if minv is None else minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, it, history


def zero_padded(u: np.ndarray, mask: DomainMask) -> np.ndarray:
    return extend_transpose(np.asarray(u, dtype=float), mask)


def burgers_action(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Pseudo-spectral u . grad u for a scalar field: sum_i u d_i u."""
    u = np.asarray(values, dtype=float)
    grad = spectral.spectral_gradient(u[..., None], grid)
    return (u[..., None] * grad).sum(axis=-1)


def gibbs_metric(values: np.ndarray, mask: DomainMask, cutoff: int | None = None) -> float:
    """Fraction of spectral energy above ``cutoff`` for the field windowed to X.

    The field is restricted to X (zero outside) so only the behaviour on the
    domain is scored; the default cutoff is a quarter of the smallest axis
    resolution.  Lower means smoother.
    """
    grid = mask.grid
    if cutoff is None:
        cutoff = min(grid.n) // 4
    windowed = np.where(mask.indicator, values, 0.0)
    # smooth taper inside X so the window edge itself does not dominate
    windowed = windowed * _interior_taper(mask)
    shells, energy = spectral.energy_spectrum(windowed, grid)
    total = energy.sum()
    if total == 0:
        return 0.0
    return float(energy[shells > cutoff].sum() / total)


def _interior_taper(mask: DomainMask, width: int = 3) -> np.ndarray:
    # distance (in grid steps, city-block, periodic) from the complement, clipped
    ind = mask.indicator
    dist = np.where(ind, np.inf, 0.0)
    frontier = ~ind
    for step in range(1, width + 1):
        grown = frontier.copy()
        for ax in range(ind.ndim):
            grown |= np.roll(frontier, 1, axis=ax) | np.roll(frontier, -1, axis=ax)
        newly = grown & ~frontier
        dist[newly] = step
        frontier = grown
    dist = np.minimum(dist, width)
    return np.sin(0.5 * np.pi * dist / width) ** 2
