"""Partition-of-unity mixture of operator experts, probabilistic head and rollout."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from . import spectral
from .experts import ExpertConfig, MorExpert, MorLayerConfig, ZeroExpert
from .gating import FixedGates, GatingNetwork, check_partition
from .spectral import GridSpec

BLOWUP = 1e6


class SolverBlowup(FloatingPointError):
    pass


@dataclass(frozen=True)
class KnownSolver:
    kind: str = "none"  # none | burgers1d | chorin2d
    nu: float = 0.0
    dt: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "burgers1d", "chorin2d"):
            raise ValueError(f"unknown solver kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "nu": self.nu, "dt": self.dt}


def known_solver_step(u, grid: GridSpec, solver: KnownSolver):
    """One explicit Euler step of the declared known physics."""
    if solver.kind == "none" or solver.dt == 0.0:
        return u
    if solver.kind == "burgers1d":
        out = spectral.burgers_step(u, grid, solver.nu, solver.dt)
    else:
        out = spectral.chorin_euler_step(u, grid, solver.nu, solver.dt)
    if np.max(np.abs(dc.value(out))) > BLOWUP:
        raise SolverBlowup(f"known solver blew up (|u| > {BLOWUP:g})")
    return out


def squared_softplus(rho):
    """sigma^2 = log(1 + e^rho)^2."""
    return dc.square(dc.softplus(rho))


class POUModel:
    """(P u)(x) = sum_i G_i(x) N_i(u)(x).

    ``channels`` is the number of physical channels m.  With the
    probabilistic head experts see [mu, sigma^2] (2m channels) and emit
    [mu, rho] (2m channels).
    """

    def __init__(self, grid: GridSpec, gating, experts: Sequence, channels: int,
                 out_channels: int | None = None, head: str = "deterministic",
                 solver: KnownSolver | None = None):
        if head not in ("deterministic", "probabilistic"):
            raise ValueError(f"unknown head {head!r}")
        self.grid = grid
        self.gating = gating
        self.experts = list(experts)
        self.channels = channels
        self.out_channels = channels if out_channels is None else out_channels
        self.head = head
        self.solver = solver or KnownSolver()
        if gating.n_experts != len(self.experts):
            raise ValueError(f"gating has {gating.n_experts} outputs for {len(self.experts)} experts")
        want = self.expert_out_channels
        for e in self.experts:
            if e.out_channels != want:
                raise ValueError(f"expert {e.name} emits {e.out_channels} channels, expected {want}")

    @property
    def probabilistic(self) -> bool:
        return self.head == "probabilistic"

    @property
    def expert_in_channels(self):
        return 2 * self.channels if self.probabilistic else self.channels

    @property
    def expert_out_channels(self):
        return 2 * self.out_channels if self.probabilistic else self.out_channels

    def init(self, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = dict(self.gating.init(rng))
        for e in self.experts:
            params.update(e.init(rng))
        return params

    # ------------------------------------------------------------------ mixture
    def gates(self, params: Mapping, gates=None):
        if gates is not None:
            return check_partition(gates, len(self.experts))
        return self.gating(params)

    def apply_pou(self, params: Mapping, u, gates=None):
        """Pointwise convex combination of expert outputs; u is (B, n.., C)."""
        G = self.gates(params, gates)
        out = None
        for i, expert in enumerate(self.experts):
            if isinstance(expert, ZeroExpert):
                continue
            gi = dc.getitem(G, (Ellipsis, slice(i, i + 1)))
            term = dc.mul(gi, expert(params, u))
            out = term if out is None else dc.add(out, term)
        if out is None:
            shape = dc.value(u).shape[:-1] + (self.expert_out_channels,)
            return np.zeros(shape)
        return out

    def predict_probabilistic(self, params: Mapping, mu, var, gates=None):
        """Returns (mu, sigma^2) from the mixture's (mu, rho) channels."""
        if not self.probabilistic:
            raise ValueError("model has a deterministic head")
        out = self.apply_pou(params, dc.concat([mu, var], axis=-1), gates)
        m = self.out_channels
        mu_out, rho = dc.split(out, [m, m], axis=-1)
        return mu_out, squared_softplus(rho)

    # ------------------------------------------------------------------ time stepping
    def known_solver_step(self, u):
        return known_solver_step(u, self.grid, self.solver)

    def step(self, params: Mapping, state, gates=None):
        """u_{n+1} = P(M u_n); probabilistic states are (mu, var) pairs."""
        if self.probabilistic:
            mu, var = state
            return self.predict_probabilistic(params, self.known_solver_step(mu), var, gates)
        return self.apply_pou(params, self.known_solver_step(state), gates)

    def rollout(self, params: Mapping, u0, p: int, gates=None) -> list:
        if p < 1:
            raise ValueError("rollout needs p >= 1")
        states = [u0]
        for _ in range(p):
            states.append(self.step(params, states[-1], gates))
        return states

    def initial_state(self, u0):
        """Window initial condition: (u, sigma^2 = 0) for the probabilistic head."""
        if self.probabilistic:
            return (u0, np.zeros_like(dc.value(u0)))
        return u0

    # ------------------------------------------------------------------ config
    def to_config(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "channels": self.channels,
            "out_channels": self.out_channels,
            "head": self.head,
            "solver": self.solver.to_dict(),
            "gating": self.gating.to_dict(),
            "experts": [e.to_dict() for e in self.experts],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "POUModel":
        grid = GridSpec.from_dict(cfg["grid"])
        experts = []
        for i, e in enumerate(cfg["experts"]):
            if e["kind"] == "zero":
                experts.append(ZeroExpert(e["out_channels"], name=f"zero{i}"))
            else:
                ec = ExpertConfig([MorLayerConfig.from_dict(l) for l in e["layers"]])
                experts.append(MorExpert(ec, grid, f"e{i}"))
        g = cfg["gating"]
        if g["kind"] == "mlp":
            gating = GatingNetwork(grid, g["n_experts"], tuple(g["hidden"]))
        else:
            gating = FixedGates(grid, g["n_experts"])
        return cls(grid, gating, experts, cfg["channels"], cfg.get("out_channels"),
                   cfg["head"], KnownSolver(**cfg["solver"]))


def build_model(grid: GridSpec, channels: int, n_learned: int = 2, zero_expert: bool = True,
                out_channels: int | None = None, head: str = "deterministic",
                solver: KnownSolver | None = None, width: int = 8, depth: int = 2,
                lift: int | None = None, gating: str = "mlp", gate_hidden=(64, 64),
                **layer_kw) -> POUModel:
    """Convenience constructor: learned MOR experts (+ zero expert) under one gate."""
    from .experts import expert_config

    out_channels = channels if out_channels is None else out_channels
    mult = 2 if head == "probabilistic" else 1
    experts = []
    for i in range(n_learned):
        cfg = expert_config(mult * channels, mult * out_channels, width=width, depth=depth,
                            lift=lift, **layer_kw)
        experts.append(MorExpert(cfg, grid, f"e{i}"))
    if zero_expert:
        experts.append(ZeroExpert(mult * out_channels, name=f"zero{len(experts)}"))
    if gating == "mlp":
        g = GatingNetwork(grid, len(experts), gate_hidden)
    else:
        g = FixedGates(grid, len(experts))
    return POUModel(grid, g, experts, channels, out_channels, head, solver)


def make_windows(series: np.ndarray, window: int, stride: int | None = None):
    """Non-overlapping windows (start, initial value, targets[start+1 : start+window+1])."""
    if window <= 0:
        raise ValueError("window length must be positive")
    stride = window if stride is None else stride
    series = np.asarray(series)
    if series.shape[0] < window + 1:
        raise ValueError(f"series of length {series.shape[0]} is shorter than one window ({window + 1})")
    out = []
    for m in range(0, series.shape[0] - window, stride):
        out.append((m, series[m], series[m + 1: m + window + 1]))
    return out
