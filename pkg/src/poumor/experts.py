"""MOR-Physics operator experts and fixed experts.

A layer maps ``v -> skip(v) + F^-1( g . trunc(F(h(v))) )`` where ``h`` is a
pointwise MLP, ``F`` the unitary real-input transform over the spatial axes
and ``g`` a complex matrix per retained wavenumber.  Parameters live in a flat
``{name: ndarray}`` dict; complex tensors are stored as ``.re``/``.im`` pairs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .spectral import GridSpec, kgrid


@dataclass(frozen=True)
class MorLayerConfig:
    in_channels: int
    out_channels: int
    lift: int = 16
    hidden: tuple[int, ...] = (32, 32)
    keep: tuple[int, ...] | None = None
    g_mode: str = "tensor"
    g_hidden: tuple[int, ...] = (32,)
    skip: bool = True
    g_init_scale: float = 1.0  # 0 starts the layer as its skip path (pure correction models)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["g_hidden"] = list(self.g_hidden)
        d["keep"] = None if self.keep is None else list(self.keep)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (32, 32)))
        d["g_hidden"] = tuple(d.get("g_hidden", (32,)))
        if d.get("keep") is not None:
            d["keep"] = tuple(d["keep"])
        return cls(**d)


def mlp_init(rng, sizes, prefix, zero_last=False):
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        w = np.zeros((a, b)) if (last and zero_last) else rng.normal(0.0, np.sqrt(1.0 / a), (a, b))
        params[f"{prefix}.w{i}"] = w
        params[f"{prefix}.b{i}"] = np.zeros(b)
    return params


def mlp_apply(params: Mapping, x, prefix, depth):
    """tanh MLP with a linear head; acts on the last axis only (pointwise)."""
    for i in range(depth):
        x = dc.add(dc.matmul(x, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < depth - 1:
            x = dc.tanh(x)
    return x


class MorLayer:
    def __init__(self, cfg: MorLayerConfig, grid: GridSpec, name: str):
        self.cfg = cfg
        self.grid = grid
        self.name = name
        keep = cfg.keep if cfg.keep is not None else tuple(n // 4 for n in grid.n)
        if len(keep) != grid.d:
            raise ValueError(f"{name}: need one truncation limit per axis")
        for k, n in zip(keep, grid.n):
            if not 0 < k <= n // 2:
                raise ValueError(f"{name}: truncation {k} outside (0, {n // 2}]")
        self.keep = tuple(keep)
        idx = [dc.mode_indices(n, k, half=(i == grid.d - 1))
               for i, (n, k) in enumerate(zip(grid.n, self.keep))]
        self.modes_shape = tuple(len(ix) for ix in idx)
        self.n_modes = int(np.prod(self.modes_shape))
        if cfg.g_mode == "mlp":
            ks = kgrid(grid, half=True, channels=False)
            feats = []
            for i, (k, ix) in enumerate(zip(ks, idx)):
                kk = np.take(k, ix, axis=i)
                kmax = 2 * np.pi / grid.lengths[i] * (grid.n[i] // 2)
                feats.append(np.broadcast_to(kk / kmax, [len(j) for j in idx]))
            self.k_features = np.stack(feats, axis=-1)
        elif cfg.g_mode != "tensor":
            raise ValueError(f"{name}: unknown g_mode {cfg.g_mode!r}")
        self.skip_mode = "none"
        if cfg.skip:
            self.skip_mode = "identity" if cfg.in_channels == cfg.out_channels else "linear"

    @property
    def h_sizes(self):
        return [self.cfg.in_channels, *self.cfg.hidden, self.cfg.lift]

    def init(self, rng) -> dict[str, np.ndarray]:
        c, p = self.cfg, {}
        p.update(mlp_init(rng, self.h_sizes, f"{self.name}.h"))
        gshape = self.modes_shape + (c.out_channels, c.lift)
        if c.g_mode == "tensor":
            std = c.g_init_scale * np.sqrt(1.0 / self.n_modes)
            p[f"{self.name}.g.re"] = rng.normal(0.0, std, gshape)
            p[f"{self.name}.g.im"] = rng.normal(0.0, std, gshape)
        else:
            sizes = [self.grid.d, *c.g_hidden, 2 * c.out_channels * c.lift]
            p.update(mlp_init(rng, sizes, f"{self.name}.gnet"))
            last = f"{self.name}.gnet.w{len(sizes) - 2}"
            p[last] = c.g_init_scale * p[last]
        if self.skip_mode == "linear":
            p[f"{self.name}.skip"] = rng.normal(0.0, np.sqrt(1.0 / c.in_channels),
                                                (c.in_channels, c.out_channels))
        return p

    def g(self, params):
        c = self.cfg
        if c.g_mode == "tensor":
            return dc.complex_(params[f"{self.name}.g.re"], params[f"{self.name}.g.im"])
        depth = len(c.g_hidden) + 1
        out = mlp_apply(params, self.k_features, f"{self.name}.gnet", depth)
        re, im = dc.split(out, [c.out_channels * c.lift] * 2, axis=-1)
        shape = self.modes_shape + (c.out_channels, c.lift)
        return dc.complex_(dc.reshape(re, shape), dc.reshape(im, shape))

    def __call__(self, params: Mapping, v):
        """v: (B, n_1..n_d, in_channels) -> (B, n_1..n_d, out_channels)."""
        c, grid = self.cfg, self.grid
        vv = dc.value(v)
        if vv.shape[-1] != c.in_channels:
            raise dc.ShapeError(f"{self.name}: expected {c.in_channels} channels, got {vv.shape[-1]}")
        if not np.all(np.isfinite(vv)):
            raise FloatingPointError(f"{self.name}: NaN in layer input")
        axes = grid.axes()
        w = mlp_apply(params, v, f"{self.name}.h", len(self.h_sizes) - 1)
        spec = dc.truncate(dc.rfft(w, axes), self.keep, axes, grid.n)
        letters = "xyz"[: grid.d]
        mixed = dc.einsum(f"{letters}oi,b{letters}i->b{letters}o", self.g(params), spec)
        y = dc.irfft(dc.pad_modes(mixed, self.keep, axes, grid.n), grid.n, axes)
        if self.skip_mode == "identity":
            y = dc.add(y, v)
        elif self.skip_mode == "linear":
            y = dc.add(y, dc.matmul(v, params[f"{self.name}.skip"]))
        return y


@dataclass
class ExpertConfig:
    layers: list[MorLayerConfig] = field(default_factory=list)

    @property
    def in_channels(self):
        return self.layers[0].in_channels

    @property
    def out_channels(self):
        return self.layers[-1].out_channels

    def to_dict(self):
        return {"kind": "mor", "layers": [l.to_dict() for l in self.layers]}


def expert_config(in_channels: int, out_channels: int, width: int = 8, depth: int = 2,
                  lift: int | None = None, **layer_kw) -> ExpertConfig:
    """Stack of ``depth`` layers: in -> width -> ... -> out."""
    chans = [in_channels] + [width] * (depth - 1) + [out_channels]
    lift = lift if lift is not None else width
    return ExpertConfig([MorLayerConfig(a, b, lift=lift, **layer_kw)
                         for a, b in zip(chans[:-1], chans[1:])])


class MorExpert:
    kind = "mor"

    def __init__(self, cfg: ExpertConfig, grid: GridSpec, name: str):
        for a, b in zip(cfg.layers[:-1], cfg.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(f"{name}: layer channels {a.out_channels} -> {b.in_channels} do not chain")
        self.cfg = cfg
        self.name = name
        self.layers = [MorLayer(l, grid, f"{name}.l{i}") for i, l in enumerate(cfg.layers)]

    @property
    def out_channels(self):
        return self.cfg.out_channels

    def init(self, rng) -> dict[str, np.ndarray]:
        p = {}
        for layer in self.layers:
            p.update(layer.init(rng))
        return p

    def __call__(self, params: Mapping, u):
        for layer in self.layers:
            u = layer(params, u)
        return u

    def to_dict(self):
        return self.cfg.to_dict()


class ZeroExpert:
    """Fixed expert that returns zeros for any input; it has no parameters."""

    kind = "zero"

    def __init__(self, out_channels: int, name: str = "zero"):
        self.out_channels = out_channels
        self.name = name

    def init(self, rng) -> dict[str, np.ndarray]:
        return {}

    def __call__(self, params: Mapping, u):
        return np.zeros(dc.value(u).shape[:-1] + (self.out_channels,))

    def to_dict(self):
        return {"kind": "zero", "out_channels": self.out_channels}


def zero_expert(u, out_channels: int | None = None):
    shape = dc.value(u).shape
    return np.zeros(shape[:-1] + ((shape[-1] if out_channels is None else out_channels),))
