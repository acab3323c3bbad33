"""Least-squares and mean-field variational training of POU models."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .model import POUModel, make_windows

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "loss", "r2", "wmape", "kl", "loglik", "lr")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, msg, params=None, log_rows=None, step=0):
        super().__init__(msg)
        self.params = params
        self.log_rows = log_rows or []
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 1.25e-4
    batch_size: int = 1
    warmup_steps: int = 0
    clip_norm: float = 1.0
    prior_std: float = 1.0
    window: int = 8
    seed: int = 0
    epochs: int = 1
    init_rho: float = -6.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gate_lr_scale: float = 1.0
    schedule: str = "constant"  # constant | cosine (anneal to zero over decay_steps after warmup)
    decay_steps: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "clip_norm", "prior_std", "window", "epochs", "gate_lr_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train config: {name} must be positive")
        if self.warmup_steps < 0:
            raise ValueError("train config: warmup_steps must be nonnegative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"train config: unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and self.decay_steps <= 0:
            raise ValueError("train config: cosine schedule needs decay_steps > 0")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- datasets

@dataclass
class PairDataset:
    """Input/target fields (N, n.., C) with the domain mask (N, n..) or (n..)."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    gates: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if len(self.inputs) == 0:
            raise ValueError("empty dataset")
        if self.inputs.shape[:-1] != self.targets.shape[:-1]:
            raise dc.ShapeError(f"inputs {self.inputs.shape} and targets {self.targets.shape} differ")

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx):
        mask = self.mask[idx] if self.mask.ndim == self.inputs.ndim - 1 else self.mask
        gates = None if self.gates is None else self.gates[idx]
        return self.inputs[idx], self.targets[idx], mask, gates


@dataclass
class SeriesDataset:
    """One or more trajectories (S, T, n.., m) cut into non-overlapping windows."""

    series: np.ndarray
    window: int = 8
    mask: np.ndarray | None = None
    windows: list = field(init=False, repr=False)

    def __post_init__(self):
        s = np.asarray(self.series, dtype=float)
        self.series = s
        self.windows = []
        for traj in s:
            for m, u0, tgt in make_windows(traj, self.window):
                self.windows.append((u0, tgt))
        if not self.windows:
            raise ValueError("empty dataset")

    def __len__(self):
        return len(self.windows)

    def batch(self, idx):
        u0 = np.stack([self.windows[i][0] for i in idx])
        tgt = np.stack([self.windows[i][1] for i in idx], axis=1)  # (P, B, n.., m)
        mask = np.ones(u0.shape[:-1], bool) if self.mask is None else np.broadcast_to(self.mask, u0.shape[:-1])
        return u0, tgt, mask


# ---------------------------------------------------------------- losses

def loss_least_squares(model: POUModel, params: Mapping, inputs, targets, mask, gates=None):
    """Squared error summed over masked points (all channels)."""
    pred = model.apply_pou(params, inputs, gates)
    pv = dc.value(pred)
    if pv.shape != np.shape(targets):
        raise dc.ShapeError(f"least-squares: prediction {pv.shape} vs target {np.shape(targets)}")
    w = np.asarray(mask, dtype=float)[..., None]
    return dc.sum(dc.mul(dc.square(dc.sub(pred, targets)), w)), pred


def gaussian_loglik(targets, mu, var, mask):
    """sum over masked points of -1/2 [log(2 pi var) + (t - mu)^2 / var]."""
    vv = dc.value(var)
    m = np.broadcast_to(np.asarray(mask, dtype=bool)[..., None], np.shape(vv))
    if np.any(vv[m] <= 0):
        raise ValueError("gaussian_loglik: nonpositive variance on the domain")
    w = m.astype(float)
    safe_var = dc.add(dc.mul(var, w), 1.0 - w)
    resid = dc.square(dc.sub(targets, mu))
    terms = dc.add(dc.log(dc.scale(safe_var, 2 * np.pi)), dc.div(resid, safe_var))
    return dc.scale(dc.sum(dc.mul(terms, w)), -0.5)


def kl_gaussian(mu, rho, prior_std: float = 1.0):
    """KL(q || N(0, s0^2)) summed over the entries of each (mu, rho) pair.

    ``mu``/``rho`` are dicts of arrays or Nodes; sigma = softplus(rho).
    """
    if prior_std <= 0:
        raise ValueError("prior std must be positive")
    s0 = float(prior_std)
    total = 0.0
    for name in mu:
        sigma = dc.softplus(rho[name])
        term = dc.sub(dc.scale(dc.add(dc.square(sigma), dc.square(mu[name])), 1.0 / (2 * s0 * s0)),
                      dc.log(dc.scale(sigma, 1.0 / s0)))
        n = np.size(dc.value(mu[name]))
        part = dc.sub(dc.sum(term), 0.5 * n)
        total = dc.add(total, part)
    return total


def _leaf(v):
    return v if isinstance(v, dc.Node) else np.asarray(v, dtype=float)


class VariationalParams:
    """Independent Gaussian posterior per real scalar parameter.

    Complex weights are already stored as ``.re``/``.im`` real tensors, so
    each one contributes two (mu, rho) pairs.
    """

    def __init__(self, mu: Mapping[str, np.ndarray], rho: Mapping[str, np.ndarray]):
        self.mu = {k: _leaf(v) for k, v in mu.items()}
        self.rho = {k: _leaf(v) for k, v in rho.items()}
        if self.mu.keys() != self.rho.keys():
            raise ValueError("mu and rho must cover the same parameters")

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray], init_rho: float = -6.0):
        return cls({k: v.copy() for k, v in params.items()},
                   {k: np.full_like(v, init_rho) for k, v in params.items()})

    def flat(self) -> dict[str, np.ndarray]:
        out = {f"mu:{k}": v for k, v in self.mu.items()}
        out.update({f"rho:{k}": v for k, v in self.rho.items()})
        return out

    @classmethod
    def from_flat(cls, flat: Mapping[str, np.ndarray]):
        mu = {k[3:]: v for k, v in flat.items() if k.startswith("mu:")}
        rho = {k[4:]: v for k, v in flat.items() if k.startswith("rho:")}
        return cls(mu, rho)

    def count(self) -> int:
        return int(sum(np.size(dc.value(v)) for v in [*self.mu.values(), *self.rho.values()]))

    def sigma(self) -> dict[str, np.ndarray]:
        return {k: np.logaddexp(0.0, dc.value(v)) for k, v in self.rho.items()}


def sample_weights(mu: Mapping, rho: Mapping, rng: np.random.Generator | int | None = 0, eps=None):
    """theta = mu + softplus(rho) * eps with eps ~ N(0, 1); works on arrays or Nodes."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    theta = {}
    for name in mu:
        e = eps[name] if eps is not None else rng.standard_normal(np.shape(dc.value(mu[name])))
        theta[name] = dc.add(mu[name], dc.mul(dc.softplus(rho[name]), e))
    return theta


def rollout_loglik(model: POUModel, params, u0, targets, mask, gates=None):
    """Gaussian log-likelihood of targets (P, B, n.., m) along a P-step rollout."""
    state = model.initial_state(u0)
    total = 0.0
    mus = []
    for t in range(targets.shape[0]):
        state = model.step(params, state, gates)
        mu, var = state
        total = dc.add(total, gaussian_loglik(targets[t], mu, var, mask))
        mus.append(dc.value(mu))
    return total, np.stack(mus)


def rollout_sse(model: POUModel, params, u0, targets, mask, gates=None):
    state = u0
    total = 0.0
    preds = []
    w = np.asarray(mask, float)[..., None]
    for t in range(targets.shape[0]):
        state = model.step(params, state, gates)
        total = dc.add(total, dc.sum(dc.mul(dc.square(dc.sub(state, targets[t])), w)))
        preds.append(dc.value(state))
    return total, np.stack(preds)


def elbo_window(model: POUModel, mu, rho, u0, targets, mask, prior_std, n_windows, rng, eps=None):
    """One-sample ELBO estimate for a (batch of) window(s).

    KL is scaled by (windows in batch) / (total windows) so an epoch counts it once.
    """
    theta = sample_weights(mu, rho, rng, eps)
    ll, mus = rollout_loglik(model, theta, u0, targets, mask)
    kl = kl_gaussian(mu, rho, prior_std)
    b = np.shape(u0)[0]
    elbo = dc.sub(ll, dc.scale(kl, b / n_windows) if isinstance(kl, dc.Node) else kl * b / n_windows)
    return elbo, ll, kl, mus


# ---------------------------------------------------------------- metrics

def metrics_r2_wmape(pred, target, mask=None) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, bool)[..., None], pred.shape) if np.ndim(mask) == pred.ndim - 1 \
            else np.broadcast_to(np.asarray(mask, bool), pred.shape)
        pred, target = pred[m], target[m]
    if pred.size == 0:
        raise ValueError("metrics need a nonempty mask")
    sse = np.sum((pred - target) ** 2)
    sst = np.sum((target - target.mean()) ** 2)
    r2 = float(1.0 - sse / sst) if sst > 0 else float("nan")
    denom = np.sum(np.abs(target))
    wmape = float(np.sum(np.abs(pred - target)) / denom) if denom > 0 else float("nan")
    return r2, wmape


def relative_rmse(pred, target, mask=None) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, bool)[..., None], pred.shape) if np.ndim(mask) == pred.ndim - 1 \
            else np.broadcast_to(np.asarray(mask, bool), pred.shape)
        pred, target = pred[m], target[m]
    return float(np.sqrt(np.sum((pred - target) ** 2) / np.sum(target ** 2)))


# ---------------------------------------------------------------- optimiser

# parameters of the gating network (plain and variational names)
GATE_PREFIX = ("gate.", "mu:gate.", "rho:gate.")


class Adam:
    def __init__(self, cfg: TrainConfig, state: Mapping | None = None):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        if state:
            self.load_state(state)

    def lr(self, step: int) -> float:
        c = self.cfg
        if c.warmup_steps > 0 and step < c.warmup_steps:
            return c.lr * (step + 1) / c.warmup_steps
        if c.schedule == "cosine":
            frac = min(1.0, (step - c.warmup_steps) / c.decay_steps)
            return c.lr * 0.5 * (1.0 + np.cos(np.pi * frac))
        return c.lr

    def update(self, params: dict, grads: Mapping, step: int) -> float:
        c = self.cfg
        lr = self.lr(step)
        self.t += 1
        b1t = 1 - c.beta1 ** self.t
        b2t = 1 - c.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            step_lr = lr * c.gate_lr_scale if k.startswith(GATE_PREFIX) else lr
            params[k] = params[k] - step_lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)
        return lr

    def state(self) -> dict[str, np.ndarray]:
        out = {"__t": np.array([float(self.t)])}
        out.update({f"m:{k}": v for k, v in self.m.items()})
        out.update({f"v:{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: Mapping):
        self.t = int(np.asarray(state["__t"]).ravel()[0])
        self.m = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m:")}
        self.v = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v:")}


def clip_global_norm(grads: dict, clip: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > clip:
        s = clip / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------- fit

@dataclass
class FitResult:
    params: dict
    log: list
    optimizer: dict
    step: int

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["step"], r["epoch"]] + [_fmt(r[k]) for k in LOG_COLUMNS[2:]])
    return buf.getvalue()


def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "nan"
    return repr(float(x))


def fit(model: POUModel, dataset, config: TrainConfig, objective: str = "least-squares",
        params: dict | None = None, optimizer_state: Mapping | None = None, start_step: int = 0,
        start_epoch: int = 0, validation=None, callback: Callable | None = None) -> FitResult:
    """Minibatch Adam with linear warmup and global-norm clipping.

    ``objective`` is ``least-squares`` (PairDataset, or SeriesDataset with a
    deterministic head trained on rollout SSE) or ``elbo`` (SeriesDataset with a
    probabilistic head).  For ``elbo`` the returned params are the flat
    variational parameters (``mu:*``/``rho:*``).
    """
    if objective not in ("least-squares", "elbo"):
        raise ValueError(f"unknown objective {objective!r}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if params is None:
        params = model.init(config.seed)
        if objective == "elbo":
            params = VariationalParams.from_params(params, config.init_rho).flat()
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    opt = Adam(config, optimizer_state)
    step = start_step
    rows = []
    n = len(dataset)
    for epoch in range(start_epoch, start_epoch + config.epochs):
        # per-epoch stream: resuming at epoch k replays exactly what an uninterrupted run does
        rng = np.random.default_rng((config.seed, epoch))
        order = rng.permutation(n)
        tot_loss = tot_kl = tot_ll = 0.0
        preds, targs, masks = [], [], []
        lr = opt.lr(step)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            tape = dc.Tape()
            leaves = tape.leaves_from(params)
            kl_v = ll_v = None
            if objective == "elbo":
                u0, tgt, mask = dataset.batch(idx)
                vp = VariationalParams.from_flat(leaves)
                elbo, ll, kl, mus = elbo_window(model, vp.mu, vp.rho, u0, tgt, mask,
                                                config.prior_std, n, rng)
                loss = dc.scale(elbo, -1.0)
                kl_v, ll_v = float(dc.value(kl)), float(dc.value(ll))
                preds.append(mus), targs.append(tgt), masks.append(np.broadcast_to(mask, tgt.shape[:-1]))
            elif isinstance(dataset, SeriesDataset):
                u0, tgt, mask = dataset.batch(idx)
                loss, pv = rollout_sse(model, leaves, u0, tgt, mask)
                preds.append(pv), targs.append(tgt), masks.append(np.broadcast_to(mask, tgt.shape[:-1]))
            else:
                x, y, mask, gates = dataset.batch(idx)
                loss, pred = loss_least_squares(model, leaves, x, y, mask, gates)
                preds.append(dc.value(pred)), targs.append(y), masks.append(np.broadcast_to(mask, y.shape[:-1]))
            lv = float(dc.value(loss))
            if not np.isfinite(lv):
                raise NonFiniteLoss(f"non-finite loss at step {step}", params, rows, step)
            grads = tape.backward(loss)
            tape.clear()
            clip_global_norm(grads, config.clip_norm)
            lr = opt.update(params, grads, step)
            step += 1
            tot_loss += lv
            if kl_v is not None:
                tot_kl += kl_v
                tot_ll += ll_v
        nb = -(-n // config.batch_size)
        if validation is not None:
            r2, wm = evaluate(model, params, validation, objective)
        else:
            r2, wm = _epoch_metrics(preds, targs, masks)
        row = {"step": step, "epoch": epoch, "loss": tot_loss / nb, "r2": r2, "wmape": wm,
               "kl": (tot_kl / nb) if objective == "elbo" else float("nan"),
               "loglik": (tot_ll / nb) if objective == "elbo" else float("nan"), "lr": lr}
        rows.append(row)
        log.info("epoch %d step %d loss %.6g r2 %.6f", epoch, step, row["loss"], r2)
        if callback is not None:
            callback(row, params, opt)
    return FitResult(params, rows, opt.state(), step)


def _epoch_metrics(preds, targs, masks):
    p = np.concatenate([a[np.broadcast_to(m[..., None], a.shape)] for a, m in zip(preds, masks)])
    t = np.concatenate([a[np.broadcast_to(m[..., None], a.shape)] for a, m in zip(targs, masks)])
    return metrics_r2_wmape(p, t)


def predict(model: POUModel, params: Mapping, inputs, gates=None, batch_size: int = 32) -> np.ndarray:
    out = []
    for s in range(0, len(inputs), batch_size):
        g = None if gates is None else gates[s:s + batch_size]
        out.append(np.asarray(dc.value(model.apply_pou(params, inputs[s:s + batch_size], g))))
    return np.concatenate(out)


def mean_params(params: Mapping) -> dict:
    """Deterministic parameters: identity for plain params, posterior means for VI params."""
    if any(k.startswith("mu:") for k in params):
        return VariationalParams.from_flat(params).mu
    return dict(params)


def evaluate(model: POUModel, params: Mapping, dataset, objective="least-squares"):
    theta = mean_params(params)
    if isinstance(dataset, PairDataset):
        pred = predict(model, theta, dataset.inputs, dataset.gates)
        mask = dataset.mask if dataset.mask.ndim == dataset.inputs.ndim - 1 else \
            np.broadcast_to(dataset.mask, dataset.inputs.shape[:-1])
        return metrics_r2_wmape(pred, dataset.targets, mask)
    idx = np.arange(len(dataset))
    u0, tgt, mask = dataset.batch(idx)
    states = model.rollout(theta, model.initial_state(u0), tgt.shape[0])[1:]
    mus = np.stack([s[0] if model.probabilistic else s for s in states])
    return metrics_r2_wmape(mus, tgt, np.broadcast_to(mask, tgt.shape[:-1]))
