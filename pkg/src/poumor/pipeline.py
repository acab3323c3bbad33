"""Config-driven glue: dataset directories, training runs, evaluation, rollouts, extension."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import datagen, fieldio, spectral
from . import extension as ext
from .gating import check_partition
from .model import KnownSolver, POUModel, build_model
from .spectral import GridSpec
from .training import (NonFiniteLoss, PairDataset, SeriesDataset, TrainConfig, VariationalParams,
                       fit, format_log, mean_params, metrics_r2_wmape, predict, relative_rmse,
                       sample_weights)

log = logging.getLogger(__name__)


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------- datasets

def sample_spec(cfg: dict, split: str = "train") -> datagen.SampleSpec:
    d = cfg["data"]
    if d["kind"] == "burgers-closure":
        grid = GridSpec((d["n"],))
    else:
        grid = datagen.disk_grid(d["n"], d["half_width"])
    count = d["count"] if split == "train" else d["val_count"]
    seed = d["seed"] if split == "train" else d["seed"] + d["count"]
    keys = ("length_scale", "freq_bound", "n_terms", "nu", "dt", "filter_width", "stride",
            "snapshots", "substeps", "ic_amplitude", "ic_modes")
    return datagen.SampleSpec(d["kind"], grid, max(count, 1), seed, **{k: d[k] for k in keys})


def extend_inputs(u: np.ndarray, masks: np.ndarray, grid: GridSpec, tol: float = 1e-10) -> np.ndarray:
    """Smooth extension of every (n.., 1) sample off its mask (reduced CG route)."""
    out = np.empty_like(u)
    for i in range(len(u)):
        dm = ext.DomainMask(grid, masks[i])
        res = ext.solve_smooth_extension(u[i, ..., 0][dm.indicator], dm, tol=tol, method="reduced")
        out[i, ..., 0] = res.values
    return out


def generate_dataset(cfg: dict, out_dir) -> dict:
    """Writes ``manifest.json`` plus one POUF table per sample (or trajectory)."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    kind = cfg["data"]["kind"]
    manifest = {"kind": kind, "config": cfg["data"], "splits": {}}
    for split in ("train", "val"):
        count = cfg["data"]["count"] if split == "train" else cfg["data"]["val_count"]
        if count == 0:
            continue
        spec = sample_spec(cfg, split)
        files, seeds = [], []
        if kind == "burgers-closure":
            data = datagen.gen_burgers_closure(spec)
            manifest["grid"] = data.coarse_grid.to_dict()
            manifest["fine_grid"] = data.fine_grid.to_dict()
            for i in range(count):
                name = f"samples/{split}_{i:06d}.pouf"
                fieldio.write(out / name, {"coarse": data.coarse[i], "fine_final": data.fine[i, -1]})
                files.append(name)
                seeds.append(spec.seed + i)
        else:
            data = datagen.generate(spec)
            manifest["grid"] = spec.grid.to_dict()
            u_ext = extend_inputs(data.u, data.mask, spec.grid) if kind == "quarter-disk-poisson" else None
            for i in range(count):
                name = f"samples/{split}_{i:06d}.pouf"
                table = {"u": data.u[i], "v": data.v[i], "mask": data.mask[i].astype(np.uint8)}
                if u_ext is not None:
                    table["u_ext"] = u_ext[i]
                    table["angle"] = np.array([data.meta[i]["angle"]])
                fieldio.write(out / name, table)
                files.append(name)
                seeds.append(spec.seed + i)
        manifest["splits"][split] = {"count": count, "files": files, "seeds": seeds}
    (out / "manifest.json").write_text(_json(manifest))
    return manifest


def load_manifest(ds_dir) -> dict:
    path = Path(ds_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise fieldio.FormatError(f"{path}: {e}") from None
    for key in ("kind", "grid", "splits"):
        if key not in manifest:
            raise fieldio.FormatError(f"{path}: missing {key!r}")
    return manifest


def load_split(ds_dir, split: str = "train"):
    """PairData for pair kinds, (S, T, n, 1) coarse series plus fine finals for the closure."""
    manifest = load_manifest(ds_dir)
    if split not in manifest["splits"]:
        raise ValueError(f"dataset has no {split!r} split")
    tables = [fieldio.read(Path(ds_dir) / f) for f in manifest["splits"][split]["files"]]
    grid = GridSpec.from_dict(manifest["grid"])
    if manifest["kind"] == "burgers-closure":
        series = np.stack([t["coarse"] for t in tables])[..., None]
        finals = np.stack([t["fine_final"] for t in tables])
        return grid, series, finals
    u_key = "u_ext" if "u_ext" in tables[0] else "u"
    data = datagen.PairData(grid, np.stack([t["u"] for t in tables]), np.stack([t["v"] for t in tables]),
                            np.stack([t["mask"] for t in tables]).astype(bool))
    data.u_in = np.stack([t[u_key] for t in tables])
    return data


# ---------------------------------------------------------------- model

def model_from_config(cfg: dict, grid: GridSpec, kind: str) -> POUModel:
    m = cfg["model"]
    solver = m["solver"]
    if solver == "auto":
        solver = "burgers1d" if kind == "burgers-closure" else "none"
    ks = KnownSolver(solver, cfg["data"]["nu"], cfg["data"]["dt"]) if solver != "none" else KnownSolver()
    layer_kw = {"hidden": m["hidden"], "g_mode": m["g_mode"], "g_init_scale": m["g_init_scale"]}
    if m["keep"] is not None:
        layer_kw["keep"] = (m["keep"],) * grid.d
    if m["gating"] == "fixed" and m["experts"] != 1:
        raise ValueError("fixed gates support one learned expert (plus the zero expert)")
    return build_model(grid, 1, n_learned=m["experts"], zero_expert=m["zero_expert"], head=m["head"],
                       solver=ks, width=m["width"], depth=m["depth"], lift=m["lift"],
                       gating=m["gating"], gate_hidden=m["gate_hidden"], **layer_kw)


def mask_gates(masks: np.ndarray, n_experts: int) -> np.ndarray:
    """Per-sample fixed gates: the learned expert on X, the zero expert off X."""
    w = masks.astype(float)[..., None]
    gates = w if n_experts == 1 else np.concatenate([w, 1.0 - w], axis=-1)
    return check_partition(gates, n_experts)


def _scale(values, masks):
    m = np.broadcast_to(masks[..., None], values.shape)
    s = float(np.sqrt(np.mean(values[m] ** 2)))
    return s if s > 0 else 1.0


def pair_datasets(cfg: dict, model: POUModel, train, val=None, scaling=None):
    scaling = scaling or {"u": _scale(train.u_in, train.mask), "v": _scale(train.v, train.mask)}
    fixed = cfg["model"]["gating"] == "fixed"

    def make(d, region):
        loss_mask = d.mask if region == "mask" else np.ones(d.mask.shape, bool)
        gates = mask_gates(d.mask, len(model.experts)) if fixed else None
        return PairDataset(d.u_in / scaling["u"], d.v / scaling["v"], loss_mask, gates)

    tr = make(train, cfg["train"]["loss_region"])
    va = make(val, "mask") if val is not None else None
    return tr, va, scaling


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(lr=t["lr"], batch_size=t["batch_size"], warmup_steps=t["warmup_steps"],
                       clip_norm=t["clip_norm"], prior_std=t["prior_std"], window=t["window"],
                       seed=t["seed"], epochs=t["epochs"], init_rho=t["init_rho"],
                       gate_lr_scale=t["gate_lr_scale"], schedule=t["schedule"],
                       decay_steps=t["decay_steps"])


def run_training(cfg: dict, ds_dir, out_dir, resume=None) -> dict:
    """Trains per config; writes checkpoint.pouf (every epoch) and metrics.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(ds_dir)
    kind = manifest["kind"]
    grid = GridSpec.from_dict(manifest["grid"])
    model = model_from_config(cfg, grid, kind)
    tcfg = train_config(cfg)
    objective = cfg["train"]["objective"]
    params = opt = None
    step = epoch0 = 0
    prior_rows = []
    scaling = None
    if resume is not None:
        params, meta, opt, step = fieldio.read_checkpoint(resume)
        epoch0 = meta["epoch"] + 1
        scaling = meta.get("scaling")
        metrics_path = out / "metrics.csv"
        if metrics_path.exists():
            prior_rows = metrics_path.read_text().splitlines()[1:]
    if kind == "burgers-closure":
        _, series, _ = load_split(ds_dir, "train")
        train = SeriesDataset(series, tcfg.window)
        val = None
        if "val" in manifest["splits"]:
            val = SeriesDataset(load_split(ds_dir, "val")[1], tcfg.window)
        scaling = {"u": 1.0, "v": 1.0}
    else:
        tr_data = load_split(ds_dir, "train")
        va_data = load_split(ds_dir, "val") if "val" in manifest["splits"] else None
        train, val, scaling = pair_datasets(cfg, model, tr_data, va_data, scaling)

    meta = {"config": _plain(cfg), "model": model.to_config(), "scaling": scaling, "kind": kind,
            "objective": objective, "epoch": epoch0 - 1}

    def save(row, p, optimizer):
        meta["epoch"] = row["epoch"]
        fieldio.write_checkpoint(out / "checkpoint.pouf", p, meta, optimizer.state(), row["step"])

    try:
        result = fit(model, train, tcfg, objective, params=params, optimizer_state=opt,
                     start_step=step, start_epoch=epoch0, validation=val, callback=save)
    except NonFiniteLoss as e:
        _write_metrics(out / "metrics.csv", prior_rows, e.log_rows)
        raise
    _write_metrics(out / "metrics.csv", prior_rows, result.log)
    return {"steps": result.step, "final": result.log[-1] if result.log else None}


def _write_metrics(path, prior_rows, rows):
    text = format_log(rows)
    if prior_rows:
        head, *body = text.splitlines()
        text = "\n".join([head, *prior_rows, *body]) + "\n"
    Path(path).write_text(text)


def _plain(cfg):
    return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in keys.items()}
            for s, keys in cfg.items()}


def load_model(ckpt):
    params, meta, _, step = fieldio.read_checkpoint(ckpt)
    return POUModel.from_config(meta["model"]), params, meta


# ---------------------------------------------------------------- evaluation

def evaluate_checkpoint(ckpt, ds_dir, split: str = "val", gates_out=None) -> dict:
    model, params, meta = load_model(ckpt)
    manifest = load_manifest(ds_dir)
    if manifest["grid"] != meta["model"]["grid"]:
        raise ValueError("dataset grid does not match the checkpoint")
    theta = mean_params(params)
    if manifest["kind"] == "burgers-closure":
        _, series, _ = load_split(ds_dir, split)
        ds = SeriesDataset(series, meta["config"]["train"]["window"])
        u0, tgt, mask = ds.batch(np.arange(len(ds)))
        states = model.rollout(theta, model.initial_state(u0), tgt.shape[0])[1:]
        pred = np.stack([s[0] if model.probabilistic else s for s in states])
        m = np.broadcast_to(mask, tgt.shape[:-1])
        r2, wm = metrics_r2_wmape(pred, tgt, m)
        out = {"r2": r2, "wmape": wm, "relative_rmse": relative_rmse(pred, tgt, m), "n": len(ds)}
    else:
        data = load_split(ds_dir, split)
        sc = meta["scaling"]
        gates = None
        if meta["model"]["gating"]["kind"] == "fixed":
            gates = mask_gates(data.mask, len(model.experts))
        pred = predict(model, theta, data.u_in / sc["u"], gates) * sc["v"]
        if pred.shape != data.v.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match targets {data.v.shape}")
        r2, wm = metrics_r2_wmape(pred, data.v, data.mask)
        out = {"r2": r2, "wmape": wm, "relative_rmse": relative_rmse(pred, data.v, data.mask),
               "n": len(data)}
    if gates_out is not None:
        g = np.asarray(model.gates(theta)) if model.gating.kind == "mlp" else mask_gates(
            load_split(ds_dir, split).mask, len(model.experts))
        fieldio.write(gates_out, g)
        out["gates"] = str(gates_out)
    return out


# ---------------------------------------------------------------- rollout

def rollout_samples(model: POUModel, params, u0, steps: int, samples: int = 1, seed: int = 0):
    """List of (states (p+1, n.., m), variances or None) per posterior sample."""
    vi = any(k.startswith("mu:") for k in params)
    if samples > 1 and not vi:
        raise ValueError("S > 1 needs a probabilistic (variational) checkpoint")
    u0 = np.asarray(u0, float)
    if u0.ndim == model.grid.d:
        u0 = u0[..., None]
    out = []
    for s in range(samples):
        if vi:
            vp = VariationalParams.from_flat(params)
            theta = sample_weights(vp.mu, vp.rho, np.random.default_rng(seed + s))
        else:
            theta = params
        states = model.rollout(theta, model.initial_state(u0[None]), steps)
        if model.probabilistic:
            mu = np.stack([np.asarray(st[0])[0] for st in states])
            var = np.stack([np.asarray(st[1])[0] for st in states])
            out.append((mu, var))
        else:
            out.append((np.stack([np.asarray(st)[0] for st in states]), None))
    return out


def mean_sigma(var: np.ndarray) -> np.ndarray:
    """Spatial mean of the predicted standard deviation at every rollout step."""
    return np.sqrt(var).reshape(var.shape[0], -1).mean(axis=1)


def run_rollout(ckpt, ic, steps: int, samples: int, seed: int, out_dir, ood_ic=None) -> dict:
    model, params, meta = load_model(ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = model.grid
    report = {}
    for label, field in (("ic", ic), ("ood_ic", ood_ic)):
        if field is None:
            continue
        runs = rollout_samples(model, params, field, steps, samples, seed)
        sig = []
        for s, (mu, var) in enumerate(runs):
            d = out / (f"sample_{s:03d}" if label == "ic" else f"ood_sample_{s:03d}")
            d.mkdir(exist_ok=True)
            fieldio.write(d / "states.pouf", mu)
            if var is not None:
                fieldio.write(d / "variance.pouf", var)
                sig.append(mean_sigma(var)[1:])
            (d / "manifest.json").write_text(_json({
                "dt": model.solver.dt, "steps": steps, "channels": model.out_channels,
                "grid": grid.to_dict()}))
            shells, energy = spectral.energy_spectrum(mu[-1], grid)
            spectral.write_spectrum_csv(d / "spectrum.csv", shells, energy)
            spectral.write_rms_csv(d / "rms.csv", spectral.rms_fluctuations(mu, grid))
        if sig:
            report[label] = {"mean_sigma": float(np.mean(sig)),
                             "mean_sigma_per_step": np.mean(sig, axis=0).tolist()}
    if "ic" in report and "ood_ic" in report:
        report["ratio"] = report["ood_ic"]["mean_sigma"] / report["ic"]["mean_sigma"]
    (out / "ood_report.json").write_text(_json(report))
    return report


# ---------------------------------------------------------------- extension

def run_extension(values: np.ndarray, mask: np.ndarray, tol: float, out_dir, lengths=None) -> dict:
    values = np.asarray(values, float)
    mask = np.asarray(mask).astype(bool)
    if values.shape != mask.shape:
        raise ValueError(f"field {values.shape} and mask {mask.shape} differ")
    grid = GridSpec(values.shape, lengths or ())
    dm = ext.DomainMask(grid, mask)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = ext.solve_smooth_extension(values[mask], dm, tol=tol)
    except ext.ExtensionError as e:
        (out / "residual_history.csv").write_text(
            "iteration,residual\n" + "".join(f"{i},{r!r}\n" for i, r in enumerate(e.history)))
        raise
    padded = ext.zero_padded(values[mask], dm)
    fieldio.write(out / "extended.pouf", res.values)
    fieldio.write(out / "padded.pouf", padded)
    diag = res.diagnostics()
    diag["gibbs_smooth"] = ext.gibbs_metric(ext.burgers_action(res.values, grid), dm)
    diag["gibbs_padded"] = ext.gibbs_metric(ext.burgers_action(padded, grid), dm)
    (out / "diagnostics.json").write_text(_json(diag))
    return diag
