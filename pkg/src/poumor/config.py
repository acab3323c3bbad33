"""INI configuration with typed, documented defaults; unknown keys are rejected."""
from __future__ import annotations

import configparser
from pathlib import Path
from typing import Iterable


class ConfigError(ValueError):
    pass


def _tuple(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(x) for x in s.split(",")) if s else ()


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


# section -> key -> (parser, default, help)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "kind": (str, "disk-laplacian", "disk-laplacian | quarter-disk-poisson | burgers-closure"),
        "n": (int, 64, "grid points per axis (fine grid for burgers-closure)"),
        "half_width": (float, 1.25, "2D box is [-half_width, half_width]^2"),
        "count": (int, 1000, "training samples (trajectories for burgers-closure)"),
        "val_count": (int, 200, "validation samples (trajectories for burgers-closure)"),
        "seed": (int, 0, "base seed; sample i uses seed + i"),
        "length_scale": (float, 0.25, "GP squared-exponential length scale"),
        "freq_bound": (float, 10.0, "Poisson cosine frequencies ~ U[0, freq_bound]"),
        "n_terms": (int, 10, "Poisson cosine terms"),
        "nu": (float, 1e-3, "Burgers viscosity"),
        "dt": (float, 1e-3, "Burgers snapshot interval = known-solver time step"),
        "filter_width": (int, 8, "box filter width b in fine cells"),
        "stride": (int, 8, "coarse subsampling stride s"),
        "snapshots": (int, 4000, "Burgers snapshots per trajectory (after the IC)"),
        "substeps": (int, 1, "DNS steps per snapshot (DNS step = dt / substeps)"),
        "ic_amplitude": (float, 0.1, "rms of the Burgers initial condition"),
        "ic_modes": (int, 8, "Burgers initial condition occupies modes 1..ic_modes"),
    },
    "model": {
        "experts": (int, 2, "learned MOR experts"),
        "zero_expert": (_bool, True, "append the zero expert"),
        "width": (int, 8, "channels between expert layers"),
        "depth": (int, 2, "layers per expert"),
        "lift": (int, 8, "channels of the pointwise lift h"),
        "hidden": (_tuple, (32, 32), "hidden sizes of h"),
        "keep": (_opt_int, None, "retained modes per axis (default n/4)"),
        "g_mode": (str, "tensor", "tensor | mlp"),
        "g_init_scale": (float, 1.0, "multiplier on the initial spectral weights (0: start as identity)"),
        "gating": (str, "mlp", "mlp | fixed (fixed uses the dataset masks)"),
        "gate_hidden": (_tuple, (64, 64), "gating MLP hidden sizes"),
        "head": (str, "deterministic", "deterministic | probabilistic"),
        "solver": (str, "auto", "none | burgers1d | chorin2d | auto"),
    },
    "train": {
        "objective": (str, "least-squares", "least-squares | elbo"),
        "lr": (float, 1.25e-4, "Adam base learning rate"),
        "batch_size": (int, 1, "samples or windows per step"),
        "warmup_steps": (int, 0, "linear warmup length"),
        "clip_norm": (float, 1.0, "global gradient norm clip"),
        "prior_std": (float, 1.0, "isotropic Gaussian prior std"),
        "window": (int, 8, "rollout window length P"),
        "seed": (int, 0, "initialisation and shuffling seed"),
        "epochs": (int, 1, "passes over the training set"),
        "init_rho": (float, -6.0, "initial pre-variance of the posterior"),
        "loss_region": (str, "mask", "mask | box: where the least-squares loss is summed"),
        "gate_lr_scale": (float, 1.0, "learning-rate multiplier for the gating network"),
        "schedule": (str, "constant", "constant | cosine: learning rate after warmup"),
        "decay_steps": (int, 0, "cosine schedule length in steps (after warmup)"),
    },
    "rollout": {
        "steps": (int, 100, "rollout length p"),
        "samples": (int, 1, "posterior samples S"),
        "seed": (int, 0, "posterior sampling seed"),
    },
}


def defaults() -> dict[str, dict]:
    return {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}


def _set(cfg: dict, section: str, key: str, raw: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        cfg[section][key] = parser(raw)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from None


def load(path=None, overrides: Iterable[str] = ()) -> dict[str, dict]:
    """Defaults, then the INI file, then ``section.key=value`` overrides."""
    cfg = defaults()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                _set(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        _set(cfg, section.strip(), key.strip(), raw.strip())
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    choices = {
        ("data", "kind"): ("disk-laplacian", "quarter-disk-poisson", "burgers-closure"),
        ("model", "g_mode"): ("tensor", "mlp"),
        ("model", "gating"): ("mlp", "fixed"),
        ("model", "head"): ("deterministic", "probabilistic"),
        ("model", "solver"): ("none", "burgers1d", "chorin2d", "auto"),
        ("train", "objective"): ("least-squares", "elbo"),
        ("train", "loss_region"): ("mask", "box"),
        ("train", "schedule"): ("constant", "cosine"),
    }
    for (s, k), allowed in choices.items():
        if cfg[s][k] not in allowed:
            raise ConfigError(f"[{s}] {k} must be one of {', '.join(allowed)}")
    positive = [("data", "n"), ("data", "count"), ("data", "length_scale"), ("data", "substeps"), ("model", "width"),
                ("model", "depth"), ("model", "lift"), ("train", "lr"), ("train", "batch_size"),
                ("train", "clip_norm"), ("train", "prior_std"), ("train", "gate_lr_scale"),
                ("train", "window"), ("train", "epochs"), ("rollout", "steps"), ("rollout", "samples")]
    for s, k in positive:
        if not cfg[s][k] > 0:
            raise ConfigError(f"[{s}] {k} must be positive")
    if cfg["data"]["val_count"] < 0 or cfg["train"]["warmup_steps"] < 0:
        raise ConfigError("counts must be nonnegative")
    if cfg["model"]["g_init_scale"] < 0:
        raise ConfigError("[model] g_init_scale must be nonnegative")
    if cfg["train"]["objective"] == "elbo" and cfg["model"]["head"] != "probabilistic":
        raise ConfigError("objective elbo needs [model] head = probabilistic")
    if cfg["train"]["schedule"] == "cosine" and cfg["train"]["decay_steps"] <= 0:
        raise ConfigError("[train] schedule = cosine needs decay_steps > 0")


def dumps(cfg: dict) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = cfg[section][key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "auto"
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)


def reference() -> str:
    """Markdown table of every key, its default and meaning."""
    rows = ["| section | key | default | meaning |", "|---|---|---|---|"]
    for section, keys in SCHEMA.items():
        for key, (_, default, doc) in keys.items():
            if isinstance(default, tuple):
                default = ",".join(str(x) for x in default)
            rows.append(f"| {section} | {key} | {default} | {doc} |")
    return "\n".join(rows)


def write(path, cfg: dict) -> None:
    Path(path).write_text(dumps(cfg))
