"""Run configuration: one JSON document, every key defaulted."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .data import SyntheticSpec
from .diffusion import DenoiserConfig, DiffusionSchedule, SamplerConfig
from .losses import TrainConfig
from .nlbp import NlbpConfig

DEFAULTS = {
    "seed": 556,
    "data": {"n_train": 6000, "n_test": 1000, "spec": {}},
    "model": {"input_shape": [1, 8, 8], "block_dims": [16, 4], "unshuffle": 2, "hidden": 64, "depth": 2,
              "activation": "tanh", "mixer_scale": 0.1},
    "train": {"phase1_epochs": 15, "phase2_epochs": 50, "batch_size": 128, "lr": 3e-3, "lr_r": 1e-4,
              "warmup": 200, "grad_clip": 1.0, "task_kind": "cross_entropy",
              "weights": {"task": 1.0, "surj": 40.0, "stab": 40.0, "natural": 0.3, "r_surj": 1.0, "r_stab": 1.0},
              "plateau_tol": 1e-4, "plateau_epochs": 3},
    "schedule": {"T": 100, "beta_start": 1e-4, "beta_end": 2e-2, "reference_T": 1000},
    "denoiser": {"width": 128, "depth": 3, "emb_dim": 32, "steps": 3000, "batch_size": 128, "lr": 1e-3,
                 "grad_clip": 1.0, "warmup": 200, "log_every": 500},
    "restore": {"sampling_steps": 100, "guidance_start_frac": 0.8, "travel_length": 1, "travel_repeat": 1,
                "nlbp": {"lam": 0.5, "adaptive": False, "alpha": 0.8, "gamma": 2.0, "delta_space": "prob",
                         "pinv_mode": "natural_closed_form", "update": "gentle"},
                "chains": 50},
    "edit": {"sampling_steps": 100, "guidance_start_frac": 0.5, "travel_length": 1, "travel_repeat": 2,
             "nlbp": {"lam": 0.5, "adaptive": True, "alpha": 0.8, "gamma": 2.0, "delta_space": "prob",
                      "pinv_mode": "natural_closed_form", "update": "gentle"},
             "chains": 50},
}

# keys whose values are free-form mappings
_OPEN = {("data", "spec")}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        here = path + (k,)
        if k not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)}")
        if isinstance(base[k], dict) and here not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(here)} must be a mapping")
            out[k] = _merge(base[k], v, here)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def set_key(overrides: dict, dotted: str, value) -> None:
    if value is None:
        return
    node = overrides
    *head, last = dotted.split(".")
    for k in head:
        node = node.setdefault(k, {})
    node[last] = value


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(**cfg["data"]["spec"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=cfg["seed"])


def schedule(cfg: dict) -> DiffusionSchedule:
    s = cfg["schedule"]
    return DiffusionSchedule.rescaled(s["T"], s["beta_start"], s["beta_end"], s["reference_T"])


def denoiser_config(cfg: dict) -> DenoiserConfig:
    d = cfg["denoiser"]
    return DenoiserConfig(d["steps"], d["batch_size"], d["lr"], d["grad_clip"], d["warmup"], cfg["seed"],
                          d["log_every"])


def sampler_config(cfg: dict, task: str, T: int, attribute: int | None = None) -> SamplerConfig:
    s = cfg[task]
    start = int(round(s["guidance_start_frac"] * T))
    if not 0 <= start <= T:
        raise ConfigError("guidance_start_frac must lie in [0, 1]")
    return SamplerConfig(s["sampling_steps"], start, s["travel_length"], s["travel_repeat"],
                         NlbpConfig(**s["nlbp"]), attribute)
