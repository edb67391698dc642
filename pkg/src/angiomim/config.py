"""Declarative run configuration for pre-training and masking statistics.

A run is described by a TOML file with the sections below (all optional
except where noted)::

    [paths]
    images = "bench/train/images"     # required
    masks = "bench/frangi"            # vessel masks; computed with [frangi] if omitted
    segmentor = "seg.bin"             # required when the consistency loss is on
    output = "runs/full"              # required for pretrain

    [frangi]   scales, alpha, polarity, connectivity, seeds, response
    [masking]  patch_size, gamma, beta0, betaE
    [model]    embed_dim, hidden_dim
    [loss]     consistency, weighted_rec, metric, mode
    [train]    epochs, lr, batch_size, seed, workers

Every field is checked before any work starts and all problems are reported
together in one :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .mim import METRICS
from .validation import ConfigError

__all__ = ["RunConfig", "load_run_config", "config_digest"]

_SECTIONS = {
    "paths": {"images": None, "masks": None, "segmentor": None, "output": None},
    "frangi": {"scales": [1.0, 2.0, 3.0, 4.0], "alpha": 92.0, "polarity": "dark", "connectivity": 8, "seeds": 1,
               "response": "cross"},
    "masking": {"patch_size": 8, "gamma": 0.5, "beta0": 0.0, "betaE": 0.5},
    "model": {"embed_dim": 32, "hidden_dim": 64},
    "loss": {"consistency": True, "weighted_rec": False, "metric": "ce", "mode": "separate"},
    "train": {"epochs": 200, "lr": 0.01, "batch_size": 8, "seed": 0, "workers": 1},
}


@dataclass(frozen=True)
class RunConfig:
    paths: dict = field(default_factory=dict)
    frangi: dict = field(default_factory=dict)
    masking: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {name: dict(getattr(self, name)) for name in _SECTIONS}

    @property
    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check(cfg: dict, need_output: bool, need_images: bool) -> list[str]:
    bad = []
    p, fr, m, mo, lo, tr = (cfg[k] for k in ("paths", "frangi", "masking", "model", "loss", "train"))

    for key in ("images", "masks", "segmentor", "output"):
        if p[key] is not None and not isinstance(p[key], str):
            bad.append(f"paths.{key} must be a string")
    if need_images and not p["images"]:
        bad.append("paths.images is required")
    for key in ("images", "masks"):
        if isinstance(p[key], str) and not os.path.isdir(p[key]):
            bad.append(f"paths.{key}: directory {p[key]!r} does not exist")
    if need_output and not p["output"]:
        bad.append("paths.output is required")

    scales = fr["scales"]
    if not isinstance(scales, list) or not scales or not all(_is_num(s) and s > 0 for s in scales):
        bad.append("frangi.scales must be a nonempty list of positive numbers")
    if not _is_num(fr["alpha"]) or not 0 <= fr["alpha"] <= 100:
        bad.append("frangi.alpha must lie in [0, 100]")
    if fr["polarity"] not in ("dark", "bright"):
        bad.append("frangi.polarity must be 'dark' or 'bright'")
    if fr["connectivity"] not in (4, 8):
        bad.append("frangi.connectivity must be 4 or 8")
    if fr["response"] not in ("cross", "along"):
        bad.append("frangi.response must be 'cross' or 'along'")
    if not _is_int(fr["seeds"]) or fr["seeds"] < 1:
        bad.append("frangi.seeds must be a positive integer")

    if not _is_int(m["patch_size"]) or m["patch_size"] < 1:
        bad.append("masking.patch_size must be a positive integer")
    if not _is_num(m["gamma"]) or not 0 < m["gamma"] < 1:
        bad.append(f"masking.gamma={m['gamma']!r} must lie strictly between 0 and 1")
    for key in ("beta0", "betaE"):
        if not _is_num(m[key]) or not 0 <= m[key] <= 1:
            bad.append(f"masking.{key}={m[key]!r} must lie in [0, 1]")

    for key in ("embed_dim", "hidden_dim"):
        if not _is_int(mo[key]) or mo[key] < 1:
            bad.append(f"model.{key} must be a positive integer")
    if _is_int(mo["embed_dim"]) and mo["embed_dim"] % 4:
        bad.append("model.embed_dim must be divisible by 4")

    for key in ("consistency", "weighted_rec"):
        if not isinstance(lo[key], bool):
            bad.append(f"loss.{key} must be true or false")
    if lo["metric"] not in METRICS:
        bad.append(f"loss.metric must be one of {', '.join(METRICS)}")
    if lo["mode"] == "joint":
        bad.append("loss.mode='joint' (joint segmentor and autoencoder training) is unsupported")
    elif lo["mode"] != "separate":
        bad.append("loss.mode must be 'separate'")
    if lo["consistency"] is True and lo["weighted_rec"] is True:
        bad.append("loss.consistency and loss.weighted_rec cannot both be enabled")
    if lo["consistency"] is True and need_output:
        if not p["segmentor"]:
            bad.append("paths.segmentor is required when loss.consistency is enabled")
        elif isinstance(p["segmentor"], str) and not os.path.isfile(p["segmentor"]):
            bad.append(f"paths.segmentor: file {p['segmentor']!r} does not exist")

    if not _is_int(tr["epochs"]) or tr["epochs"] < 1:
        bad.append("train.epochs must be a positive integer")
    if not _is_num(tr["lr"]) or tr["lr"] <= 0:
        bad.append("train.lr must be positive")
    if not _is_int(tr["batch_size"]) or tr["batch_size"] < 1:
        bad.append("train.batch_size must be a positive integer")
    if not _is_int(tr["seed"]) or tr["seed"] < 0:
        bad.append("train.seed must be a nonnegative integer")
    if not _is_int(tr["workers"]) or tr["workers"] < 1:
        bad.append("train.workers must be a positive integer")
    return bad


def load_run_config(path=None, overrides: dict | None = None, *, need_output=True, need_images=True) -> RunConfig:
    """Read ``path`` (TOML), apply ``overrides`` and validate.

    ``overrides`` maps dotted names such as ``"train.epochs"`` to values;
    ``None`` values are ignored so unset CLI flags fall through.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc.strerror or exc}"]) from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: invalid TOML ({exc})"]) from exc

    problems = []
    merged = {name: dict(defaults) for name, defaults in _SECTIONS.items()}
    for section, values in raw.items():
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        if not isinstance(values, dict):
            problems.append(f"[{section}] must be a table")
            continue
        for key, value in values.items():
            if key not in _SECTIONS[section]:
                problems.append(f"unknown field {section}.{key}")
            else:
                merged[section][key] = value
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        merged[section][key] = value

    if isinstance(merged["frangi"]["scales"], list):
        merged["frangi"]["scales"] = [float(s) if _is_num(s) else s for s in merged["frangi"]["scales"]]
    problems += _check(merged, need_output, need_images)
    if problems:
        raise ConfigError(problems)
    return RunConfig(**merged)


def replace_section(cfg: RunConfig, section: str, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **{section: dict(getattr(cfg, section), **changes)})
