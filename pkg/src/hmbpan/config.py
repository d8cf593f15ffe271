"""Flat ``section.key = value`` run configuration.

One assignment per line, ``#`` starts a comment. Sections are ``model``,
``loss``, ``train`` and ``data``. Values are parsed as Python literals
when possible (``3``, ``1e-4``, ``true``) and kept as strings otherwise.
"""

from __future__ import annotations

import ast
from dataclasses import asdict, fields, replace
from pathlib import Path

from .hmcnn import HmcnnConfig
from .losses import LossWeights
from .training import TrainConfig

__all__ = ["ConfigFileError", "parse_config", "load_config", "build_train_config", "train_config_snapshot"]


class ConfigFileError(ValueError):
    pass


_SECTIONS = ("model", "loss", "train", "data")
_DATA_KEYS = {"index", "out_dir", "val_fraction"}
# short spellings accepted alongside the field names
_MODEL_ALIASES = {"share_hmb": "share_hmb_across_bands", "progressive": "progressive_chain"}
_LOSS_TO_TRAIN = ("phi_seed", "phi_weights_path")


def _value(text):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text, source="<config>"):
    """``{section: {key: value}}`` from config text."""
    out = {s: {} for s in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigFileError(f"{source}:{lineno}: key {key!r} must be section.key")
        section, name = key.split(".")
        if section not in out:
            raise ConfigFileError(f"{source}:{lineno}: unknown section {section!r}")
        out[section][name] = _value(value)
    return out


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"{path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def _build(cls, values, section):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigFileError(f"unknown {section} keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"{section}: {exc}") from exc


def build_train_config(sections, seed=None):
    """TrainConfig from parsed sections; ``seed`` overrides ``train.seed``."""
    model_keys = {_MODEL_ALIASES.get(k, k): v for k, v in sections.get("model", {}).items()}
    model = _build(HmcnnConfig, model_keys, "model")
    loss_keys = dict(sections.get("loss", {}))
    train = dict(sections.get("train", {}))
    for k in _LOSS_TO_TRAIN:
        if k in loss_keys:
            train[k] = loss_keys.pop(k)
    loss = _build(LossWeights, loss_keys, "loss")
    data = sections.get("data", {})
    unknown = set(data) - _DATA_KEYS
    if unknown:
        raise ConfigFileError(f"unknown data keys: {', '.join(sorted(unknown))}")
    if "val_fraction" in data:
        train["val_fraction"] = data["val_fraction"]
    if seed is not None:
        train["seed"] = seed
    for name in ("loss", "model"):
        if name in train:
            raise ConfigFileError(f"train.{name} is not a setting; use the {name} section")
    cfg = _build(TrainConfig, train, "train")
    return replace(cfg, model=model, loss=loss)


def train_config_snapshot(cfg: TrainConfig, data=None):
    """Flat ``section.key -> value`` map that rebuilds ``cfg`` exactly."""
    snap = {}
    body = asdict(cfg)
    for section in ("model", "loss"):
        for k, v in body.pop(section).items():
            snap[f"{section}.{k}"] = v
    for k, v in body.items():
        snap[f"train.{k}"] = v
    for k, v in (data or {}).items():
        snap[f"data.{k}"] = v
    return snap


def format_config(snapshot):
    return "".join(f"{k} = {v!r}\n" if isinstance(v, str) else f"{k} = {v}\n" for k, v in snapshot.items())
