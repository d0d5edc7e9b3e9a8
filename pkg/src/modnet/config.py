"""Configuration files: flat-sectioned key-value text, a strict schema, and
typed resolution into the model/objective/train/data configs.

Every key has a default; unknown sections or keys are rejected by name.
Override strings ("section.key=value", or just "key=value" when the key is
unambiguous) apply after the file, last one winning.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass
from pathlib import Path

from .data import Environment, build_colored_mnist, build_rotated_envs, load_mnist_set
from .errors import ConfigError, DataError
from .models import ModelConfig
from .objectives import ObjectiveConfig
from .regularizers import RegWeights
from .training import TrainConfig

SCHEMA: dict[str, dict[str, str]] = {
    "model": {
        "arch": "mlp",
        "hidden": "256,256",
        "conv_channels": "16,32",
        "conv_kernel": "3",
        "dense_hidden": "128",
    },
    "objective": {
        "base": "erm",
        "irm_lambda": "1e4",
        "irm_anneal_steps": "500",
        "weight_decay": "0.0",
    },
    "reg": {
        "alpha": "0.0",
        "beta": "0.0",
    },
    "data": {
        "kind": "colored",
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "label_noise": "0.25",
        "train_flip_probs": "0.1,0.2",
        "test_flip_prob": "0.9",
        "train_count": "50000",
        "angles": "0,15,30,45,60,75",
        "test_angle": "0",
        "per_env_count": "1000",
        "method": "bilinear",
    },
    "train": {
        "steps": "500",
        "batch_size": "128",
        "lr": "1e-3",
        "tau0": "5.0",
        "tau_min": "0.5",
        "tau_anneal_steps": "",
        "seed": "0",
        "eval_interval": "100",
    },
    "output": {
        "dir": "",
    },
}

RawConfig = dict[str, dict[str, str]]


def default_config() -> RawConfig:
    return {section: dict(keys) for section, keys in SCHEMA.items()}


def load_config(path: str | Path | None) -> RawConfig:
    """Defaults, updated by the file at `path` (if given). Strict keys."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            cfg[section][key] = value
    return cfg


def _locate_key(key: str) -> tuple[str, str]:
    if "." in key:
        section, _, name = key.partition(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{name}")
        return section, name
    hits = [s for s in SCHEMA if key in SCHEMA[s]]
    if not hits:
        raise ConfigError(f"unknown config key {key}")
    if len(hits) > 1:
        raise ConfigError(f"ambiguous config key {key}: found in sections {hits}")
    return hits[0], key


def apply_overrides(cfg: RawConfig, overrides: list[str]) -> RawConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, _, value = item.partition("=")
        section, name = _locate_key(key.strip())
        cfg[section][name] = value.strip()
    return cfg


def render_config(cfg: RawConfig) -> str:
    """Canonical text form (schema order), used for the resolved-config echo."""
    parser = configparser.ConfigParser()
    for section in SCHEMA:
        parser[section] = {k: cfg[section][k] for k in SCHEMA[section]}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _parse(section: str, key: str, value: str, kind):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {value!r} as {kind.__name__}") from None


def _parse_tuple(section: str, key: str, value: str, kind) -> tuple:
    value = value.strip()
    if not value:
        return ()
    return tuple(_parse(section, key, part.strip(), kind) for part in value.split(","))


# the dataset decides what the network sees; model sections stay shape-free
_DATA_SHAPES = {"colored": ((2, 28, 28), 2), "rotated": ((1, 28, 28), 10)}


def resolve_train_config(cfg: RawConfig) -> TrainConfig:
    kind = cfg["data"]["kind"]
    if kind not in _DATA_SHAPES:
        raise ConfigError(f"data.kind must be 'colored' or 'rotated', got {kind!r}")
    input_shape, classes = _DATA_SHAPES[kind]
    m, o, r, t = cfg["model"], cfg["objective"], cfg["reg"], cfg["train"]
    model = ModelConfig(
        arch=m["arch"],
        input_shape=input_shape,
        classes=classes,
        hidden=_parse_tuple("model", "hidden", m["hidden"], int),
        conv_channels=_parse_tuple("model", "conv_channels", m["conv_channels"], int),
        conv_kernel=_parse("model", "conv_kernel", m["conv_kernel"], int),
        dense_hidden=_parse("model", "dense_hidden", m["dense_hidden"], int),
    )
    objective = ObjectiveConfig(
        base=o["base"],
        irm_lambda=_parse("objective", "irm_lambda", o["irm_lambda"], float),
        irm_anneal_steps=_parse("objective", "irm_anneal_steps", o["irm_anneal_steps"], int),
        reg=RegWeights(
            alpha=_parse("reg", "alpha", r["alpha"], float),
            beta=_parse("reg", "beta", r["beta"], float),
        ),
        weight_decay=_parse("objective", "weight_decay", o["weight_decay"], float),
    )
    anneal = t["tau_anneal_steps"].strip()
    out_dir = cfg["output"]["dir"].strip()
    return TrainConfig(
        model=model,
        objective=objective,
        steps=_parse("train", "steps", t["steps"], int),
        batch_size=_parse("train", "batch_size", t["batch_size"], int),
        lr=_parse("train", "lr", t["lr"], float),
        tau0=_parse("train", "tau0", t["tau0"], float),
        tau_min=_parse("train", "tau_min", t["tau_min"], float),
        tau_anneal_steps=_parse("train", "tau_anneal_steps", anneal, int) if anneal else None,
        seed=_parse("train", "seed", t["seed"], int),
        eval_interval=_parse("train", "eval_interval", t["eval_interval"], int),
        out_dir=out_dir or None,
    )


def _data_path(cfg: RawConfig, key: str) -> Path:
    raw = cfg["data"][key].strip()
    if not raw:
        raise ConfigError(f"data.{key} is required but not set")
    path = Path(raw)
    root = os.environ.get("MODNET_DATA_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    if not path.exists():
        raise DataError(f"data.{key}: no such file: {path}")
    return path


def build_environments(cfg: RawConfig, seed: int) -> tuple[list[Environment], list[Environment]]:
    """Materialize (train_envs, eval_envs) per the [data] section."""
    d = cfg["data"]
    kind = d["kind"]
    if kind == "colored":
        base = load_mnist_set(_data_path(cfg, "train_images"), _data_path(cfg, "train_labels"))
        count = _parse("data", "train_count", d["train_count"], int)
        if count < 1:
            raise ConfigError(f"data.train_count must be >= 1, got {count}")
        count = min(count, len(base))
        base = type(base)(images=base.images[:count], labels=base.labels[:count])
        noise = _parse("data", "label_noise", d["label_noise"], float)
        flips = _parse_tuple("data", "train_flip_probs", d["train_flip_probs"], float)
        if not flips:
            raise ConfigError("data.train_flip_probs must list at least one probability")
        train_envs = build_colored_mnist(
            base, [(f"e{i}", p) for i, p in enumerate(flips)], label_noise=noise, seed=seed
        )
        test_base = load_mnist_set(_data_path(cfg, "test_images"), _data_path(cfg, "test_labels"))
        test_p = _parse("data", "test_flip_prob", d["test_flip_prob"], float)
        eval_envs = build_colored_mnist(
            test_base, [("test", test_p)], label_noise=noise, seed=seed, role="test"
        )
        return train_envs, eval_envs
    if kind == "rotated":
        base = load_mnist_set(_data_path(cfg, "train_images"), _data_path(cfg, "train_labels"))
        envs = build_rotated_envs(
            base,
            angles=_parse_tuple("data", "angles", d["angles"], float),
            test_angle=_parse("data", "test_angle", d["test_angle"], float),
            per_env_count=_parse("data", "per_env_count", d["per_env_count"], int),
            seed=seed,
            method=d["method"],
        )
        return [e for e in envs if e.role == "train"], [e for e in envs if e.role == "test"]
    raise ConfigError(f"data.kind must be 'colored' or 'rotated', got {kind!r}")
