"""Line-oriented run configuration: dotted keys, one `key = value` per line.

Flat dotted keys diff cleanly and parse trivially. Unknown keys are
rejected; every run writes back the fully resolved configuration so an
artifact directory is self-describing.
"""

from __future__ import annotations

import os

import numpy as np

from .backbone import make_cnn_backbone, make_mlp_backbone
from .data import (Dataset, DigitSpec, SpiralSpec, Splits, gen_digits,
                   gen_spirals, read_idx, split)
from .exceptions import ConfigError
from .rng import SplitMix64
from .training import TrainConfig

_BOOLS = {"true": True, "false": False}


def _bool(raw: str) -> bool:
    if raw not in _BOOLS:
        raise ValueError(f"expected true/false, got {raw!r}")
    return _BOOLS[raw]


def _choice(*options):
    def conv(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return raw
    return conv


# key -> (converter, default)
SCHEMA: dict = {
    "dataset.kind": (_choice("spirals", "digits", "idx"), "spirals"),
    "dataset.classes": (int, 4),
    "dataset.per_class": (int, 500),
    "dataset.noise": (float, 0.2),
    "dataset.revolutions": (float, 1.0),
    "dataset.max_shift": (int, 3),
    "dataset.images": (str, ""),
    "dataset.labels": (str, ""),
    "dataset.limit": (int, 0),
    "dataset.seed": (int, 0),
    "dataset.train_fraction": (float, 0.7),
    "dataset.val_fraction": (float, 0.15),
    "dataset.test_fraction": (float, 0.15),
    "model.kind": (_choice("mlp", "cnn"), "mlp"),
    "model.hidden": (int, 64),
    "model.depth": (int, 3),
    "model.channels": (int, 8),
    "trainer.epochs": (int, 50),
    "trainer.batch_size": (int, 128),
    "trainer.lr": (float, 1e-3),
    "trainer.lr_drop_epoch": (int, 15),
    "trainer.lr_drop_factor": (float, 0.1),
    "trainer.optimizer": (_choice("adam", "sgd"), "adam"),
    "trainer.beta1": (float, 0.9),
    "trainer.beta2": (float, 0.999),
    "trainer.eps": (float, 1e-8),
    "trainer.seed": (int, 0),
    "trainer.stop_gradient": (_bool, True),
    "trainer.cascade": (_bool, True),
    "trainer.ensemble_kind": (_choice("geometric", "additive", "none"), "geometric"),
    "trainer.ensemble_epochs": (int, 500),
    "trainer.ensemble_lr": (float, 0.1),
    "trainer.pretrain_epochs": (int, 20),
    "trainer.pretrain_lr": (float, 1e-3),
    "trainer.pool_target": (int, 2),
    "trainer.ic_stride": (int, 1),
    "policy.kind": (_choice("threshold", "patience"), "threshold"),
    "policy.tau": (float, 0.75),
    "policy.patience": (int, 1),
    "policy.source": (_choice("head_probs", "ensemble_probs"), "ensemble_probs"),
    "sweep.grid": (str, "0:1:0.01,1.01"),
    "sweep.split": (_choice("train", "val", "test"), "test"),
    "env.width": (int, 7),
    "env.height": (int, 7),
    "env.step_limit": (int, 30),
    "env.epsilon": (float, 0.05),
    "distill.channels": (int, 4),
    "distill.pretrain_epochs": (int, 30),
    "distill.rounds": (int, 8),
    "distill.steps_per_round": (int, 128),
    "distill.epochs": (int, 5),
    "distill.batch_size": (int, 64),
    "distill.lr": (float, 1e-3),
    "distill.episodes": (int, 10),
    "distill.grid": (str, "0.1:1:0.1,1.01"),
}


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Raw key -> string-value pairs; comments (#) and blank lines skipped."""
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw: dict, origin: str = "<config>") -> dict:
    """Apply defaults and types; unknown keys are an error."""
    resolved = {key: default for key, (_, default) in SCHEMA.items()}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        conv, _ = SCHEMA[key]
        try:
            resolved[key] = conv(value)
        except ValueError as e:
            raise ConfigError(f"{origin}: bad value for {key}: {e}") from e
    return resolved


def load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return resolve_config(parse_config_text(f.read(), origin=path), origin=path)


def format_config(resolved: dict) -> str:
    lines = []
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def parse_grid(spec: str) -> list:
    """Grid spec: comma-separated floats or start:stop:step ranges.

    "0:1:0.01,1.01" yields 0.00 .. 1.00 plus 1.01 (102 values). Values
    are rounded to 10 decimals and must be strictly increasing.
    """
    values: list = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            raise ConfigError(f"empty grid segment in {spec!r}")
        if ":" in part:
            pieces = part.split(":")
            if len(pieces) != 3:
                raise ConfigError(f"grid range must be start:stop:step, got {part!r}")
            try:
                start, stop, step = (float(p) for p in pieces)
            except ValueError as e:
                raise ConfigError(f"bad grid range {part!r}: {e}") from e
            if step <= 0:
                raise ConfigError(f"grid step must be positive in {part!r}")
            count = int(round((stop - start) / step))
            pts = [round(start + i * step, 10) for i in range(count + 1)]
            values.extend(p for p in pts if p <= round(stop, 10) + 1e-12)
        else:
            try:
                values.append(round(float(part), 10))
            except ValueError as e:
                raise ConfigError(f"bad grid value {part!r}: {e}") from e
    if not values:
        raise ConfigError(f"empty grid {spec!r}")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"grid must be strictly increasing: {spec!r}")
    return values


# ---------------------------------------------------------------------------
# builders from a resolved config


def build_dataset(cfg: dict, run_seed: int) -> Dataset:
    ds_seed = cfg["dataset.seed"] if cfg["dataset.seed"] != 0 else run_seed
    stream = SplitMix64(ds_seed)
    gen_seed = stream.next_u64()
    kind = cfg["dataset.kind"]
    if kind == "spirals":
        ds = gen_spirals(SpiralSpec(classes=cfg["dataset.classes"],
                                    per_class=cfg["dataset.per_class"],
                                    noise=cfg["dataset.noise"],
                                    revolutions=cfg["dataset.revolutions"],
                                    seed=gen_seed))
    elif kind == "digits":
        ds = gen_digits(DigitSpec(per_class=cfg["dataset.per_class"],
                                  noise=cfg["dataset.noise"],
                                  max_shift=cfg["dataset.max_shift"],
                                  seed=gen_seed))
    else:
        ds = read_idx(cfg["dataset.images"], cfg["dataset.labels"])
    if cfg["dataset.limit"] > 0:
        ds = ds.subset(np.arange(min(cfg["dataset.limit"], len(ds))), split="full")
    return ds


def build_splits(cfg: dict, run_seed: int) -> Splits:
    ds = build_dataset(cfg, run_seed)
    ds_seed = cfg["dataset.seed"] if cfg["dataset.seed"] != 0 else run_seed
    stream = SplitMix64(ds_seed)
    stream.next_u64()  # generation seed
    split_seed = stream.next_u64()
    fractions = (cfg["dataset.train_fraction"], cfg["dataset.val_fraction"],
                 cfg["dataset.test_fraction"])
    return split(ds, fractions, seed=split_seed)


def backbone_factory(cfg: dict, sample_shape: tuple, num_classes: int):
    kind = cfg["model.kind"]
    if kind == "mlp":
        if len(sample_shape) != 1:
            raise ConfigError(f"mlp backbone needs flat inputs, got {sample_shape}")
        return lambda seed: make_mlp_backbone(sample_shape[0], cfg["model.hidden"],
                                              cfg["model.depth"], num_classes, seed=seed)
    if len(sample_shape) != 3:
        raise ConfigError(f"cnn backbone needs (C, H, W) inputs, got {sample_shape}")
    return lambda seed: make_cnn_backbone(sample_shape, cfg["model.channels"],
                                          cfg["model.depth"], num_classes, seed=seed)


def train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["trainer.epochs"], batch_size=cfg["trainer.batch_size"],
        lr=cfg["trainer.lr"], lr_drop_epoch=cfg["trainer.lr_drop_epoch"],
        lr_drop_factor=cfg["trainer.lr_drop_factor"],
        optimizer=cfg["trainer.optimizer"], beta1=cfg["trainer.beta1"],
        beta2=cfg["trainer.beta2"], eps=cfg["trainer.eps"], seed=seed,
        stop_gradient=cfg["trainer.stop_gradient"], cascade=cfg["trainer.cascade"],
        ensemble_kind=cfg["trainer.ensemble_kind"],
        ensemble_epochs=cfg["trainer.ensemble_epochs"],
        ensemble_lr=cfg["trainer.ensemble_lr"],
        pretrain_epochs=cfg["trainer.pretrain_epochs"],
        pretrain_lr=cfg["trainer.pretrain_lr"],
        pool_target=cfg["trainer.pool_target"], ic_stride=cfg["trainer.ic_stride"])
