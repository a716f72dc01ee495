"""Sectioned plain-text run configuration.

The schema below is the single source of defaults; a config file may set
any subset of the known keys and unknown sections or keys are rejected.
Every command writes the fully resolved configuration into its run
directory, and the sha256 of that text is the run's config hash.

Grammar: INI sections (``[train]``), ``key = value`` pairs, ``#`` comments.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from pathlib import Path

from .data import FilterPolicy, ToyDatasetSpec
from .errors import ConfigError
from .models import ModelConfig
from .train import TrainConfig

DEFAULTS: dict[str, dict[str, object]] = {
    "model": {
        "resolution": 32,
        "z_dim": 64,
        "mapping_depth": 4,
        "base_channels": 64,
        "min_channels": 8,
        "convs_per_block": 1,
        "leaky_alpha": 0.2,
        "noise_scale_init": 0.1,
    },
    "data": {
        "margin": 50.0,
        "out_size": 256,
        "min_confidence": 0.0,
        "min_box_size": 0,
        "shard_capacity": 1024,
        "toy_count": 512,
        "toy_resolution": 16,
        "toy_seed": 0,
        "toy_p_face_large": 0.5,
        "toy_p_eyes_wide": 0.5,
    },
    "train": {
        "steps": 2000,
        "batch_size": 8,
        "lr_g": 2e-3,
        "lr_d": 2e-3,
        "adam_beta1": 0.0,
        "adam_beta2": 0.99,
        "adam_eps": 1e-8,
        "r1_gamma": 1.0,
        "mixing_prob": 0.9,
        "ema_decay": 0.995,
        "snapshot_interval": 500,
        "fid_samples": 1000,
        "embedder": "pixel",
        "seed": 0,
    },
    "generate": {
        "psi": 0.7,
        "truncation_cutoff": 32,
        "rows": 4,
        "cols": 4,
        "seed": 0,
        "noise_mode": "all",
        "noise_boundary": 32,
        "mean_w_samples": 2000,
        "mean_w_seed": 0,
        "psis": "1.0,0.7,0.3,0.0",
    },
    "metrics": {
        "embedder": "pixel",
        "fid_samples": 1000,
        "ppl_pairs": 128,
        "ppl_epsilon": 1e-4,
        "ppl_batch": 64,
        "ls_samples": 2000,
        "ls_keep_fraction": 0.5,
        "ls_train_steps": 300,
        "seed": 0,
    },
}


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes"):
                return True
            if low in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from exc


class RunConfig:
    """Typed view over the resolved section/key table."""

    def __init__(self, table: dict[str, dict[str, object]]):
        self._table = table

    def __getitem__(self, section: str) -> dict[str, object]:
        return self._table[section]

    def get(self, section: str, key: str):
        return self._table[section][key]

    def to_text(self) -> str:
        buf = io.StringIO()
        for section in DEFAULTS:
            buf.write(f"[{section}]\n")
            for key in DEFAULTS[section]:
                buf.write(f"{key} = {self._table[section][key]}\n")
            buf.write("\n")
        return buf.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    # ---- builders for the module-level config objects

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self._table["model"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self._table["train"])

    def toy_spec(self) -> ToyDatasetSpec:
        d = self._table["data"]
        return ToyDatasetSpec(resolution=d["toy_resolution"], count=d["toy_count"],
                              seed=d["toy_seed"], p_face_large=d["toy_p_face_large"],
                              p_eyes_wide=d["toy_p_eyes_wide"])

    def filter_policy(self) -> FilterPolicy:
        d = self._table["data"]
        return FilterPolicy(min_confidence=d["min_confidence"],
                            min_box_size=d["min_box_size"],
                            margin=d["margin"], out_size=d["out_size"])

    def psis(self) -> list[float]:
        raw = str(self._table["generate"]["psis"])
        try:
            return [float(p) for p in raw.split(",") if p.strip() != ""]
        except ValueError as exc:
            raise ConfigError(f"[generate] psis: cannot parse {raw!r}") from exc


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the config file, then ``section.key=value`` overrides."""
    table = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                table[section][key] = _coerce(section, key, raw)
    for item in overrides:
        try:
            dotted, raw = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
        except ValueError as exc:
            raise ConfigError(f"--set expects section.key=value, got {item!r}") from exc
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"--set: unknown key {section}.{key}")
        table[section][key] = _coerce(section, key, raw)
    return RunConfig(table)
