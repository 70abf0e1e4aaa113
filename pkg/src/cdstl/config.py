"""Experiment configuration: INI sections with a fixed schema and canonical form.

Canonical serialisation orders sections by the schema, keys alphabetically,
and prints every value in one normal form, so ``config_hash`` is a stable
fingerprint of the experiment.
"""

from __future__ import annotations

import configparser
import hashlib
from pathlib import Path

from cdstl.distill import DistillConfig
from cdstl.errors import ConfigError
from cdstl.nncore import derive_seed

MASK64 = (1 << 64) - 1


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in _str_list(text))


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _optional_str(text: str):
    return None if text.strip().lower() in ("", "none") else text.strip()


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
        "grid": (str, "coarse"),
        "sweep_modes": (_str_list, ("easy", "hard")),
    },
    "dataset": {
        "source": (str, "shapes"),
        "per_class": (int, 250),
        "resolution": (int, 16),
        "classes": (int, 4),
        "noise": (float, 0.35),
        "clutter": (float, 0.3),
        "test_fraction": (float, 0.2),
        "idx_images": (_optional_str, None),
        "idx_labels": (_optional_str, None),
        "idx_test_images": (_optional_str, None),
        "idx_test_labels": (_optional_str, None),
    },
    "scorer": {
        "arch": (str, "ConvNetDeep"),
        "epochs": (int, 10),
        "lr": (float, 0.05),
        "batch_size": (int, 32),
    },
    "prune": {
        "r": (float, 0.2),
        "mode": (str, "easy"),
    },
    "distill": {
        "method": (str, "DM"),
        "space": (str, "pixel"),
        "ipc": (int, 1),
        "iterations": (int, 200),
        "syn_lr": (_optional_float, None),
        "inner_steps": (int, 4),
        "expert_steps": (int, 2),
        "models_per_iteration": (int, 1),
        "batch_per_class": (int, 32),
        "init": (str, "real"),
        "dc_granularity": (str, "global"),
        "student_lr": (float, 0.01),
        "expert_total_steps": (int, 60),
        "expert_interval": (int, 10),
        "expert_lr": (float, 0.01),
        "expert_batch": (int, 32),
        "num_experts": (int, 2),
        "backbone": (str, "ConvNetS"),
        "decoder_epochs": (int, 30),
        "decoder_lr": (float, 0.5),
        "latent_channels": (int, 16),
        "min_compression": (float, 4.0),
    },
    "eval": {
        "archs": (_str_list, ("ConvNetDeep", "MLP", "LinearProbe")),
        "repeats": (int, 5),
        "train_epochs": (int, 200),
        "lr": (float, 0.05),
        "allow_backbone": (_bool, False),
    },
}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


class ExperimentConfig:
    """Typed view over the schema; ``cfg.section("distill")["ipc"]``."""

    def __init__(self, values: dict[str, dict] | None = None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, kv in (values or {}).items():
            self.update(section, **kv)
        self.validate()

    def update(self, section: str, **kv) -> "ExperimentConfig":
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in kv.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            parser, _ = SCHEMA[section][key]
            if isinstance(value, str):
                try:
                    value = parser(value)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
            elif isinstance(value, list):
                value = tuple(value)
            elif parser is float and isinstance(value, int):
                value = float(value)
            self.values[section][key] = value
        return self

    def section(self, name: str) -> dict:
        return dict(self.values[name])

    def validate(self) -> None:
        d = self.values
        if d["dataset"]["source"] not in ("shapes", "idx"):
            raise ConfigError("[dataset] source must be 'shapes' or 'idx'")
        if d["dataset"]["source"] == "idx" and not (d["dataset"]["idx_images"] and d["dataset"]["idx_labels"]):
            raise ConfigError("[dataset] source=idx needs idx_images and idx_labels")
        if d["distill"]["space"] not in ("pixel", "latent"):
            raise ConfigError("[distill] space must be 'pixel' or 'latent'")
        if d["run"]["grid"] not in ("coarse", "fine", "broad"):
            raise ConfigError("[run] grid must be coarse, fine or broad")
        if not 0 < d["prune"]["r"] <= 1:
            raise ConfigError("[prune] r must be in (0, 1]")
        if d["prune"]["mode"] not in ("easy", "hard"):
            raise ConfigError("[prune] mode must be easy or hard")
        if not 0 <= d["run"]["seed"] <= MASK64:
            raise ConfigError("[run] seed must be an unsigned 64-bit integer")
        self.distill_config()

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def stage_seed(self, stage: str) -> int:
        """Every stage draws from its own stream keyed by its name under the root seed."""
        return derive_seed(self.seed, stage)

    def distill_config(self) -> DistillConfig:
        fields = {k: v for k, v in self.values["distill"].items() if k in DistillConfig.__dataclass_fields__}
        fields["seed"] = derive_seed(self.seed, "distill")
        return DistillConfig(**fields)

    def canonical(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in sorted(keys):
                lines.append(f"{key} = {_format(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.canonical() == other.canonical()

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        return cls({s: dict(parser.items(s)) for s in parser.sections()})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text)
