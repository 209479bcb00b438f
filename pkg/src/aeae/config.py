"""Experiment configuration: INI parsing, seed derivation and run manifests.

A config file is plain ``key = value`` text grouped in sections::

    [experiment]
    seed = 0

    [dataset]
    source = synthetic
    count = 2000

Unknown sections or keys are rejected so typos fail loudly instead of
silently falling back to a default.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig


class ConfigError(ValueError):
    """Schema violation in an experiment config."""


# section -> key -> default (the type of the default is the parse type)
DEFAULTS: dict[str, dict[str, object]] = {
    "experiment": {"seed": 0, "out": "runs/default"},
    "dataset": {
        "source": "synthetic",
        "count": 2000,
        "size": 16,
        "noise": 0.02,
        "contrast": "0.08,0.15",
        "images": "",
        "labels": "",
        "train": 1000,
        "fit": 500,
        "test": 500,
        "attack": 120,
    },
    "classifier": {"filters": "8,16", "learning_rate": 0.005, "epochs": 20, "batch_size": 64},
    "autoencoder": {"filters": 32, "learning_rate": 0.01, "epochs": 50, "batch_size": 64},
    "attacks": {
        "fgsm": "0.1,0.2,0.3",
        "bim": "0.1,0.2,0.3",
        "pgd": "0.1,0.2,0.3",
        "deepfool": True,
        "cw": "0",
        "bim_alpha": 1.0 / 255.0,
        "bim_iterations": 0,
        "pgd_alpha": 0.01,
        "pgd_iterations": 40,
        "deepfool_iterations": 50,
        "deepfool_overshoot": 0.02,
        "cw_steps": 200,
        "cw_binary_steps": 5,
        "cw_constant": 1.0,
    },
    "detector": {
        "contamination": 0.1,
        "pd_mode": "auto",
        "trees": 100,
        "subsample": 256,
        "kl_floor": 1e-12,
        "scatter": "pgd_eps0.3,cw_k0",
    },
}


def derive_seed(master: int, purpose: str) -> int:
    """Stable 32-bit sub-seed for ``purpose``; independent of any other purpose."""
    h = hashlib.sha256(f"{int(master)}:{purpose}".encode()).digest()
    return int.from_bytes(h[:4], "big")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(" ", "").split(",") if t]


def _parse(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value.strip()


@dataclass
class ExperimentConfig:
    """Parsed config; ``values[section][key]`` holds typed settings."""

    values: dict[str, dict[str, object]]
    path: str = ""
    overrides: list[str] = field(default_factory=list)

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return int(self.values["experiment"]["seed"])

    @property
    def out(self) -> Path:
        return Path(str(self.values["experiment"]["out"]))

    def sub_seed(self, purpose: str) -> int:
        return derive_seed(self.seed, purpose)

    def to_ini(self) -> str:
        lines = []
        for section, body in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {'yes' if v is True else 'no' if v is False else v}" for k, v in body.items()]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    def attack_configs(self) -> list[AttackConfig]:
        a = self.values["attacks"]
        cfgs = []
        for eps in _floats(str(a["fgsm"])):
            cfgs.append(AttackConfig("fgsm", epsilon=eps))
        for eps in _floats(str(a["bim"])):
            cfgs.append(AttackConfig("bim", epsilon=eps, alpha=a["bim_alpha"], iterations=a["bim_iterations"] or None))
        for eps in _floats(str(a["pgd"])):
            cfg = AttackConfig("pgd", epsilon=eps, alpha=a["pgd_alpha"], iterations=a["pgd_iterations"])
            cfg.seed = self.sub_seed(f"attack:{cfg.name}")
            cfgs.append(cfg)
        if a["deepfool"]:
            cfgs.append(AttackConfig("deepfool", iterations=a["deepfool_iterations"], overshoot=a["deepfool_overshoot"]))
        for kappa in _floats(str(a["cw"])):
            cfgs.append(
                AttackConfig(
                    "cw", confidence=kappa, constant=a["cw_constant"], binary_steps=a["cw_binary_steps"], steps=a["cw_steps"]
                )
            )
        return cfgs

    def classifier_filters(self) -> tuple[int, int]:
        f = [int(v) for v in _floats(str(self.values["classifier"]["filters"]))]
        if len(f) != 2:
            raise ConfigError("classifier.filters: expected two comma-separated integers")
        return f[0], f[1]

    def contrast(self) -> tuple[float, float]:
        c = _floats(str(self.values["dataset"]["contrast"]))
        if len(c) != 2 or not 0 < c[0] <= c[1] <= 1:
            raise ConfigError("dataset.contrast: expected 'low,high' with 0 < low <= high <= 1")
        return c[0], c[1]

    def scatter_attacks(self) -> list[str]:
        return [t.strip() for t in str(self.values["detector"]["scatter"]).split(",") if t.strip()]


def _apply(values, section, key, raw, origin):
    if section not in DEFAULTS:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"{origin}: unknown key {section}.{key}")
    try:
        values[section][key] = _parse(raw, DEFAULTS[section][key])
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {section}.{key}: {exc}") from None


def load_config(path=None, overrides=(), seed: int | None = None, out=None) -> ExperimentConfig:
    """Defaults, then the INI file at ``path``, then ``section.key=value`` overrides."""
    values = {s: dict(body) for s, body in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"config file not readable: {path} ({exc.strerror})") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {str(exc).splitlines()[0]}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(values, section, key, raw, str(path))
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        _apply(values, section, key.strip(), raw, "override")
    if seed is not None:
        values["experiment"]["seed"] = int(seed)
    if out is not None:
        values["experiment"]["out"] = str(out)
    cfg = ExperimentConfig(values, str(path or ""), list(overrides))
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    d = cfg["dataset"]
    if d["source"] not in ("synthetic", "idx"):
        raise ConfigError(f"dataset.source must be 'synthetic' or 'idx', got {d['source']!r}")
    if d["source"] == "idx":
        for key in ("images", "labels"):
            if not d[key]:
                raise ConfigError(f"dataset.{key} is required when dataset.source = idx")
            if not Path(str(d[key])).is_file():
                raise FileNotFoundError(f"dataset.{key}: no such file {d[key]}")
    for key in ("train", "fit", "test", "attack"):
        if d[key] < 1:
            raise ConfigError(f"dataset.{key} must be >= 1")
    if d["attack"] > d["test"]:
        raise ConfigError("dataset.attack must not exceed dataset.test")
    if d["source"] == "synthetic" and d["train"] + d["fit"] + d["test"] > d["count"]:
        raise ConfigError("dataset.train + fit + test exceeds dataset.count")
    det = cfg["detector"]
    if not 0.0 < det["contamination"] < 0.5:
        raise ConfigError("detector.contamination must lie in (0, 0.5)")
    if det["pd_mode"] not in ("auto", "kl", "label"):
        raise ConfigError("detector.pd_mode must be auto, kl or label")
    cfg.classifier_filters()
    cfg.contrast()
    try:
        cfg.attack_configs()
    except ValueError as exc:
        raise ConfigError(f"attacks: {exc}") from None


def versions() -> dict[str, str]:
    return {"aeae": __version__, "python": platform.python_version(), "numpy": np.__version__}


def write_manifest(cfg: ExperimentConfig, command: str, outputs: list[Path], inputs: list[Path] = ()) -> Path:
    """Record what produced ``outputs`` in ``<out>/<command>.manifest.json``.

    Contents depend only on the config and the files, never on wall-clock
    time, so reruns produce identical manifests.
    """

    def entry(p: Path) -> dict:
        return {"path": p.relative_to(cfg.out).as_posix() if p.is_relative_to(cfg.out) else str(p),
                "sha256": hashlib.sha256(p.read_bytes()).hexdigest(), "bytes": p.stat().st_size}

    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.values,
        "seed": cfg.seed,
        "versions": versions(),
        "inputs": [entry(Path(p)) for p in inputs],
        "outputs": [entry(Path(p)) for p in outputs],
    }
    path = cfg.out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
