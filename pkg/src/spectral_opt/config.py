"""INI run configuration with strict key checking.

Every section and key is declared in ``SCHEMA`` together with its parser and
default; anything else is rejected with an error naming the offending key.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t.strip().lower() for t in text.replace(",", " ").split())


def _sizes(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for tok in text.replace(",", " ").split():
        m, _, n = tok.lower().partition("x")
        out.append((int(m), int(n)))
    return tuple(out)


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "global": {
        "seed": (int, 0),
        "out": (str, "out"),
    },
    "verify": {
        "sizes": (_sizes, ((2, 2), (4, 6), (8, 8))),
        "per_size": (int, 3),
        "run_steps": (int, 100),
        "probes": (int, 20),
    },
    "data": {
        "n_samples": (int, 1000),
        "n_features": (int, 16),
        "n_classes": (int, 3),
        "center_spread": (float, 1.0),
        "noise": (float, 2.0),
        "max_feature_scale": (float, 1000.0),
        "offset": (float, 0.0),
        "val_fraction": (float, 0.2),
    },
    "model": {
        "hidden": (_ints, (32, 32)),
        "init_gain": (float, 1.0),
        "batch_size": (int, 64),
        "mu": (float, 0.0),
        "eta_reference": (float, 0.01),
        "ns_iterations": (int, 5),
    },
    "lr-sweep": {
        "etas": (_floats, (0.0005, 0.001, 0.005, 0.01)),
        "optimizers": (_words, ("sgd", "muon")),
        "seeds": (_ints, (0, 1, 2, 3, 4)),
        "steps": (int, 50),
        "pre_norm": (str, "none"),
    },
    "converge": {
        "mode": (str, "equal"),
        "eta": (float, 0.05),
        "eta_muon": (float, 0.1),
        "eta_sgd": (float, 0.01),
        "epochs": (int, 10),
        "seeds": (_ints, (0, 1, 2, 3, 4)),
        "schedule": (str, "constant"),
        "pre_norm": (str, "standardize"),
        "milestones": (_floats, (0.5, 0.7, 0.9)),
        # quadratic mode
        "m": (int, 4),
        "n": (int, 6),
        "cond_a": (_opt_float, 10.0),
        "cond_b": (_opt_float, 10.0),
        "steps": (int, 200),
    },
    "spectrum": {
        "matrix": (str, ""),
        "inputs": (str, ""),
    },
}


@dataclass
class RunConfig:
    sections: dict[str, dict[str, Any]] = field(default_factory=dict)
    source: str | None = None

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.sections[section]

    @property
    def seed(self) -> int:
        return self.sections["global"]["seed"]

    @property
    def out(self) -> str:
        return self.sections["global"]["out"]


def defaults() -> RunConfig:
    return RunConfig({sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})


def parse_config(text: str, source: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case so errors name the key as written
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = defaults()
    cfg.source = source
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                cfg.sections[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for '{key}' in [{section}]: {exc}") from exc
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return defaults()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, source=str(path))
