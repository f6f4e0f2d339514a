"""INI-style configuration for scenarios and the command line.

Sections: ``[units] [train] [metanet] [scenario] [bias] [split] [synthetic]
[ekf]``.  Every key is optional; missing keys keep the library defaults.
Unknown keys are rejected so typos do not pass silently.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .data import UnitSpec
from .ekf import EkfConfig
from .metanet import MetanetParams
from .prgp import TrainConfig
from .scenario import Scenario, SplitConfig, SyntheticConfig

# config spelling -> dataclass field
TRAIN_ALIASES = {"lr": "learning_rate"}
METANET_ALIASES = {"delta": "delta_ramp", "seg_len": "delta", "I": "n_segments"}
BIAS_KEYS = {"fraction": "bias_fraction", "flow_std": "bias_flow_std",
             "speed_std": "bias_speed_std"}


def _parse_tuple(text: str) -> tuple:
    return tuple(float(x) if "." in x or "e" in x.lower() else int(x)
                 for x in text.replace(",", " ").split())


def _coerce(text: str, default, key: str):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, dict):
        out = {}
        for item in text.replace(",", " ").split():
            i, _, v = item.partition(":")
            out[int(i)] = float(v)
        return out
    if default is None:
        return None if text.lower() in ("", "none") else (
            _parse_tuple(text) if ("," in text or " " in text) else float(text))
    if isinstance(default, tuple):
        return _parse_tuple(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _section_fields(cp: configparser.ConfigParser, section: str, cls, base,
                    aliases: dict | None = None, skip=(), passthrough=()) -> dict:
    """Fields of dataclass ``cls`` named in ``section``, coerced by the type of
    the corresponding attribute on ``base``."""
    if not cp.has_section(section):
        return {}
    aliases = aliases or {}
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    out = {}
    for key, text in cp.items(section):
        name = aliases.get(key, key)
        if name in passthrough:
            out[name] = text
            continue
        if name not in names:
            raise ValueError(f"[{section}] unknown key {key!r}")
        default = getattr(base, name)
        if name in ("delta", "lanes") and cls is MetanetParams:
            vals = _parse_tuple(text)
            out[name] = vals[0] if len(vals) == 1 else vals
        else:
            out[name] = _coerce(text, default, f"[{section}] {key}")
    return out


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    if path is not None and not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    return cp


def data_units(cp: configparser.ConfigParser) -> UnitSpec:
    """Units of detector CSV files (default veh/5min and mph)."""
    sec = cp["units"] if cp.has_section("units") else {}
    return UnitSpec(flow=sec.get("flow", "veh_per_5min"), speed=sec.get("speed", "mph"))


def metanet_params(cp: configparser.ConfigParser) -> MetanetParams:
    base = MetanetParams()
    return base.replace(**_section_fields(cp, "metanet", MetanetParams, base, METANET_ALIASES))


def train_config(cp: configparser.ConfigParser, seed: int | None = None) -> TrainConfig:
    base = TrainConfig()
    fields = _section_fields(cp, "train", TrainConfig, base, TRAIN_ALIASES)
    if seed is not None:
        fields["seed"] = seed
    return dataclasses.replace(base, **fields)


def scenario_from_config(cp: configparser.ConfigParser, seed: int | None = None,
                         methods=None) -> Scenario:
    base = Scenario()
    fields = _section_fields(cp, "scenario", Scenario, base,
                             skip=("synthetic", "model", "train", "ekf", "split",
                                   "source_units", "report_units", "methods"),
                             passthrough=("methods",))
    if "methods" in fields:
        fields["methods"] = tuple(fields["methods"].replace(",", " ").split())
    if cp.has_section("bias"):
        for key, text in cp.items("bias"):
            if key not in BIAS_KEYS:
                raise ValueError(f"[bias] unknown key {key!r}")
            fields[BIAS_KEYS[key]] = float(text)
    if seed is not None:
        fields["seed"] = seed
    if methods:
        fields["methods"] = tuple(methods)
    syn = SyntheticConfig()
    split = SplitConfig()
    ekf = EkfConfig()
    return dataclasses.replace(
        base, **fields,
        source_units=data_units(cp),
        synthetic=dataclasses.replace(syn, **_section_fields(cp, "synthetic", SyntheticConfig,
                                                             syn)),
        split=dataclasses.replace(split, **_section_fields(cp, "split", SplitConfig, split)),
        ekf=dataclasses.replace(ekf, **_section_fields(cp, "ekf", EkfConfig, ekf)),
        model=metanet_params(cp),
        train=train_config(cp, fields.get("seed")),
    )


def write_default_config(path) -> Path:
    """A commented config listing the main keys with their default values."""
    p, t, sc = MetanetParams(), TrainConfig(), Scenario()
    text = f"""\
[units]
flow = veh_per_5min
speed = mph

[train]
iterations = {t.iterations}
lr = {t.learning_rate}
m = {t.m}
phi_f = {t.step_f}
phi_g = {t.step_g}

[metanet]
T = {p.T!r}
v_f = {p.v_f}
rho_cr = {p.rho_cr}
alpha = {p.alpha}
nu = {p.nu}
delta = {p.delta_ramp}
tau = {p.tau}
kappa = {p.kappa}
lanes = {float(p.lanes[0])}
seg_len = {float(p.delta[0])}
I = {p.n_segments}

[scenario]
name = {sc.name}
source = {sc.source}
seed = {sc.seed}
sample_ratio = {sc.sample_ratio}
methods = {", ".join(sc.methods)}

[bias]
fraction = {sc.bias_fraction}
flow_std = {sc.bias_flow_std}
speed_std = {sc.bias_speed_std}
"""
    path = Path(path)
    path.write_text(text)
    return path
