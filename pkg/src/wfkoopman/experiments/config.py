"""INI-style run configuration with sections [plant] [training] [mpc] [reference] [scenario]."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from ..mpc import MpcConfig
from ..plant import PlantConfig
from .scenarios import ReferenceConfig, ScenarioConfig

SECTIONS = ("plant", "training", "mpc", "reference", "scenario")


@dataclass(frozen=True)
class DataConfig:
    """Open-loop identification dataset."""

    n: int = 4000
    data_seed: int = 7
    lo: float = 0.2
    hi: float = 2.0
    cutoff_hz: float = 0.005
    split: float = 0.75


@dataclass(frozen=True)
class TrainingOptions:
    epochs: Optional[int] = None
    lifted: Optional[int] = None
    eta: Optional[float] = None
    batch: Optional[int] = None
    N_p: Optional[int] = None
    seed: int = 0
    dtype: Optional[str] = None
    horizon: int = 10

    def overrides(self) -> Dict[str, Any]:
        out = {"seed": self.seed}
        for src, dst in (("epochs", "N_E"), ("eta", "eta"), ("batch", "B_t"), ("N_p", "N_p"),
                         ("dtype", "dtype")):
            v = getattr(self, src)
            if v is not None:
                out[dst] = v
        return out


@dataclass(frozen=True)
class RunConfig:
    plant: PlantConfig = PlantConfig()
    data: DataConfig = DataConfig()
    training: TrainingOptions = TrainingOptions()
    mpc: MpcConfig = MpcConfig()
    reference: ReferenceConfig = ReferenceConfig()
    scenario: Dict[str, Any] = field(default_factory=dict)

    def scenario_config(self, **kw) -> ScenarioConfig:
        base = dict(self.scenario)
        base.update({k: v for k, v in kw.items() if v is not None})
        return ScenarioConfig(plant=self.plant, mpc=self.mpc, reference=self.reference, **base)


def _convert(value: str, default):
    value = value.strip()
    if value.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.split(","))
    # untyped (None default): try numeric first
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def _typed(cls, items: Dict[str, str], label: str) -> Dict[str, Any]:
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls) if f.init}
    out = {}
    for k, v in items.items():
        if k not in defaults:
            raise KeyError(f"unknown key {k!r} in [{label}]")
        out[k] = _convert(v, defaults[k])
    return out


_DATA_KEYS = {f.name for f in fields(DataConfig)}
_SCENARIO_TYPES = {"scenario": 1, "epsilon": 0.0, "controller": "", "model": "", "seed": 0, "u0": 0.0}


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive (V_inf, T_mix, ...)
    cp.read_string(text)
    for s in cp.sections():
        if s not in SECTIONS:
            raise KeyError(f"unknown config section [{s}]")
    sec = {s: dict(cp.items(s)) if cp.has_section(s) else {} for s in SECTIONS}

    plant = PlantConfig.from_mapping(sec["plant"])
    tr = dict(sec["training"])
    data_items = {k: tr.pop(k) for k in list(tr) if k in _DATA_KEYS}
    data = DataConfig(**_typed(DataConfig, data_items, "training"))
    training = TrainingOptions(**_typed(TrainingOptions, tr, "training"))
    mpc = MpcConfig(**_typed(MpcConfig, sec["mpc"], "mpc"))
    reference = ReferenceConfig(**_typed(ReferenceConfig, sec["reference"], "reference"))
    scen = {}
    for k, v in sec["scenario"].items():
        if k not in _SCENARIO_TYPES:
            raise KeyError(f"unknown key {k!r} in [scenario]")
        d = _SCENARIO_TYPES[k]
        scen[k] = v.strip() if isinstance(d, str) else _convert(v, d)
    return RunConfig(plant, data, training, mpc, reference, scen)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(p.read_text())


def with_overrides(obj, **kw):
    """``dataclasses.replace`` that ignores ``None`` values."""
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(obj, **kw) if kw else obj


DEFAULT_CONFIG_TEXT = """\
[plant]
V_inf = 8.0
tau = 0.3
k_w = 0.6
T_mix = 20.0
k_ind = 0.25

[training]
n = 4000
data_seed = 7
cutoff_hz = 0.005
split = 0.75
horizon = 10

[mpc]
n_h = 10
q = 1e-4
r = 1e-6
schedule_iters = 2
wind_feedback = reencode
offset_correction = true

[reference]
T = 1000
switch_k = 400
deltaP_seed = 11
deltaP_cutoff = 0.01

[scenario]
scenario = 1
epsilon = 0.05
"""
