"""Surrogate two-turbine wind farm.

Each turbine follows the first-order power / filtered-thrust recursion used by
the controllers. The downstream turbine sees a wake whose deficit follows the
upstream actuator-disc induction after a pure transport delay and a
first-order mixing lag. Both rotors additionally see a small blockage from
their own (filtered) induction, so the upstream effective wind is not constant.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .dataset import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlantConfig:
    V_inf: float = 8.0
    D: float = 126.0
    n_T: int = 2
    spacing: Optional[float] = None  # defaults to 5 D
    dt: float = 1.0
    tau: float = 0.3
    rho_a: float = 1.225
    n_r: int = 5
    k_w: float = 0.6
    T_mix: float = 20.0
    k_ind: float = 0.25
    C_T_max: float = 2.0
    cp_offset: float = 0.0
    noise_seed: int = 0
    A_r: float = field(init=False)

    def __post_init__(self):
        if self.spacing is None:
            object.__setattr__(self, "spacing", 5.0 * self.D)
        object.__setattr__(self, "A_r", math.pi * (self.D / 2.0) ** 2)
        if self.n_T != 2:
            raise ValueError("the surrogate farm has exactly two turbines")
        checks = {
            "V_inf > 0": self.V_inf > 0,
            "D > 0": self.D > 0,
            "spacing > 0": self.spacing > 0,
            "0 < tau <= 1": 0 < self.tau <= 1,
            "dt > 0": self.dt > 0,
            "0 <= k_w < 1": 0 <= self.k_w < 1 or self.k_w == 1.0,
            "0 <= k_ind < 1": 0 <= self.k_ind < 1,
            "cp_offset > -1": self.cp_offset > -1,
            "T_mix >= dt": self.T_mix >= self.dt,
            "n_r >= 1": self.n_r >= 1,
            "C_T_max > 0": self.C_T_max > 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError("invalid plant config: " + ", ".join(bad))

    @property
    def delay(self) -> int:
        return int(round(self.spacing / self.V_inf / self.dt))

    @property
    def power_gain(self) -> float:
        """0.5 rho_a A_r, the factor in front of U^3 C_T."""
        return 0.5 * self.rho_a * self.A_r

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self) if f.init)

    @classmethod
    def from_mapping(cls, items: Dict[str, str]) -> "PlantConfig":
        types = {f.name: f.type for f in fields(cls) if f.init}
        kw = {}
        for k, v in items.items():
            if k not in types:
                raise KeyError(f"unknown plant key {k!r}")
            v = str(v).strip()
            if v == "None":
                kw[k] = None
            elif k in ("n_T", "n_r", "noise_seed"):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "PlantConfig":
        items = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            k, v = line.split("=", 1)
            items[k.strip()] = v.strip()
        return cls.from_mapping(items)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def with_(self, **kw) -> "PlantConfig":
        base = {f.name: getattr(self, f.name) for f in fields(self) if f.init}
        base.update(kw)
        if "D" in kw and "spacing" not in kw:
            base["spacing"] = None
        return PlantConfig(**base)


@dataclass
class SegmentWinds:
    v_x: np.ndarray
    v_y: np.ndarray

    def __post_init__(self):
        self.v_x = np.atleast_1d(np.asarray(self.v_x, dtype=float))
        self.v_y = np.atleast_1d(np.asarray(self.v_y, dtype=float))
        if self.v_x.shape != self.v_y.shape:
            raise ValueError("v_x and v_y lengths differ")
        if not (np.all(np.isfinite(self.v_x)) and np.all(np.isfinite(self.v_y))):
            raise ValueError("non-finite segment wind")

    @classmethod
    def uniform(cls, speed: float, n_r: int) -> "SegmentWinds":
        return cls(np.full(n_r, speed), np.zeros(n_r))


def effective_wind_speed(w: SegmentWinds, gamma: float = 0.0) -> float:
    """Yaw-projected RMS of the rotor-segment wind speeds."""
    if w.v_x.size == 0:
        raise ValueError("empty segment list")
    return math.cos(gamma) * math.sqrt(float(np.mean(w.v_x**2 + w.v_y**2)))


def induction(ct) -> np.ndarray:
    """Actuator-disc axial induction for the local thrust coefficient C'_T."""
    ct = np.asarray(ct, dtype=float)
    return ct / (4.0 + ct)


def turbine_step(P, Chat, U_r, C_T, cfg: PlantConfig, apply_offset: bool = True):
    """One sample of the turbine power / filtered-thrust recursion.

    Works elementwise, so arrays of turbines may be passed.
    """
    U_r = np.asarray(U_r, dtype=float)
    if np.any(U_r < 0):
        raise ValueError("negative effective wind speed")
    eps = cfg.cp_offset if apply_offset else 0.0
    tau = cfg.tau
    P_new = (1.0 - tau) * np.asarray(P, float) + tau * cfg.power_gain * U_r**3 * np.asarray(C_T, float) * (1.0 + eps)
    Chat_new = (1.0 - tau) * np.asarray(Chat, float) + tau * np.asarray(C_T, float)
    return P_new, Chat_new


@dataclass
class PlantState:
    P: np.ndarray
    Chat: np.ndarray
    delay_line: np.ndarray
    head: int
    U_wake: float  # wake inflow at turbine 2 (before its own blockage)
    U_r: np.ndarray

    @classmethod
    def steady(cls, cfg: PlantConfig, u=(0.0, 0.0)) -> "PlantState":
        """Settled state for a constant input held forever."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, cfg.C_T_max)
        a1 = float(induction(u[0]))
        U_wake = cfg.V_inf * (1.0 - 2.0 * a1 * (1.0 - cfg.k_w))
        st = cls(P=np.zeros(2), Chat=u.copy(), delay_line=np.full(cfg.delay, a1), head=0,
                 U_wake=U_wake, U_r=np.zeros(2))
        st.U_r = rotor_winds(st, cfg)
        st.P = cfg.power_gain * st.U_r**3 * u * (1.0 + cfg.cp_offset)
        return st

    def copy(self) -> "PlantState":
        return PlantState(self.P.copy(), self.Chat.copy(), self.delay_line.copy(), self.head,
                          self.U_wake, self.U_r.copy())


def rotor_winds(state: PlantState, cfg: PlantConfig) -> np.ndarray:
    """Effective winds at both rotors from the inflow and their own blockage."""
    inflow = (cfg.V_inf, state.U_wake)
    block = 1.0 - cfg.k_ind * induction(state.Chat)
    return np.array([effective_wind_speed(SegmentWinds.uniform(inflow[i] * block[i], cfg.n_r))
                     for i in range(2)])


def wake_step(state: PlantState, C_T1: float, cfg: PlantConfig) -> float:
    """Advance the wake: delay the upstream induction, then lag toward the deficit."""
    a1 = float(induction(np.clip(C_T1, 0.0, cfg.C_T_max)))
    d = state.delay_line.size
    if d == 0:
        a_delayed = a1
    else:
        a_delayed = float(state.delay_line[state.head])
        state.delay_line[state.head] = a1
        state.head = (state.head + 1) % d
    U_t = cfg.V_inf * (1.0 - 2.0 * a_delayed * (1.0 - cfg.k_w))
    state.U_wake = state.U_wake + (cfg.dt / cfg.T_mix) * (U_t - state.U_wake)
    return state.U_wake


def farm_step(state: PlantState, u, cfg: PlantConfig):
    """Advance the farm one sample under thrust inputs ``u = [C_T1, C_T2]``.

    Mutates and returns ``state``; outputs describe the new sample.
    """
    u = np.asarray(u, dtype=float)
    u_c = np.clip(u, 0.0, cfg.C_T_max)
    clamped = bool(np.any(u_c != u))
    if clamped:
        log.warning("thrust input %s clamped to [0, %g]", u, cfg.C_T_max)
    U_r = rotor_winds(state, cfg)
    state.P, state.Chat = turbine_step(state.P, state.Chat, U_r, u_c, cfg)
    wake_step(state, u_c[0], cfg)
    state.U_r = rotor_winds(state, cfg)
    out = {
        "P1": float(state.P[0]),
        "P2": float(state.P[1]),
        "P_WF": float(state.P[0] + state.P[1]),
        "U_r1": float(state.U_r[0]),
        "U_r2": float(state.U_r[1]),
        "clamped": clamped,
    }
    return state, out


class FarmPlant:
    """Stateful convenience wrapper used by the closed loop."""

    def __init__(self, cfg: PlantConfig, u0=None):
        self.cfg = cfg
        u0 = np.full(2, 0.5 * cfg.C_T_max) if u0 is None else np.asarray(u0, float)
        self.state = PlantState.steady(cfg, u0)
        self.settle(u0)

    def settle(self, u, n: int | None = None) -> None:
        n = preroll_length(self.cfg) if n is None else n
        for _ in range(n):
            farm_step(self.state, u, self.cfg)

    def measure(self) -> Dict[str, float]:
        return {"P1": float(self.state.P[0]), "P2": float(self.state.P[1]),
                "U_r1": float(self.state.U_r[0]), "U_r2": float(self.state.U_r[1])}

    def step(self, u) -> Dict[str, float]:
        return farm_step(self.state, u, self.cfg)[1]


def preroll_length(cfg: PlantConfig) -> int:
    return 2 * cfg.delay + int(math.ceil(5 * cfg.T_mix / cfg.dt))


def generate_excitation(n: int, lo: float, hi: float, cutoff_hz: float, seed: int,
                        dt: float = 1.0, channels: int = 2) -> np.ndarray:
    """Band-limited uniform noise, shape (n, channels).

    Uniform white noise is low-pass filtered (first order, given cutoff), its
    deviations re-amplified to restore the white-noise variance, and clamped
    back into [lo, hi].
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not lo < hi:
        raise ValueError("lo must be < hi")
    if not 0 < cutoff_hz < 1.0 / (2.0 * dt):
        raise ValueError("cutoff must lie in (0, Nyquist)")
    rng = np.random.default_rng(seed)
    white = rng.uniform(lo, hi, size=(n, channels))
    alpha = 1.0 - math.exp(-2.0 * math.pi * cutoff_hz * dt)
    mid = 0.5 * (lo + hi)
    y = np.empty_like(white)
    prev = np.full(channels, mid)
    for k in range(n):
        prev = prev + alpha * (white[k] - prev)
        y[k] = prev
    gain = math.sqrt((2.0 - alpha) / alpha)
    return np.clip(mid + gain * (y - mid), lo, hi)


def simulate_openloop(cfg: PlantConfig, inputs) -> Dataset:
    """Run the plant over ``inputs`` (n x 2) from a settled mid-thrust state."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.size == 0:
        raise ValueError("inputs must be nonempty")
    n = inputs.shape[0]
    plant = FarmPlant(cfg)
    X = np.empty((4, n))
    for k in range(n):
        X[:, k] = (plant.state.U_r[0], plant.state.U_r[1], plant.state.P[0], plant.state.P[1])
        plant.step(inputs[k])
    ds = Dataset(X, inputs.T.copy(), cfg.dt)
    ds.meta["cp_offset"] = cfg.cp_offset
    return ds


def greedy_power(cfg: PlantConfig, max_steps: int = 100_000) -> float:
    """Settled farm power with both turbines at maximum thrust."""
    u = np.full(2, cfg.C_T_max)
    state = PlantState.steady(cfg, np.zeros(2))
    prev = None
    calm = 0
    for _ in range(max_steps):
        _, out = farm_step(state, u, cfg)
        p = out["P_WF"]
        if prev is not None and abs(p - prev) < 1e-6 * abs(p):
            calm += 1
            if calm >= 50:
                return p
        else:
            calm = 0
        prev = p
    raise RuntimeError("greedy power did not converge")
