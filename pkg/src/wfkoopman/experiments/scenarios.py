"""Reference synthesis, closed-loop scenarios and their metrics."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..koopman import load_model, vaf
from ..mpc import KMPC, QLMPC, MpcConfig, SimLog, TurbineModel, closed_loop
from ..plant import FarmPlant, PlantConfig, generate_excitation, greedy_power

log = logging.getLogger(__name__)

CONTROLLERS = ("qlmpc_ae1", "kmpc_ae2", "qlmpc_k24_baseline")
SETTLE = 50
TE_DEFINITION = f"TE = RMS(P_ref - P_WF) in W over samples k >= {SETTLE}"
AA_DEFINITION = f"AA = mean ||U_k - U_(k-1)||^2 over samples k >= {SETTLE}"


@dataclass(frozen=True)
class ReferenceConfig:
    T: int = 1000
    switch_k: int = 400
    base: tuple = (0.8, 0.95)
    amplitude: tuple = (0.35, 0.15)
    deltaP_file: Optional[str] = None
    deltaP_seed: int = 11
    deltaP_cutoff: float = 0.01

    def __post_init__(self):
        if not 0 < self.switch_k < self.T:
            raise ValueError("need 0 < switch_k < T")
        for v in (*self.base, *self.amplitude):
            if not 0 < v <= 1:
                raise ValueError("reference factors must lie in (0, 1]")


def reference_signal(k: int, P_greedy: float, deltaP, cfg: ReferenceConfig) -> float:
    """Farm power demand at sample k (two regimes split at ``switch_k``)."""
    if k >= cfg.T:
        raise ValueError("k beyond reference length")
    i = 0 if k <= cfg.switch_k else 1
    return cfg.base[i] * P_greedy + cfg.amplitude[i] * P_greedy * float(deltaP[k])


def synth_deltaP(T: int, seed: int, cutoff_hz: float) -> np.ndarray:
    """Band-limited zero-mean demand fluctuation, peak magnitude 1."""
    if T <= 0:
        raise ValueError("T must be positive")
    x = generate_excitation(T, -1.0, 1.0, cutoff_hz, seed, channels=1)[:, 0]
    x = x - x.mean()
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def load_deltaP(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=1).ravel()


def reference_trajectory(P_greedy: float, cfg: ReferenceConfig, deltaP=None) -> np.ndarray:
    if deltaP is None:
        deltaP = (load_deltaP(cfg.deltaP_file) if cfg.deltaP_file
                  else synth_deltaP(cfg.T, cfg.deltaP_seed, cfg.deltaP_cutoff))
    if len(deltaP) < cfg.T:
        raise ValueError("deltaP shorter than T")
    return np.array([reference_signal(k, P_greedy, deltaP, cfg) for k in range(cfg.T)])


def tracking_error(log_: SimLog, settle: int = SETTLE) -> float:
    e = np.asarray(log_["Pref"]) - np.asarray(log_["PWF"])
    e = e[settle:] if e.size > settle else e
    return float(np.sqrt(np.mean(e**2)))


def actuator_activity(log_: SimLog, settle: int = SETTLE) -> float:
    U = log_.inputs
    dU = np.diff(U, axis=0)
    # increments U_k - U_(k-1) for k >= settle
    dU = dU[max(settle - 1, 0):] if dU.shape[0] > settle else dU
    if dU.shape[0] == 0:
        return 0.0
    return float(np.mean(np.sum(dU**2, axis=1)))


@dataclass
class Metrics:
    TE: float
    AA: float
    VAF: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_log(cls, log_: SimLog) -> "Metrics":
        v = {}
        sl = slice(SETTLE, None)
        for ch in ("Ur1", "Ur2"):
            est = np.asarray(log_[f"{ch}_est"])[sl]
            true = np.asarray(log_[f"{ch}_true"])[sl]
            if np.all(np.isfinite(est)) and np.var(true) > 0:
                v[ch] = vaf(true, est)
        v["PWF"] = vaf(np.asarray(log_["Pref"])[sl], np.asarray(log_["PWF"])[sl])
        return cls(tracking_error(log_), actuator_activity(log_), v)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int = 1
    epsilon: float = 0.05
    controller: str = "qlmpc_ae1"
    model: Optional[str] = None
    plant: PlantConfig = PlantConfig()
    mpc: MpcConfig = MpcConfig()
    reference: ReferenceConfig = ReferenceConfig()
    seed: int = 0
    u0: float = 1.0

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ValueError("scenario must be 1 or 2")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")

    @property
    def effective_epsilon(self) -> float:
        return 0.0 if self.scenario == 1 else self.epsilon

    def plant_config(self) -> PlantConfig:
        return self.plant.with_(cp_offset=self.effective_epsilon)


@dataclass
class ScenarioResult:
    metrics: Metrics
    log: SimLog
    reference: np.ndarray
    P_greedy: float
    cfg: ScenarioConfig

    def metrics_dict(self) -> dict:
        return {
            "scenario": self.cfg.scenario,
            "controller": self.cfg.controller,
            "seed": self.cfg.seed,
            "epsilon": self.cfg.effective_epsilon,
            "te_watts": self.metrics.TE,
            "aa": self.metrics.AA,
            "vaf": self.metrics.VAF,
            "p_greedy": self.P_greedy,
            "reference_range": float(np.ptp(self.reference)),
            "te_definition": TE_DEFINITION,
            "aa_definition": AA_DEFINITION,
        }


def build_controller(cfg: ScenarioConfig, model):
    if cfg.controller == "kmpc_ae2":
        return KMPC(model, cfg.mpc)
    # both qLMPC variants use the nominal turbine model: no power-coefficient drift
    return QLMPC(model, TurbineModel.from_plant(cfg.plant), cfg.mpc)


def run_scenario(cfg: ScenarioConfig, model=None, deltaP=None) -> ScenarioResult:
    """Closed-loop run of one controller on one scenario.

    ``model`` may be given directly; otherwise it is loaded from
    ``cfg.model`` before anything is simulated.
    """
    if model is None:
        if not cfg.model or not Path(cfg.model).is_file():
            raise FileNotFoundError(f"model file not found: {cfg.model}")
        model = load_model(cfg.model)
    if cfg.reference.deltaP_file and not Path(cfg.reference.deltaP_file).is_file():
        raise FileNotFoundError(f"deltaP file not found: {cfg.reference.deltaP_file}")
    pcfg = cfg.plant_config()
    P_greedy = greedy_power(pcfg)
    ref = reference_trajectory(P_greedy, cfg.reference, deltaP)
    plant = FarmPlant(pcfg, np.full(2, cfg.u0))
    ctrl = build_controller(cfg, model)
    simlog = closed_loop(plant, ctrl, ref, cfg.reference.T)
    n_fault = int(np.sum(simlog["fault"]))
    if n_fault:
        log.warning("%d controller faults during the run", n_fault)
    return ScenarioResult(Metrics.from_log(simlog), simlog, ref, P_greedy, cfg)


def format_table(rows) -> str:
    """Aligned text table of metrics dictionaries."""
    head = ("scenario", "controller", "eps", "TE [kW]", "AA [1e-3]", "VAF Ur1", "VAF Ur2", "VAF PWF")
    body = []
    for r in rows:
        v = r.get("vaf", {})
        body.append((str(r["scenario"]), r["controller"], f"{r.get('epsilon', 0.0):g}",
                     f"{r['te_watts'] / 1e3:.2f}", f"{r['aa'] * 1e3:.3f}",
                     *(f"{v[c]:.1f}" if c in v else "-" for c in ("Ur1", "Ur2", "PWF"))))
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*b) for b in body]
    lines += ["", TE_DEFINITION, AA_DEFINITION]
    return "\n".join(lines) + "\n"


def write_outputs(res: ScenarioResult, out_dir, figures: bool = True) -> Dict[str, Path]:
    """SimLog CSV, metrics JSON, text report and (optionally) PNG figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"s{res.cfg.scenario}_{res.cfg.controller}"
    paths = {"simlog": out / f"{stem}_simlog.csv", "metrics": out / f"{stem}_metrics.json",
             "report": out / f"{stem}_report.txt"}
    res.log.to_csv(paths["simlog"])
    md = res.metrics_dict()
    paths["metrics"].write_text(json.dumps(md, indent=2, sort_keys=True) + "\n")
    paths["report"].write_text(format_table([md]))
    if figures:
        from .figures import plot_simlog

        paths["figure"] = plot_simlog(res.log, out / f"{stem}.png",
                                      title=f"scenario {res.cfg.scenario}, {res.cfg.controller}")
    return paths


def recompute_metrics(simlog_path) -> Metrics:
    """Metrics straight from a SimLog CSV."""
    return Metrics.from_log(SimLog.from_csv(simlog_path))


__all__ = [
    "ReferenceConfig", "ScenarioConfig", "ScenarioResult", "Metrics", "reference_signal",
    "synth_deltaP", "reference_trajectory", "tracking_error", "actuator_activity",
    "run_scenario", "write_outputs", "format_table", "recompute_metrics",
]
