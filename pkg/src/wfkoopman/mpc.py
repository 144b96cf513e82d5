"""Receding-horizon farm power tracking.

Two controllers share one condensed QP:

* ``QLMPC`` schedules the turbine-level quasi-LPV model on wind speeds
  predicted by an AE1 (wind) Koopman model.
* ``KMPC`` is plain linear MPC on an AE2 (farm power) Koopman model.

Stacked predictions cover outputs ``y_{k+1} .. y_{k+n_h}``; input ``u_k`` is the
first decision block.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .koopman import KoopmanModel
from .numerics import QpProblem, solve_box_qp
from .plant import FarmPlant, PlantConfig

log = logging.getLogger(__name__)

WIND_FEEDBACK = ("model", "reencode")


@dataclass(frozen=True)
class MpcConfig:
    n_h: int = 10
    q: float = 1e-4
    r: float = 1e-6
    u_lb: float = 0.0
    u_ub: float = 2.0
    schedule_iters: int = 2
    du_max: Optional[float] = None
    wind_feedback: str = "reencode"
    offset_correction: bool = True

    def __post_init__(self):
        if self.n_h < 2:
            raise ValueError("n_h must be >= 2")
        if self.q < 0 or self.r < 0 or self.q + self.r <= 0:
            raise ValueError("weights must be nonnegative with q + r > 0")
        if not self.u_lb < self.u_ub:
            raise ValueError("u_lb must be below u_ub")
        if self.schedule_iters < 1:
            raise ValueError("schedule_iters must be >= 1")
        if self.du_max is not None and self.du_max <= 0:
            raise ValueError("du_max must be positive")
        if self.wind_feedback not in WIND_FEEDBACK:
            raise ValueError(f"wind_feedback must be one of {WIND_FEEDBACK}")


@dataclass
class PredictionMatrices:
    """``y = Lambda x0 + S U`` over the horizon.

    ``Ltilde``/``Stilde`` map onto the tracked output; they default to
    ``Lambda``/``S`` when the model output already is that quantity.
    """

    Lambda: np.ndarray
    S: np.ndarray
    Ltilde: Optional[np.ndarray] = None
    Stilde: Optional[np.ndarray] = None
    n_h: int = 0

    def __post_init__(self):
        if self.Ltilde is None:
            self.Ltilde = self.Lambda
        if self.Stilde is None:
            self.Stilde = self.S

    @property
    def n_u(self) -> int:
        return self.S.shape[1] // self.n_h

    def predict(self, x0, U) -> np.ndarray:
        return self.Ltilde @ np.asarray(x0, float) + self.Stilde @ np.ravel(U)


def _check_dims(A, B, C):
    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C))
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
        raise ValueError("inconsistent A, B, C dimensions")
    return A, B, C


def build_toeplitz(A, B, C, n_h: int) -> PredictionMatrices:
    """Free-response rows ``C A^i`` (i = 1..n_h) and forced blocks ``C A^(i-j) B``."""
    A, B, C = _check_dims(A, B, C)
    return build_toeplitz_ltv(A, [B] * n_h, C, n_h)


def build_toeplitz_ltv(A, Bs: Sequence[np.ndarray], C, n_h: int) -> PredictionMatrices:
    """Toeplitz-like matrices when the input matrix changes along the horizon.

    ``Bs[j]`` multiplies ``u_{k+j}``; block (i, j) is ``C A^(i-j) B_j``.
    """
    if n_h < 1 or len(Bs) < n_h:
        raise ValueError("need one input matrix per horizon step")
    A, B0, C = _check_dims(A, Bs[0], C)
    n_y, n_u = C.shape[0], B0.shape[1]
    # CA[i] = C A^i
    CA = [C]
    for _ in range(n_h):
        CA.append(CA[-1] @ A)
    Lam = np.vstack(CA[1:])
    S = np.zeros((n_h * n_y, n_h * n_u))
    for j in range(n_h):
        Bj = np.atleast_2d(np.asarray(Bs[j], dtype=float))
        for i in range(j, n_h):
            S[i * n_y:(i + 1) * n_y, j * n_u:(j + 1) * n_u] = CA[i - j] @ Bj
    return PredictionMatrices(Lam, S, n_h=n_h)


def map_outputs(pm: PredictionMatrices, Cy: np.ndarray) -> PredictionMatrices:
    """Attach ``Ltilde``/``Stilde`` that apply ``Cy`` to every predicted block."""
    Cy = np.atleast_2d(Cy)
    big = np.kron(np.eye(pm.n_h), Cy)
    return PredictionMatrices(pm.Lambda, pm.S, big @ pm.Lambda, big @ pm.S, n_h=pm.n_h)


# --- turbine-level quasi-LPV model -------------------------------------------

@dataclass(frozen=True)
class TurbineModel:
    """Nominal first-order turbine model used by the qLMPC."""

    tau: float
    rho_a: float
    A_r: float

    @classmethod
    def from_plant(cls, cfg: PlantConfig) -> "TurbineModel":
        return cls(cfg.tau, cfg.rho_a, cfg.A_r)

    @property
    def gain(self) -> float:
        return 0.5 * self.rho_a * self.A_r


def build_farm_qlpv(U_r, tau: float, rho_a: float, A_r: float) -> Tuple[np.ndarray, np.ndarray]:
    """(A_WF, B_WF) for the state ``[P_1, Chat_1, P_2, Chat_2, ...]`` frozen at ``U_r``."""
    U_r = np.atleast_1d(np.asarray(U_r, dtype=float))
    if np.any(U_r <= 0):
        raise ValueError("U_r must be positive")
    n_T = U_r.size
    A = (1.0 - tau) * np.eye(2 * n_T)
    B = np.zeros((2 * n_T, n_T))
    for i, u in enumerate(U_r):
        B[2 * i, i] = tau * 0.5 * rho_a * A_r * u**3
        B[2 * i + 1, i] = tau
    return A, B


def farm_output_row(n_T: int) -> np.ndarray:
    """Row selecting the farm power (sum of the power states)."""
    C = np.zeros((1, 2 * n_T))
    C[0, 0::2] = 1.0
    return C


def estimate_wind_from_power(P, Chat, rho_a: float, A_r: float, last=None,
                             eps_c: float = 1e-3) -> Tuple[np.ndarray, bool]:
    """Steady-state inversion of the power law, per turbine.

    Where ``Chat`` is below ``eps_c`` the previous estimate (``last``) is kept
    and the returned flag is set.
    """
    P = np.clip(np.atleast_1d(np.asarray(P, dtype=float)), 0.0, None)
    Chat = np.atleast_1d(np.asarray(Chat, dtype=float))
    small = Chat <= eps_c
    U = np.cbrt(P / (0.5 * rho_a * A_r * np.where(small, 1.0, Chat)))
    if np.any(small):
        log.warning("thrust too small to invert for turbine(s) %s", np.flatnonzero(small).tolist())
        prev = np.full_like(U, np.nan) if last is None else np.atleast_1d(np.asarray(last, float))
        U = np.where(small, prev, U)
    return U, bool(np.any(small))


# --- QP condensation ---------------------------------------------------------

def difference_operator(n_h: int, n_u: int) -> np.ndarray:
    """First differences of the stacked input, anchored at the previous input."""
    return np.eye(n_h * n_u) - np.eye(n_h * n_u, k=-n_u)


def input_bounds(cfg: MpcConfig, u_prev, n_h: int) -> Tuple[np.ndarray, np.ndarray]:
    """Box bounds over the horizon; a rate bound is folded in step by step."""
    u_prev = np.asarray(u_prev, dtype=float)
    n_u = u_prev.size
    lb = np.full(n_h * n_u, cfg.u_lb)
    ub = np.full(n_h * n_u, cfg.u_ub)
    if cfg.du_max is not None:
        reach = np.repeat(np.arange(1, n_h + 1), n_u) * cfg.du_max
        base = np.tile(u_prev, n_h)
        lb = np.maximum(lb, base - reach)
        ub = np.minimum(ub, base + reach)
        lb = np.minimum(lb, ub)
    return lb, ub


def condense_tracking(free, S, P_ref_traj, cfg: MpcConfig, u_prev) -> QpProblem:
    """QP for ``q ||free + S U - P_ref||^2 + r ||D U - d0||^2`` over box bounds."""
    free = np.asarray(free, dtype=float).ravel()
    S = np.atleast_2d(np.asarray(S, dtype=float))
    ref = np.asarray(P_ref_traj, dtype=float).ravel()
    u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
    n_u = u_prev.size
    if S.shape[0] != free.size or ref.size != free.size:
        raise ValueError("reference, free response and S disagree in length")
    if S.shape[1] % n_u:
        raise ValueError("S columns are not a multiple of the input count")
    n_h = S.shape[1] // n_u
    D = difference_operator(n_h, n_u)
    d0 = np.zeros(n_h * n_u)
    d0[:n_u] = u_prev
    sq, sr = np.sqrt(2.0 * cfg.q), np.sqrt(2.0 * cfg.r)
    M = np.vstack([sq * S, sr * D])
    b = np.concatenate([sq * (ref - free), sr * d0])
    H = 2.0 * (cfg.q * S.T @ S + cfg.r * D.T @ D)
    f = 2.0 * (cfg.q * S.T @ (free - ref) - cfg.r * D.T @ d0)
    lb, ub = input_bounds(cfg, u_prev, n_h)
    return QpProblem(H, f, lb, ub, lsq=(M, b))


def condense_qp(pm: PredictionMatrices, x0, P_ref_traj, cfg: MpcConfig, u_prev) -> QpProblem:
    x0 = np.asarray(x0, dtype=float).ravel()
    if pm.Ltilde.shape[1] != x0.size:
        raise ValueError("x0 length differs from the prediction matrices")
    return condense_tracking(pm.Ltilde @ x0, pm.Stilde, P_ref_traj, cfg, u_prev)


# --- controllers -------------------------------------------------------------

@dataclass
class ControllerState:
    u_prev: np.ndarray
    g_current: Optional[np.ndarray] = None
    U_r_estimates: Optional[np.ndarray] = None
    P_measured: Optional[np.ndarray] = None
    Chat: Optional[np.ndarray] = None
    plan: Optional[np.ndarray] = None
    wind_bias: Optional[np.ndarray] = None
    k: int = 0
    fault: bool = False

    def __post_init__(self):
        self.u_prev = np.atleast_1d(np.asarray(self.u_prev, dtype=float)).copy()


def _solve(p: QpProblem, x0) -> Tuple[Optional[np.ndarray], bool]:
    try:
        return solve_box_qp(p, x0=x0), False
    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("QP failed (%s); holding previous input", exc)
        return None, True


def _plan_or_hold(cs: ControllerState, n_h: int) -> np.ndarray:
    if cs.plan is not None and cs.plan.shape == (n_h, cs.u_prev.size):
        return cs.plan
    return np.tile(cs.u_prev, (n_h, 1))


def update_wind_estimate(cs: ControllerState, ae1: KoopmanModel, turbine: TurbineModel,
                         mode: str, offset_correction: bool = False) -> None:
    """Refresh ``g_current`` and the wind estimates for the current sample.

    ``reencode`` lifts the power-inverted winds each sample; ``model``
    propagates the lifted state with the applied input. The first call always starts
    from the power-inverted winds. With ``offset_correction`` the gap between
    the inverted and the decoded winds is kept in ``cs.wind_bias`` and added
    to every predicted wind (a constant output-disturbance estimate).
    """
    cs.wind_bias = None
    if cs.k == 0 or mode == "reencode" or cs.g_current is None:
        U, _ = estimate_wind_from_power(cs.P_measured, cs.Chat, turbine.rho_a, turbine.A_r,
                                        last=cs.U_r_estimates)
        if np.any(~np.isfinite(U)):
            raise ValueError("no valid wind estimate")
        cs.g_current = ae1.lift(U)
        if offset_correction:
            cs.wind_bias = U - ae1.decode(cs.g_current)
    else:
        cs.g_current = ae1.step(cs.g_current, cs.u_prev)
    cs.U_r_estimates = ae1.decode(cs.g_current)
    if cs.wind_bias is not None:
        cs.U_r_estimates = cs.U_r_estimates + cs.wind_bias


def predict_winds(ae1: KoopmanModel, g0, plan: np.ndarray, bias=None) -> np.ndarray:
    """Wind at steps k .. k+n_h-1 under the planned inputs, shape (n_h, n_T)."""
    out = np.empty((plan.shape[0], ae1.n_y))
    g = g0
    Un = ae1.u_norm.apply(plan.T).T
    for j in range(plan.shape[0]):
        out[j] = ae1.decode(g)
        g = ae1.A @ g + ae1.B @ Un[j]
    if bias is not None:
        out += bias
    return out


def qlmpc_step(cs: ControllerState, ae1: KoopmanModel, P_ref_traj, cfg: MpcConfig,
               turbine: TurbineModel) -> np.ndarray:
    """One qLMPC decision; ``cs.P_measured`` and ``cs.Chat`` must be current."""
    if ae1.n_y != cs.u_prev.size:
        raise ValueError("AE1 model must output one wind speed per turbine")
    n_h, n_T = cfg.n_h, cs.u_prev.size
    update_wind_estimate(cs, ae1, turbine, cfg.wind_feedback, cfg.offset_correction)
    x0 = np.empty(2 * n_T)
    x0[0::2] = cs.P_measured
    x0[1::2] = cs.Chat
    C_wf = farm_output_row(n_T)
    plan = _plan_or_hold(cs, n_h)
    cs.fault = False
    for _ in range(cfg.schedule_iters):
        winds = np.maximum(predict_winds(ae1, cs.g_current, plan, cs.wind_bias), 1e-3)
        A = None
        Bs = []
        for j in range(n_h):
            A, Bj = build_farm_qlpv(winds[j], turbine.tau, turbine.rho_a, turbine.A_r)
            Bs.append(Bj)
        pm = build_toeplitz_ltv(A, Bs, C_wf, n_h)
        p = condense_qp(pm, x0, P_ref_traj, cfg, cs.u_prev)
        sol, failed = _solve(p, plan.ravel())
        if failed:
            cs.fault = True
            cs.plan = None
            return cs.u_prev.copy()
        plan = sol.reshape(n_h, n_T)
    cs.plan = np.vstack([plan[1:], plan[-1:]])
    return plan[0].copy()


def kmpc_step(cs: ControllerState, ae2: KoopmanModel, P_ref_traj, cfg: MpcConfig) -> np.ndarray:
    """One KMPC decision from the measured turbine powers in ``cs.P_measured``."""
    if ae2.n_y != 1:
        raise ValueError("AE2 model must have a single farm-power output")
    cs.g_current = ae2.lift(np.asarray(cs.P_measured, dtype=float))
    free, S, _ = ae2.free_and_forced(cs.g_current, cfg.n_h)
    p = condense_tracking(free, S, P_ref_traj, cfg, cs.u_prev)
    x0 = _plan_or_hold(cs, cfg.n_h).ravel()
    sol, failed = _solve(p, x0)
    cs.fault = failed
    if failed:
        cs.plan = None
        return cs.u_prev.copy()
    plan = sol.reshape(cfg.n_h, cs.u_prev.size)
    cs.plan = np.vstack([plan[1:], plan[-1:]])
    return plan[0].copy()


class QLMPC:
    name = "qlmpc_ae1"

    def __init__(self, ae1: KoopmanModel, turbine: TurbineModel, cfg: MpcConfig = MpcConfig()):
        self.ae1, self.turbine, self.cfg = ae1, turbine, cfg
        self.cs: Optional[ControllerState] = None

    def reset(self, u0) -> None:
        self.cs = ControllerState(u_prev=u0, Chat=np.array(u0, dtype=float))

    def step(self, meas: Dict[str, float], P_ref_traj) -> np.ndarray:
        cs = self.cs
        if cs.k > 0:
            # internal thrust filter driven by the applied input
            cs.Chat = (1.0 - self.turbine.tau) * cs.Chat + self.turbine.tau * cs.u_prev
        cs.P_measured = np.array([meas["P1"], meas["P2"]])
        u = qlmpc_step(cs, self.ae1, P_ref_traj, self.cfg, self.turbine)
        cs.u_prev, cs.k = u, cs.k + 1
        return u


class KMPC:
    name = "kmpc_ae2"

    def __init__(self, ae2: KoopmanModel, cfg: MpcConfig = MpcConfig()):
        self.ae2, self.cfg = ae2, cfg
        self.cs: Optional[ControllerState] = None

    def reset(self, u0) -> None:
        self.cs = ControllerState(u_prev=u0)

    def step(self, meas: Dict[str, float], P_ref_traj) -> np.ndarray:
        cs = self.cs
        cs.P_measured = np.array([meas["P1"], meas["P2"]])
        u = kmpc_step(cs, self.ae2, P_ref_traj, self.cfg)
        cs.u_prev, cs.k = u, cs.k + 1
        return u


# --- closed loop -------------------------------------------------------------

SIMLOG_COLUMNS = ("k", "Pref", "PWF", "P1", "P2", "CT1", "CT2",
                  "Ur1_true", "Ur2_true", "Ur1_est", "Ur2_est", "fault")


@dataclass
class SimLog:
    data: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.data.get("k", ()))

    def __getitem__(self, key) -> np.ndarray:
        return self.data[key]

    @property
    def inputs(self) -> np.ndarray:
        return np.column_stack([self.data["CT1"], self.data["CT2"]])

    def to_csv(self, path=None) -> str:
        lines = [",".join(SIMLOG_COLUMNS)]
        for i in range(len(self)):
            row = []
            for c in SIMLOG_COLUMNS:
                v = self.data[c][i]
                row.append(str(int(v)) if c in ("k", "fault") else f"{v:.12g}")
            lines.append(",".join(row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "SimLog":
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        header = Path(path).read_text().splitlines()[0].split(",")
        if tuple(header) != SIMLOG_COLUMNS:
            raise ValueError("unexpected SimLog header")
        return cls({c: raw[:, i] for i, c in enumerate(header)})


def _horizon(reference: np.ndarray, k: int, n_h: int) -> np.ndarray:
    idx = np.minimum(np.arange(k + 1, k + 1 + n_h), reference.size - 1)
    return reference[idx]


def closed_loop(plant: FarmPlant, controller, reference, T: int, u0=None) -> SimLog:
    """Run ``T`` samples; row k holds the measurement at k and the input applied at k."""
    reference = np.asarray(reference, dtype=float).ravel()
    if reference.size < T:
        raise ValueError("reference shorter than the simulation")
    n_h = controller.cfg.n_h
    u0 = np.asarray(plant.state.Chat if u0 is None else u0, dtype=float)
    controller.reset(u0)
    rows: List[Tuple] = []
    for k in range(T):
        meas = plant.measure()
        u = controller.step(meas, _horizon(reference, k, n_h))
        est = controller.cs.U_r_estimates
        est = (np.nan, np.nan) if est is None or np.size(est) != 2 else est
        rows.append((k, reference[k], meas["P1"] + meas["P2"], meas["P1"], meas["P2"], u[0], u[1],
                     meas["U_r1"], meas["U_r2"], est[0], est[1], int(controller.cs.fault)))
        plant.step(u)
    arr = np.array(rows, dtype=float)
    return SimLog({c: arr[:, i] for i, c in enumerate(SIMLOG_COLUMNS)})
