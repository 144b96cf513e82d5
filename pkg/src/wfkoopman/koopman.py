"""Koopman linear predictors: lifting, EDMD fit, rollout, VAF and model files."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .autoencoder.network import Network, NetworkSpec, forward
from .dataset import Dataset
from .numerics import DEFAULT_PINV_TOL, pinv, svd

log = logging.getLogger(__name__)

LIFTING_KINDS = ("identity", "affine", "encoder", "cubic")
RIDGE_COND = 1e10


@dataclass
class Normalizer:
    """Per-channel affine map ``z = (v - mean) / scale``."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        if np.any(self.scale <= 0):
            raise ValueError("normalizer scale must be positive")

    @classmethod
    def identity(cls, n: int) -> "Normalizer":
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalizer":
        """Zero mean, unit variance per row; constant rows keep scale 1."""
        data = np.atleast_2d(data)
        sd = data.std(axis=1)
        return cls(data.mean(axis=1), np.where(sd > 0, sd, 1.0))

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.mean == 0) and np.all(self.scale == 1))

    def __len__(self):
        return self.mean.size

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return (v - self.mean) / self.scale
        return (v - self.mean[:, None]) / self.scale[:, None]

    def invert(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return z * self.scale + self.mean
        return z * self.scale[:, None] + self.mean[:, None]


@dataclass
class Lifting:
    """Map from physical state to lifted state.

    Kinds: ``identity`` (g = x), ``affine`` (g = [x; 1]), ``cubic``
    (g = [x; x**2; x**3; 1], a hand-crafted polynomial dictionary) and
    ``encoder`` (g = enc(x), or [x; enc(x)] with ``include_state``). The state
    is normalized by ``x_norm`` before lifting.
    """

    kind: str
    n_x: int
    encoder: Optional[Network] = None
    include_state: bool = False
    x_norm: Optional[Normalizer] = None

    def __post_init__(self):
        if self.kind not in LIFTING_KINDS:
            raise ValueError(f"unknown lifting kind {self.kind!r}")
        if self.kind == "encoder":
            if self.encoder is None:
                raise ValueError("encoder lifting needs a network")
            if self.encoder.n_in != self.n_x:
                raise ValueError("encoder input width differs from n_x")
        if self.x_norm is None:
            self.x_norm = Normalizer.identity(self.n_x)

    @property
    def n_g(self) -> int:
        if self.kind == "identity":
            return self.n_x
        if self.kind == "affine":
            return self.n_x + 1
        if self.kind == "cubic":
            return 3 * self.n_x + 1
        return self.encoder.n_out + (self.n_x if self.include_state else 0)

    def lift_normalized(self, Z: np.ndarray) -> np.ndarray:
        vec = Z.ndim == 1
        Z = Z[:, None] if vec else Z
        if self.kind == "identity":
            G = Z.copy()
        elif self.kind == "affine":
            G = np.vstack([Z, np.ones((1, Z.shape[1]))])
        elif self.kind == "cubic":
            G = np.vstack([Z, Z**2, Z**3, np.ones((1, Z.shape[1]))])
        else:
            E = forward(self.encoder, Z)[0]
            G = np.vstack([Z, E]) if self.include_state else E
        return G[:, 0] if vec else G

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n_x:
            raise ValueError(f"lifting expects {self.n_x} states, got {x.shape[0]}")
        return self.lift_normalized(self.x_norm.apply(x))


@dataclass
class SnapshotMatrices:
    G_u: np.ndarray
    G_plus: np.ndarray
    X_plus: np.ndarray
    X_now: Optional[np.ndarray] = None

    def __post_init__(self):
        m = self.G_u.shape[1]
        if self.G_plus.shape[1] != m or self.X_plus.shape[1] != m:
            raise ValueError("snapshot matrices have inconsistent column counts")

    @property
    def n_g(self) -> int:
        return self.G_plus.shape[0]

    @property
    def n_u(self) -> int:
        return self.G_u.shape[0] - self.n_g


def build_snapshot_matrices(d: Dataset, lift: Lifting, outputs: Sequence[str] | np.ndarray | None = None,
                            u_norm: Optional[Normalizer] = None,
                            y_norm: Optional[Normalizer] = None,
                            states: Sequence[str] | None = None) -> SnapshotMatrices:
    """Stack lifted snapshots and one-step-ahead outputs.

    ``states`` names the dataset channels fed to the lifting (default: all);
    ``outputs`` names the channels placed in X_plus (default: the same).
    """
    X = d.X if states is None else d.states(states)
    Y = X if outputs is None else d.states(outputs)
    if X.shape[0] != lift.n_x:
        raise ValueError("dataset state width does not match lifting")
    n_o = d.n_o
    if n_o < lift.n_g + d.n_u + 1:
        raise ValueError("insufficient snapshots")
    u_norm = u_norm or Normalizer.identity(d.n_u)
    y_norm = y_norm or Normalizer.identity(Y.shape[0])
    G = lift(X)
    Un = u_norm.apply(d.U)
    Yn = y_norm.apply(Y)
    return SnapshotMatrices(
        G_u=np.vstack([G[:, :-1], Un[:, :-1]]),
        G_plus=G[:, 1:].copy(),
        X_plus=Yn[:, 1:].copy(),
        X_now=Yn[:, :-1].copy(),
    )


@dataclass
class KoopmanModel:
    """Lifted linear predictor ``g+ = A g + B u_n``, ``y_n = C g``.

    Inputs and outputs are normalized with ``u_norm`` / ``y_norm`` (identity for
    raw EDMD models); the lifting carries its own state normalization.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    lifting: Lifting
    output_names: Tuple[str, ...] = ()
    input_names: Tuple[str, ...] = ()
    state_names: Tuple[str, ...] = ()
    u_norm: Optional[Normalizer] = None
    y_norm: Optional[Normalizer] = None
    info: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        n_g = self.A.shape[0]
        if self.A.shape != (n_g, n_g) or self.B.shape[0] != n_g or self.C.shape[1] != n_g:
            raise ValueError("inconsistent model dimensions")
        if self.lifting.n_g != n_g:
            raise ValueError("lifting dimension differs from A")
        if self.u_norm is None:
            self.u_norm = Normalizer.identity(self.n_u)
        if self.y_norm is None:
            self.y_norm = Normalizer.identity(self.n_y)
        self.output_names = tuple(self.output_names) or tuple(f"y{i}" for i in range(self.n_y))
        self.input_names = tuple(self.input_names) or tuple(f"u{i}" for i in range(self.n_u))
        self.state_names = tuple(self.state_names) or tuple(f"x{i}" for i in range(self.lifting.n_x))
        if "spectral_radius" not in self.info:
            self.info["spectral_radius"] = float(np.max(np.abs(np.linalg.eigvals(self.A))))

    @property
    def n_g(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def lift(self, x) -> np.ndarray:
        return self.lifting(x)

    def step(self, g, u) -> np.ndarray:
        return self.A @ g + self.B @ self.u_norm.apply(np.asarray(u, dtype=float))

    def decode(self, g) -> np.ndarray:
        return self.y_norm.invert(self.C @ g)

    def free_and_forced(self, g0, n_h: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Physical-unit prediction ``y = free + S_phys @ U`` over steps 1..n_h.

        Returns (free response, S_phys, per-step offset) where U stacks raw
        inputs; the input normalization is folded into S_phys and free.
        """
        from .mpc import build_toeplitz

        pm = build_toeplitz(self.A, self.B, self.C, n_h)
        ys = np.tile(self.y_norm.scale, n_h)
        yo = np.tile(self.y_norm.mean, n_h)
        inv_us = np.tile(1.0 / self.u_norm.scale, n_h)
        um = np.tile(self.u_norm.mean, n_h)
        S_phys = ys[:, None] * pm.S * inv_us[None, :]
        free = ys * (pm.Lambda @ g0 - pm.S @ (um * inv_us)) + yo
        return free, S_phys, yo


def _residual(T, K, G):
    den = np.linalg.norm(T)
    return float(np.linalg.norm(T - K @ G) / (den if den > 0 else 1.0))


def solve_least_squares(T: np.ndarray, G: np.ndarray, tol: float = DEFAULT_PINV_TOL,
                        ridge: bool = True) -> Tuple[np.ndarray, float, bool]:
    """``K = T G^dagger`` with a Tikhonov fallback for badly conditioned G.

    Returns (K, condition number of G, whether the ridge fallback was used).
    """
    U, s, Vt = svd(G)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    if ridge and cond > RIDGE_COND:
        GG = G @ G.T
        lam = 1e-8 * np.trace(GG) / G.shape[0]
        log.info("ill-conditioned snapshot matrix (cond=%.3g); ridge lambda=%.3g", cond, lam)
        K = np.linalg.solve(GG + lam * np.eye(G.shape[0]), G @ T.T).T
        return K, cond, True
    keep = s > tol * s[0]
    if not np.all(keep):
        log.info("rank-deficient snapshot matrix (cond=%.3g); truncating %d singular values",
                 cond, int(np.sum(~keep)))
    Gp = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return T @ Gp, cond, False


def edmd_fit(m: SnapshotMatrices, lifting: Optional[Lifting] = None, c_target: str = "plus",
             ridge: bool = True, **model_kw) -> KoopmanModel:
    """Least-squares Koopman matrix ``K = [A B] = G_plus G_u^dagger``.

    ``c_target="plus"`` fits ``C = X_plus G_plus^dagger`` (one-step-ahead
    outputs); ``"current"`` fits C against the current outputs instead.
    """
    n_g = m.n_g
    K, cond_u, ridged = solve_least_squares(m.G_plus, m.G_u, ridge=ridge)
    if c_target == "plus":
        C = m.X_plus @ pinv(m.G_plus)
        c_res = _residual(m.X_plus, C, m.G_plus)
    elif c_target == "current":
        G_now = m.G_u[:n_g]
        C = m.X_now @ pinv(G_now)
        c_res = _residual(m.X_now, C, G_now)
    else:
        raise ValueError("c_target must be 'plus' or 'current'")
    if lifting is None:
        lifting = Lifting("identity", n_g)
    info = {
        "cond_G_u": cond_u,
        "ridge": float(ridged),
        "residual_K": _residual(m.G_plus, K, m.G_u),
        "residual_C": c_res,
    }
    return KoopmanModel(K[:, :n_g], K[:, n_g:], C, lifting, info=info, **model_kw)


def rollout(model: KoopmanModel, g0, inputs, check: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Propagate the lifted state under a sequence of raw inputs.

    Returns (g_hat, y_hat) of lengths N_p + 1, index 0 being the start.
    With ``check`` the closed-form powered sum is evaluated too and compared.
    """
    g0 = np.asarray(g0, dtype=float)
    U = np.atleast_2d(np.asarray(inputs, dtype=float))
    if U.shape[1] != model.n_u and U.shape[0] == model.n_u:
        U = U.T
    if g0.shape != (model.n_g,):
        raise ValueError("g0 has the wrong length")
    Un = model.u_norm.apply(U.T).T
    N = Un.shape[0]
    G = np.empty((N + 1, model.n_g))
    G[0] = g0
    for i in range(N):
        G[i + 1] = model.A @ G[i] + model.B @ Un[i]
    if check:
        Apow = [np.eye(model.n_g)]
        for _ in range(N):
            Apow.append(model.A @ Apow[-1])
        for i in range(1, N + 1):
            gi = Apow[i] @ g0 + sum(Apow[i - 1 - j] @ model.B @ Un[j] for j in range(i))
            if not np.allclose(gi, G[i], rtol=1e-10, atol=1e-10 * (1.0 + np.abs(gi).max())):
                raise AssertionError(f"rollout mismatch at step {i}")
    Y = model.y_norm.invert((model.C @ G.T)).T
    return G, Y


def vaf(y, yhat) -> float:
    """Variance accounted for, in percent, clamped at zero."""
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.size != yhat.size or y.size < 2:
        raise ValueError("vaf needs two equal-length sequences of length >= 2")
    vy = np.var(y)
    if vy == 0:
        raise ValueError("constant reference signal")
    return float(max(0.0, 1.0 - np.var(y - yhat) / vy) * 100.0)


def prediction_vaf(model: KoopmanModel, d: Dataset, horizon: int = 10) -> Dict[str, float]:
    """Per-output VAF of ``horizon``-step-ahead predictions.

    Every sample k is lifted from the measured state and propagated with the
    recorded inputs to k + horizon. ``horizon=0`` means a single free run from
    the first sample over the whole dataset.
    """
    X = d.states(model.state_names)
    Y = d.states(model.output_names) if all(n in d.state_names for n in model.output_names) else None
    if Y is None:
        Y = _derived_outputs(model, d)
    if horizon == 0:
        _, Yh = rollout(model, model.lift(X[:, 0]), d.U[:, :-1].T)
        return {n: vaf(Y[i], Yh[:, i]) for i, n in enumerate(model.output_names)}
    n = d.n_o - horizon
    if n < 2:
        raise ValueError("dataset shorter than the prediction horizon")
    G = model.lift(X[:, :n])
    Un = model.u_norm.apply(d.U)
    for i in range(horizon):
        G = model.A @ G + model.B @ Un[:, i:i + n]
    Yh = model.y_norm.invert(model.C @ G)
    return {name: vaf(Y[j, horizon:], Yh[j]) for j, name in enumerate(model.output_names)}


def _derived_outputs(model: KoopmanModel, d: Dataset) -> np.ndarray:
    rows = []
    for name in model.output_names:
        if name == "PWF":
            rows.append(d.channel("P1") + d.channel("P2"))
        else:
            rows.append(d.channel(name))
    return np.vstack(rows)


# --- persistence -------------------------------------------------------------

def _fmt_row(row) -> str:
    return " ".join(f"{v:.17g}" for v in np.atleast_1d(row))


def _write_matrix(lines, name, M):
    M = np.atleast_2d(M)
    lines.append(f"[{name}] {M.shape[0]} {M.shape[1]}")
    lines.extend(_fmt_row(r) for r in M)


def model_to_text(model: KoopmanModel) -> str:
    lf = model.lifting
    lines = [
        "# koopman-model v1",
        f"n_g {model.n_g}",
        f"n_u {model.n_u}",
        f"n_y {model.n_y}",
        f"lifting {lf.kind} n_x={lf.n_x} include_state={int(lf.include_state)}",
        "states " + " ".join(model.state_names),
        "inputs " + " ".join(model.input_names),
        "outputs " + " ".join(model.output_names),
    ]
    for k in sorted(model.info):
        lines.append(f"info {k} {model.info[k]:.17g}")
    _write_matrix(lines, "A", model.A)
    _write_matrix(lines, "B", model.B)
    _write_matrix(lines, "C", model.C)
    for name, nz in (("x_norm", lf.x_norm), ("u_norm", model.u_norm), ("y_norm", model.y_norm)):
        _write_matrix(lines, name, np.vstack([nz.mean, nz.scale]))
    if lf.encoder is not None:
        spec = lf.encoder.spec
        lines.append("encoder widths " + " ".join(map(str, spec.widths)))
        lines.append("encoder activations " + " ".join(spec.activations))
        for i, W in enumerate(lf.encoder.weights):
            _write_matrix(lines, f"W{i}", W)
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> KoopmanModel:
    lines = text.splitlines()
    head: Dict[str, str] = {}
    info: Dict[str, float] = {}
    mats: Dict[str, np.ndarray] = {}
    enc_widths = enc_acts = None
    i = 0
    while i < len(lines):
        ln = lines[i].strip()
        i += 1
        if not ln or ln.startswith("#"):
            continue
        if ln.startswith("["):
            name, r, c = ln[1:].replace("]", "").split()
            r, c = int(r), int(c)
            rows = [np.array(lines[i + j].split(), dtype=float) for j in range(r)]
            mats[name] = np.array(rows).reshape(r, c)
            i += r
            continue
        key, _, rest = ln.partition(" ")
        if key == "info":
            k, v = rest.split()
            info[k] = float(v)
        elif key == "encoder":
            sub, _, vals = rest.partition(" ")
            if sub == "widths":
                enc_widths = tuple(int(v) for v in vals.split())
            else:
                enc_acts = tuple(vals.split())
        else:
            head[key] = rest
    kind, *opts = head["lifting"].split()
    opt = dict(o.split("=") for o in opts)
    n_x = int(opt["n_x"])

    def norm(name):
        M = mats[name]
        return Normalizer(M[0], M[1])

    encoder = None
    if enc_widths is not None:
        spec = NetworkSpec(enc_widths, enc_acts)
        encoder = Network(spec, [mats[f"W{j}"] for j in range(spec.n_layers)])
    lifting = Lifting(kind, n_x, encoder=encoder, include_state=bool(int(opt["include_state"])),
                      x_norm=norm("x_norm"))
    return KoopmanModel(mats["A"], mats["B"], mats["C"], lifting,
                        output_names=tuple(head.get("outputs", "").split()),
                        input_names=tuple(head.get("inputs", "").split()),
                        state_names=tuple(head.get("states", "").split()),
                        u_norm=norm("u_norm"), y_norm=norm("y_norm"), info=info)


def save_model(model: KoopmanModel, path) -> None:
    Path(path).write_text(model_to_text(model))


def load_model(path) -> KoopmanModel:
    return model_from_text(Path(path).read_text())
