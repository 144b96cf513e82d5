"""Single-level (AE1) and bi-level (AE2) autoencoder-Koopman trainers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..dataset import Dataset
from ..koopman import KoopmanModel, Lifting, Normalizer, solve_least_squares
from ..numerics import pinv
from .loss import LossBreakdown, WindowBatch, lift_batch, loss_and_grads
from .network import SGD, Adam, Network, NetworkSpec, collapse_linear, linear_stack_grads

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    eta: float = 1e-3
    N_E: int = 500
    B_t: int = 50
    N_g: int = 24
    N_p: int = 10
    alpha: Tuple[float, float, float] = (0.45, 0.45, 0.1)
    seed: int = 0
    optimizer: str = "adam"
    hidden: Tuple[int, ...] = (496, 496, 496)
    activation: str = "sigmoid"
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.N_p < 1:
            raise ValueError("N_p must be >= 1")
        if any(a < 0 for a in self.alpha) or not any(a > 0 for a in self.alpha):
            raise ValueError("alpha must be nonnegative and not all zero")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def ae1_config(N_g: int = 24, **kw) -> TrainingConfig:
    """Single-level defaults: sigmoid encoder with three hidden layers of n_e."""
    n_e = 124 if N_g <= 6 else 496
    base = dict(N_g=N_g, alpha=(0.45, 0.45, 0.1), N_E=500, B_t=50, N_p=10,
                hidden=(n_e,) * 3, activation="sigmoid", dtype="float32")
    base.update(kw)
    return TrainingConfig(**base)


def ae2_config(N_g: int = 2, **kw) -> TrainingConfig:
    """Bi-level defaults: swish encoder 3 x 20, unit loss weights, N_p = 10."""
    base = dict(N_g=N_g, alpha=(1.0, 1.0, 1.0), N_E=500, B_t=50, N_p=10,
                hidden=(20, 20, 20), activation="swish")
    base.update(kw)
    return TrainingConfig(**base)


@dataclass
class TrainingHistory:
    curve: List[LossBreakdown] = field(default_factory=list)
    decoder_reinit: Optional[np.ndarray] = None
    reinit_encoder: Optional[Network] = None
    edmd_K: Optional[np.ndarray] = None

    def to_csv(self, path=None) -> str:
        lines = ["epoch,L_recon,L_pred,L_lin,L_total"]
        for e, lb in enumerate(self.curve):
            lines.append(f"{e}," + ",".join(f"{v:.12g}" for v in lb.as_row()))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def _optimizer(cfg: TrainingConfig, params):
    cls = Adam if cfg.optimizer == "adam" else SGD
    return cls(params, lr=cfg.eta)


def _blocks(n_windows: int, B_t: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Mini-batches of consecutive window starts, block grid randomly offset and shuffled."""
    offset = int(rng.integers(0, B_t)) if n_windows > B_t else 0
    edges = list(range(offset, n_windows, B_t))
    if offset > 0:
        edges = [0] + edges
    blocks = [np.arange(a, min(a + B_t, n_windows)) for a in edges]
    order = rng.permutation(len(blocks))
    return [blocks[i] for i in order]


def _batch(Xn, Yn, Un, starts, N_p) -> WindowBatch:
    lo, hi = int(starts[0]), int(starts[-1]) + N_p + 1
    return WindowBatch(Xn[:, lo:hi], Yn[:, lo:hi], Un[:, lo:hi], starts - lo, N_p)


def _full_batch(Xn, Yn, Un, N_p) -> WindowBatch:
    return WindowBatch(Xn, Yn, Un, np.arange(Xn.shape[1] - N_p), N_p)


def _check_divergence(loss: LossBreakdown, initial: LossBreakdown) -> None:
    if not np.isfinite(loss.L_total) or loss.L_total > 1e3 * max(initial.L_total, 1e-300):
        raise TrainingDiverged("training diverged")


def train_single_level(d: Dataset, states: Sequence[str], cfg: TrainingConfig,
                       outputs: Optional[Sequence[str]] = None,
                       decoder_hidden: Optional[Tuple[int, ...]] = None
                       ) -> Tuple[KoopmanModel, TrainingHistory]:
    """Jointly train encoder, linear A/B networks and a linear decoder.

    The lifted state is ``[x; enc(x)]`` (``N_g`` counts both parts). A and B are
    each a two-layer linear network through a hidden width of ``N_g``; the
    decoder is a linear stack ``N_g -> 2 n_e -> 2 n_e -> n_y``. On export every
    linear stack is collapsed to one matrix.
    """
    states = tuple(states)
    outputs = tuple(outputs) if outputs is not None else states
    n_x, n_u = len(states), d.n_u
    if cfg.N_g <= n_x:
        raise ValueError("N_g must exceed the number of physical states")
    rng = np.random.default_rng(cfg.seed)
    X = d.states(states)
    Y = d.states(outputs)
    x_norm = Normalizer.fit(X)
    y_norm = Normalizer.fit(Y)
    u_norm = Normalizer.fit(d.U)
    dt = np.dtype(cfg.dtype)
    Xn, Yn, Un = (a.astype(dt) for a in (x_norm.apply(X), y_norm.apply(Y), u_norm.apply(d.U)))
    n_y = Y.shape[0]

    enc = Network.init(NetworkSpec.mlp(n_x, cfg.hidden, cfg.N_g - n_x, cfg.activation), rng, dt)
    anet = Network.init(NetworkSpec.mlp(cfg.N_g, (cfg.N_g,), cfg.N_g, "linear"), rng, dt)
    bnet = Network.init(NetworkSpec.mlp(n_u, (cfg.N_g,), cfg.N_g, "linear"), rng, dt)
    if decoder_hidden is None:
        decoder_hidden = (2 * cfg.hidden[0],) * 2
    dec = Network.init(NetworkSpec.mlp(cfg.N_g, decoder_hidden, n_y, "linear"), rng, dt)
    nets = (enc, anet, bnet, dec)
    params = [W for net in nets for W in net.weights]
    opt = _optimizer(cfg, params)

    def mats():
        return collapse_linear(anet), collapse_linear(bnet), collapse_linear(dec)

    hist = TrainingHistory()
    n_windows = d.n_o - cfg.N_p
    full = _full_batch(Xn, Yn, Un, cfg.N_p)
    initial, _ = loss_and_grads(enc, *mats(), full, cfg.alpha, include_state=True, need_grads=False)
    hist.curve.append(initial)
    for epoch in range(1, cfg.N_E + 1):
        acc = np.zeros(4)
        for starts in _blocks(n_windows, cfg.B_t, rng):
            A, B, C = mats()
            loss, g = loss_and_grads(enc, A, B, C, _batch(Xn, Yn, Un, starts, cfg.N_p),
                                     cfg.alpha, include_state=True)
            grads = (g["encoder"] + linear_stack_grads(anet, g["A"])
                     + linear_stack_grads(bnet, g["B"]) + linear_stack_grads(dec, g["C"]))
            opt.step(params, grads)
            acc += np.asarray(loss.as_row()) * starts.size
        row = acc / n_windows
        ep = LossBreakdown.combine(row[0], row[1], row[2], cfg.alpha)
        hist.curve.append(ep)
        _check_divergence(ep, initial)
        if epoch % 50 == 0:
            log.info("AE1 epoch %d: L_total=%.4g", epoch, ep.L_total)

    # export in double precision
    A, B, C = (collapse_linear(n.astype(np.float64)) for n in (anet, bnet, dec))
    lifting = Lifting("encoder", n_x, encoder=enc.astype(np.float64), include_state=True, x_norm=x_norm)
    model = KoopmanModel(A, B, C, lifting, output_names=outputs, input_names=d.input_names,
                         state_names=states, u_norm=u_norm, y_norm=y_norm,
                         info={"final_loss": hist.curve[-1].L_total, "n_params": float(sum(p.size for p in params))})
    return model, hist


def power_normalizers(X: np.ndarray) -> Tuple[Normalizer, Normalizer]:
    """Per-turbine means with one shared scale, so normalized powers add up
    to the normalized farm power."""
    total = X.sum(axis=0)
    sd = float(total.std()) or 1.0
    x_norm = Normalizer(X.mean(axis=1), np.full(X.shape[0], sd))
    y_norm = Normalizer([float(X.mean(axis=1).sum())], [sd])
    return x_norm, y_norm


def edmd_step(enc: Network, Xn: np.ndarray, Un: np.ndarray):
    """Snapshot matrices from the current encoder and their EDMD solution."""
    G, _ = lift_batch(enc, Xn, include_state=False)
    G_u = np.vstack([G[:, :-1], Un[:, :-1]])
    G_plus = G[:, 1:]
    K, _, _ = solve_least_squares(G_plus, G_u)
    return K, G_u, G_plus


def train_bilevel(d: Dataset, states: Sequence[str], cfg: TrainingConfig,
                  output_name: str = "PWF") -> Tuple[KoopmanModel, TrainingHistory]:
    """Alternate an EDMD solve for [A B] with gradient steps on encoder and decoder.

    Each epoch recomputes ``[A B] = G_plus G_u^dagger`` on the whole dataset,
    then runs one pass of mini-batch updates with A, B held fixed. After the
    first epoch the decoder row is replaced by the sum of the per-turbine rows
    of ``X_plus G_plus^dagger``. The exported (A, B) is a final EDMD solve on
    the trained encoder.
    """
    states = tuple(states)
    n_x = len(states)
    rng = np.random.default_rng(cfg.seed)
    X = d.states(states)
    x_norm, y_norm = power_normalizers(X)
    u_norm = Normalizer.fit(d.U)
    Xn, Un = x_norm.apply(X), u_norm.apply(d.U)
    Yn = Xn.sum(axis=0, keepdims=True)

    enc = Network.init(NetworkSpec.mlp(n_x, cfg.hidden, cfg.N_g, cfg.activation), rng)
    dec = Network.init(NetworkSpec.mlp(cfg.N_g, (), 1, "linear"), rng)
    params = enc.weights + dec.weights
    opt = _optimizer(cfg, params)
    n_g = cfg.N_g

    hist = TrainingHistory()
    n_windows = d.n_o - cfg.N_p
    full = _full_batch(Xn, Yn, Un, cfg.N_p)
    initial = None
    for epoch in range(1, cfg.N_E + 1):
        K, G_u, G_plus = edmd_step(enc, Xn, Un)
        A, B = K[:, :n_g], K[:, n_g:]
        if epoch == 1:
            initial, _ = loss_and_grads(enc, A, B, dec.weights[0], full, cfg.alpha, need_grads=False)
            hist.curve.append(initial)
            reinit_source = (enc.copy(), G_plus.copy())
        acc = np.zeros(4)
        for starts in _blocks(n_windows, cfg.B_t, rng):
            loss, g = loss_and_grads(enc, A, B, dec.weights[0], _batch(Xn, Yn, Un, starts, cfg.N_p), cfg.alpha)
            opt.step(params, g["encoder"] + [g["C"]])
            acc += np.asarray(loss.as_row()) * starts.size
        if epoch == 1:
            C_edmd = Xn[:, 1:] @ pinv(reinit_source[1])
            row = C_edmd.sum(axis=0, keepdims=True)
            dec.weights[0][...] = row
            if isinstance(opt, Adam):
                opt.m[-1][...] = 0.0
                opt.v[-1][...] = 0.0
            hist.decoder_reinit = row.copy()
            hist.reinit_encoder = reinit_source[0]
        row = acc / n_windows
        ep = LossBreakdown.combine(row[0], row[1], row[2], cfg.alpha)
        hist.curve.append(ep)
        _check_divergence(ep, initial)
        if epoch % 50 == 0:
            log.info("AE2 epoch %d: L_total=%.4g", epoch, ep.L_total)

    K, G_u, G_plus = edmd_step(enc, Xn, Un)
    hist.edmd_K = K
    lifting = Lifting("encoder", n_x, encoder=enc.copy(), include_state=False, x_norm=x_norm)
    model = KoopmanModel(K[:, :n_g], K[:, n_g:], dec.weights[0].copy(), lifting,
                         output_names=(output_name,), input_names=d.input_names, state_names=states,
                         u_norm=u_norm, y_norm=y_norm,
                         info={"final_loss": hist.curve[-1].L_total, "n_params": float(sum(p.size for p in params))})
    return model, hist
