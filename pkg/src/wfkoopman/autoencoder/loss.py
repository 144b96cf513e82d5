"""Reconstruction / multi-step prediction / linearity loss and its exact gradient."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .network import Network, backward, forward


@dataclass(frozen=True)
class LossBreakdown:
    L_recon: float
    L_pred: float
    L_lin: float
    L_total: float

    @classmethod
    def combine(cls, recon, pred, lin, alpha) -> "LossBreakdown":
        a1, a2, a3 = alpha
        return cls(float(recon), float(pred), float(lin), float(a1 * recon + a2 * pred + a3 * lin))

    def as_row(self):
        return (self.L_recon, self.L_pred, self.L_lin, self.L_total)


@dataclass
class WindowBatch:
    """Prediction windows cut from one contiguous stretch of normalized data.

    ``X`` feeds the encoder, ``Y`` holds decoder targets and ``U`` inputs, all
    column-indexed by local time. Window j starts at ``starts[j]`` and needs
    columns up to ``starts[j] + N_p``.
    """

    X: np.ndarray
    Y: np.ndarray
    U: np.ndarray
    starts: np.ndarray
    N_p: int

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=int)
        if self.starts.size == 0:
            raise ValueError("empty batch")
        if self.starts.max() + self.N_p >= self.X.shape[1]:
            raise ValueError("window shorter than N_p")


def lift_batch(encoder: Network, X: np.ndarray, include_state: bool):
    E, cache = forward(encoder, X)
    G = np.vstack([X, E]) if include_state else E
    return G, cache


def loss_and_grads(encoder: Network, A: np.ndarray, B: np.ndarray, C: np.ndarray,
                   batch: WindowBatch, alpha, include_state: bool = False,
                   need_grads: bool = True) -> Tuple[LossBreakdown, Optional[Dict[str, object]]]:
    """Loss terms and gradients w.r.t. encoder weights, A, B and C.

    Means run over windows, horizon steps and channels. The linearity term
    differentiates through both the rolled-out state and the encoded target.
    """
    a1, a2, a3 = alpha
    N = batch.N_p
    s = batch.starts
    W = s.size
    G, cache = lift_batch(encoder, batch.X, include_state)
    n_g = G.shape[0]
    n_y = C.shape[0]

    g_hat = np.empty((N + 1, n_g, W), dtype=G.dtype)
    g_hat[0] = G[:, s]
    for i in range(1, N + 1):
        g_hat[i] = A @ g_hat[i - 1] + B @ batch.U[:, s + i - 1]

    r_rec = C @ g_hat[0] - batch.Y[:, s]
    L_rec = float(np.sum(r_rec**2)) / (n_y * W)
    r_pred = np.einsum("yg,igw->iyw", C, g_hat[1:]) - np.stack([batch.Y[:, s + i] for i in range(1, N + 1)])
    L_pred = float(np.sum(r_pred**2)) / (n_y * W * N)
    targets = np.stack([G[:, s + i] for i in range(1, N + 1)])
    r_lin = g_hat[1:] - targets
    L_lin = float(np.sum(r_lin**2)) / (n_g * W * N)
    loss = LossBreakdown.combine(L_rec, L_pred, L_lin, alpha)
    if not need_grads:
        return loss, None

    E_rec = (2.0 * a1 / (n_y * W)) * r_rec
    E_pred = (2.0 * a2 / (n_y * W * N)) * r_pred
    F_lin = (2.0 * a3 / (n_g * W * N)) * r_lin

    dC = E_rec @ g_hat[0].T + np.einsum("iyw,igw->yg", E_pred, g_hat[1:])
    dG = np.zeros_like(G)
    np.add.at(dG.T, s, (C.T @ E_rec).T)
    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    lam = np.zeros((n_g, W), dtype=G.dtype)
    for i in range(N, 0, -1):
        lam = C.T @ E_pred[i - 1] + F_lin[i - 1] + A.T @ lam
        dA += lam @ g_hat[i - 1].T
        dB += lam @ batch.U[:, s + i - 1].T
        np.add.at(dG.T, s + i, (-F_lin[i - 1]).T)
    np.add.at(dG.T, s, (A.T @ lam).T)

    dE = dG[batch.X.shape[0]:] if include_state else dG
    enc_grads, _ = backward(encoder, cache, dE)
    return loss, {"encoder": enc_grads, "A": dA, "B": dB, "C": dC}


def compute_loss(enc: Network, A, B, dec, batch: WindowBatch, alpha, include_state: bool = False) -> LossBreakdown:
    """Loss terms only. ``dec`` may be a matrix or a linear network."""
    from .network import collapse_linear

    C = collapse_linear(dec) if isinstance(dec, Network) else np.atleast_2d(dec)
    A = collapse_linear(A) if isinstance(A, Network) else np.atleast_2d(A)
    B = collapse_linear(B) if isinstance(B, Network) else np.atleast_2d(B)
    return loss_and_grads(enc, A, B, C, batch, alpha, include_state, need_grads=False)[0]
