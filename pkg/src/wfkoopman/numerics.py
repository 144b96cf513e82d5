"""Dense linear-algebra kernel: Jacobi SVD, pseudoinverse and a box-constrained QP solver."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

DEFAULT_PINV_TOL = 1e-10


def _as_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if M.size == 0:
        raise ValueError("empty matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite entries")
    return M


def _jacobi_sweeps(W: np.ndarray, V: np.ndarray, max_sweeps: int, eps: float) -> None:
    """One-sided (Hestenes) Jacobi on the columns of W, accumulating rotations in V.

    Pairs are visited in round-robin (tournament) order so that each step
    rotates n/2 disjoint column pairs at once.
    """
    n = W.shape[1]
    if n < 2:
        return
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    for _ in range(max_sweeps):
        rotated = False
        order = players[:]
        for _step in range(m - 1):
            half = m // 2
            p = np.array(order[:half])
            q = np.array(order[half:][::-1])
            keep = (p >= 0) & (q >= 0)
            p, q = p[keep], q[keep]
            wp, wq = W[:, p], W[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            act = np.abs(gamma) > eps * np.sqrt(alpha * beta)
            if np.any(act):
                rotated = True
                p, q = p[act], q[act]
                alpha, beta, gamma = alpha[act], beta[act], gamma[act]
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for X in (W, V):
                    xp, xq = X[:, p].copy(), X[:, q]
                    X[:, p] = c * xp - s * xq
                    X[:, q] = s * xp + c * xq
            # rotate everyone but the first seat
            order = [order[0]] + [order[-1]] + order[1:-1]
        if not rotated:
            return


def svd(M, max_sweeps: int = 60) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``M = U @ diag(s) @ Vt`` with singular values in descending order.

    Tall inputs are first reduced by a QR factorization; the square triangular
    factor is then diagonalized by one-sided Jacobi rotations.
    """
    M = _as_matrix(M)
    transposed = M.shape[0] < M.shape[1]
    if transposed:
        M = M.T
    m, n = M.shape
    if m > n:
        Q, R = np.linalg.qr(M)
    else:
        Q, R = None, M.copy()
    W = R.copy()
    V = np.eye(n)
    _jacobi_sweeps(W, V, max_sweeps, eps=np.finfo(float).eps * n)
    s = np.linalg.norm(W, axis=0)
    order = np.argsort(-s, kind="stable")
    s, W, V = s[order], W[:, order], V[:, order]
    U = np.zeros_like(W)
    nz = s > 0
    U[:, nz] = W[:, nz] / s[nz]
    if Q is not None:
        U = Q @ U
    if transposed:
        return V, s, U.T
    return U, s, V.T


def pinv(M, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse.

    Singular values at or below ``tol`` times the largest one are treated as zero.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    M = _as_matrix(M)
    U, s, Vt = svd(M)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(M.shape[::-1])
    keep = s > tol * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def condition_number(M) -> float:
    _, s, _ = svd(M)
    if s[-1] == 0.0:
        return float("inf")
    return float(s[0] / s[-1])


@dataclass(frozen=True)
class QpProblem:
    """``min 0.5 u'Hu + f'u  s.t.  lb <= u <= ub``.

    ``lsq`` optionally carries a factor ``(M, b)`` with ``H = M'M`` and
    ``f = -M'b``; the active-set phase then solves least-squares subproblems
    on ``M`` instead of normal equations, which matters when ``H`` is badly
    conditioned (MPC costs in watts).
    """

    H: np.ndarray
    f: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    lsq: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        f = np.atleast_1d(np.asarray(self.f, dtype=float)).ravel()
        n = f.size
        lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        if H.shape != (n, n):
            raise ValueError(f"H must be {n}x{n}, got {H.shape}")
        for name, arr in (("H", H), ("f", f), ("lb", lb), ("ub", ub)):
            if np.any(np.isnan(arr)):
                raise ValueError(f"NaN in QP {name}")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(f))):
            raise ValueError("non-finite QP data")
        if np.any(lb > ub):
            raise ValueError("lb > ub")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)
        if self.lsq is not None:
            M, b = self.lsq
            object.__setattr__(self, "lsq", (np.asarray(M, float), np.asarray(b, float).ravel()))

    @property
    def n(self) -> int:
        return self.f.size

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.f @ u)


def projected_gradient(p: QpProblem, u: np.ndarray) -> np.ndarray:
    """Components of the gradient that violate box first-order optimality."""
    g = p.H @ u + p.f
    pg = g.copy()
    at_lb = u <= p.lb
    at_ub = u >= p.ub
    pg[at_lb] = np.minimum(g[at_lb], 0.0)
    pg[at_ub] = np.maximum(g[at_ub], 0.0)
    return pg


def kkt_residual(p: QpProblem, u: np.ndarray, scaled: bool = False) -> float:
    r = float(np.linalg.norm(projected_gradient(p, u)))
    if scaled:
        r /= _scale(p)
    return r


def _scale(p: QpProblem) -> float:
    return max(1.0, float(np.max(np.abs(np.diag(p.H)))), float(np.max(np.abs(p.f), initial=0.0)) * 1e-6)


def _free_solve(p: QpProblem, x: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Minimizer over the free coordinates with the others held at x."""
    fixed = ~free
    if p.lsq is not None:
        M, b = p.lsq
        rhs = b - M[:, fixed] @ x[fixed]
        sol, *_ = np.linalg.lstsq(M[:, free], rhs, rcond=None)
        return sol
    Hff = p.H[np.ix_(free, free)]
    rhs = -(p.f[free] + p.H[np.ix_(free, fixed)] @ x[fixed])
    try:
        sol = np.linalg.solve(Hff, rhs)
        if np.all(np.isfinite(sol)):
            return sol
    except np.linalg.LinAlgError:
        pass
    sol, *_ = np.linalg.lstsq(Hff, rhs, rcond=None)
    return sol


def _active_set(p: QpProblem, x: np.ndarray, tol: float, max_iter: int) -> Optional[np.ndarray]:
    """Primal active-set refinement started from the bounds x currently touches."""
    lb, ub = p.lb, p.ub
    x = np.clip(x, lb, ub)
    span = np.maximum(ub - lb, 1.0)
    g = p.H @ x + p.f
    at_lb = (x - lb <= 1e-9 * span) & (g > 0)
    at_ub = (ub - x <= 1e-9 * span) & (g < 0)
    x[at_lb] = lb[at_lb]
    x[at_ub] = ub[at_ub]
    scale = _scale(p)
    for _ in range(max_iter):
        free = ~(at_lb | at_ub)
        if np.any(free):
            target = _free_solve(p, x, free)
            d = target - x[free]
            xf = x[free]
            lo, hi = lb[free], ub[free]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(d < 0, (lo - xf) / d, np.where(d > 0, (hi - xf) / d, np.inf))
            alpha = float(np.min(ratio, initial=np.inf))
            if alpha < 1.0:
                alpha = max(alpha, 0.0)
                idx = np.flatnonzero(free)
                x[idx] = xf + alpha * d
                blocking = idx[ratio <= alpha + 1e-15]
                for i in blocking:
                    if d[np.searchsorted(idx, i)] < 0:
                        x[i], at_lb[i] = lb[i], True
                    else:
                        x[i], at_ub[i] = ub[i], True
                continue
            x[free] = target
        g = p.H @ x + p.f
        wrong = np.zeros_like(free)
        wrong[at_lb] = g[at_lb] < -tol * scale
        wrong[at_ub] = g[at_ub] > tol * scale
        if not np.any(wrong):
            return x
        # release the worst offender
        viol = np.where(wrong, np.abs(g), -1.0)
        i = int(np.argmax(viol))
        at_lb[i] = at_ub[i] = False
    return None


def solve_box_qp(
    p: QpProblem,
    max_iter: int = 5000,
    tol: float = 1e-9,
    x0: Optional[np.ndarray] = None,
    polish_every: int = 50,
) -> np.ndarray:
    """Solve a convex box-constrained QP.

    Accelerated projected gradient (Nesterov, with adaptive restart) brings the
    iterate near the optimal face; a primal active-set pass then solves the
    face exactly and certifies the KKT conditions. Raises ``ValueError`` for a
    non-PSD Hessian.
    """
    H, f, lb, ub = p.H, p.f, p.lb, p.ub
    eig = np.linalg.eigvalsh(H)
    lmax = float(max(eig[-1], 0.0))
    if eig[0] < -1e-9 * max(1.0, lmax):
        raise ValueError("nonconvex QP")
    if x0 is None:
        x = np.clip(np.zeros(p.n), lb, ub)
    else:
        x = np.clip(np.asarray(x0, dtype=float).copy(), lb, ub)

    def certified(u):
        return u is not None and kkt_residual(p, u, scaled=True) < tol

    cand = _active_set(p, x, tol, max_iter=4 * p.n + 10)
    if certified(cand):
        return cand
    if lmax == 0.0:
        # linear objective: the box corner opposite the gradient
        return np.where(f > 0, lb, np.where(f < 0, ub, x))
    step = 1.0 / lmax
    y, x_prev, t = x.copy(), x.copy(), 1.0
    it = 0
    while it < max_iter:
        for _ in range(polish_every):
            g = H @ y + f
            x_new = np.clip(y - step * g, lb, ub)
            if (y - x_new) @ (x_new - x_prev) > 0:
                t = 1.0  # restart momentum
                y = x_prev.copy()
                g = H @ y + f
                x_new = np.clip(y - step * g, lb, ub)
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x_prev)
            x_prev, x, t = x_new, x_new, t_new
            it += 1
        cand = _active_set(p, x, tol, max_iter=4 * p.n + 10)
        if certified(cand):
            return cand
    return x
