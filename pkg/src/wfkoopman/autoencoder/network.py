"""Feed-forward networks with hand-written backpropagation.

Samples are stored column-wise: a batch is an (n_features, n_samples) array.
Every layer has a bias vector, but biases are frozen at zero: they are kept for
shape bookkeeping only and never receive updates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("sigmoid", "swish", "linear")


def sigmoid(z):
    # tanh form: no overflow for large |z|
    out = np.tanh(0.5 * z)
    out += 1.0
    out *= 0.5
    return out


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "swish":
        return z * sigmoid(z)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return np.ones_like(z)
    s = sigmoid(z)
    if kind == "sigmoid":
        return s * (1.0 - s)
    if kind == "swish":
        return s + z * s * (1.0 - s)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    widths: Tuple[int, ...]
    activations: Tuple[str, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        acts = tuple(self.activations)
        if len(widths) < 2:
            raise ValueError("a network needs at least one layer")
        if any(w <= 0 for w in widths):
            raise ValueError("layer widths must be positive")
        if len(acts) != len(widths) - 1:
            raise ValueError("one activation per layer required")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)

    @classmethod
    def mlp(cls, n_in: int, hidden: Sequence[int], n_out: int, hidden_act: str,
            out_act: str = "linear") -> "NetworkSpec":
        widths = (n_in, *hidden, n_out)
        return cls(widths, (hidden_act,) * len(hidden) + (out_act,))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


class Network:
    def __init__(self, spec: NetworkSpec, weights: Sequence[np.ndarray], dtype=None):
        self.spec = spec
        if dtype is None:
            dtype = np.asarray(weights[0]).dtype if len(weights) else np.float64
            if dtype not in (np.float32, np.float64):
                dtype = np.float64
        self.weights = [np.array(W, dtype=dtype) for W in weights]
        self.biases = [np.zeros(spec.widths[i + 1], dtype=dtype) for i in range(spec.n_layers)]
        for i, W in enumerate(self.weights):
            expect = (spec.widths[i + 1], spec.widths[i])
            if W.shape != expect:
                raise ValueError(f"layer {i}: weight shape {W.shape}, expected {expect}")
            if not np.all(np.isfinite(W)):
                raise ValueError("non-finite weights")

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> "Network":
        """Glorot-uniform weights."""
        Ws = []
        for i in range(spec.n_layers):
            fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        return cls(spec, Ws, dtype=dtype)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def astype(self, dtype) -> "Network":
        return Network(self.spec, self.weights, dtype=dtype)

    def copy(self) -> "Network":
        return Network(self.spec, [W.copy() for W in self.weights])

    @property
    def n_in(self) -> int:
        return self.spec.widths[0]

    @property
    def n_out(self) -> int:
        return self.spec.widths[-1]

    @property
    def n_params(self) -> int:
        return sum(W.size for W in self.weights)

    def __call__(self, x):
        return forward(self, x)[0]


def forward(net: Network, x) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
    """Evaluate the network.

    Returns the output and a cache of (layer input, pre-activation) pairs that
    ``backward`` consumes. A 1-D ``x`` yields a 1-D output.
    """
    x = np.asarray(x, dtype=net.dtype)
    vec = x.ndim == 1
    a = x[:, None] if vec else x
    if a.shape[0] != net.n_in:
        raise ValueError(f"input has {a.shape[0]} features, network expects {net.n_in}")
    cache = []
    for W, b, kind in zip(net.weights, net.biases, net.spec.activations):
        z = W @ a + b[:, None]
        cache.append((a, z))
        a = activate(kind, z)
    return (a[:, 0] if vec else a), cache


def backward(net: Network, cache, upstream) -> Tuple[List[np.ndarray], np.ndarray]:
    """Reverse-mode gradients of all weight matrices.

    ``upstream`` is dL/d(output) with the same layout as the forward output.
    Returns (weight gradients, dL/d(input)). Bias gradients are not formed.
    """
    delta = np.asarray(upstream, dtype=net.dtype)
    if delta.ndim == 1:
        delta = delta[:, None]
    grads: List[np.ndarray] = [None] * net.spec.n_layers
    for i in range(net.spec.n_layers - 1, -1, -1):
        a_in, z = cache[i]
        kind = net.spec.activations[i]
        if kind != "linear":
            delta = delta * activate_grad(kind, z)
        grads[i] = delta @ a_in.T
        delta = net.weights[i].T @ delta
    return grads, delta


def collapse_linear(net: Network) -> np.ndarray:
    """Single matrix equal to a stack of linear, bias-free layers."""
    if any(k != "linear" for k in net.spec.activations):
        raise ValueError("collapse_linear requires every layer to be linear")
    Ws = net.weights
    if net.n_out <= net.n_in:
        # multiply from the narrow output side
        M = Ws[-1]
        for W in reversed(Ws[:-1]):
            M = M @ W
    else:
        M = Ws[0]
        for W in Ws[1:]:
            M = W @ M
    return M.copy()


def linear_stack_grads(net: Network, dM: np.ndarray) -> List[np.ndarray]:
    """Weight gradients of a linear stack given the gradient w.r.t. its product.

    Equivalent to ``backward`` through the layers. With ``M = W_{n-1}..W_0``,
    ``dW_i = S_i' (dM P_i')`` where ``S_i`` is the product of the layers after
    i and ``P_i`` of those before it; both factors are formed with the output
    width as the short side, so no hidden x hidden products are needed.
    """
    Ws = net.weights
    n = len(Ws)
    dM = np.asarray(dM, dtype=Ws[0].dtype)
    # Q_i = dM P_i'  (n_out x width_i)
    Q = [dM]
    for i in range(1, n):
        Q.append(Q[-1] @ Ws[i - 1].T)
    grads: List[np.ndarray] = [None] * n
    S = None
    for i in range(n - 1, -1, -1):
        grads[i] = Q[i] if S is None else S.T @ Q[i]
        S = Ws[i] if S is None else S @ Ws[i]
    return grads


try:
    import numba

    @numba.njit(fastmath=True, cache=True)
    def _adam_kernel(p, g, m, v, step, b1, b2, ic2, eps):  # pragma: no cover - compiled
        pf, gf, mf, vf = p.ravel(), g.ravel(), m.ravel(), v.ravel()
        one = p.dtype.type(1.0)
        for i in range(pf.size):
            gi = gf[i]
            mi = b1 * mf[i] + (one - b1) * gi
            vi = b2 * vf[i] + (one - b2) * gi * gi
            mf[i] = mi
            vf[i] = vi
            pf[i] -= step * mi / (np.sqrt(vi * ic2) + eps)
except ImportError:  # pragma: no cover
    _adam_kernel = None


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = np.ascontiguousarray(g, dtype=p.dtype)
            if _adam_kernel is not None and p.flags.c_contiguous:
                t = p.dtype.type
                _adam_kernel(p, g, m, v, t(self.lr / c1), t(self.b1), t(self.b2), t(1.0 / c2), t(self.eps))
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-3):
        self.lr = lr

    def step(self, params, grads) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g
