"""Snapshot dataset container and its CSV format."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

STATE_CHANNELS = ("Ur1", "Ur2", "P1", "P2")
INPUT_CHANNELS = ("CT1", "CT2")


def _fmt(v: float) -> str:
    return f"{v:.12g}"


@dataclass
class Dataset:
    """Time-indexed snapshots: ``X`` is n_x x n_o, ``U`` is n_u x n_o.

    Column ``k`` of ``U`` is the input applied while the state is ``X[:, k]``.
    """

    X: np.ndarray
    U: np.ndarray
    dt: float = 1.0
    state_names: tuple = STATE_CHANNELS
    input_names: tuple = INPUT_CHANNELS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        self.state_names = tuple(self.state_names)
        self.input_names = tuple(self.input_names)
        if self.X.shape[1] != self.U.shape[1]:
            raise ValueError("state and input snapshot counts differ")
        if len(self.state_names) != self.X.shape[0] or len(self.input_names) != self.U.shape[0]:
            raise ValueError("channel names do not match data rows")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.U))):
            raise ValueError("dataset contains non-finite values")

    @property
    def n_o(self) -> int:
        return self.X.shape[1]

    @property
    def n_x(self) -> int:
        return self.X.shape[0]

    @property
    def n_u(self) -> int:
        return self.U.shape[0]

    def channel(self, name: str) -> np.ndarray:
        if name in self.state_names:
            return self.X[self.state_names.index(name)]
        if name in self.input_names:
            return self.U[self.input_names.index(name)]
        raise KeyError(name)

    def states(self, names: Sequence[str]) -> np.ndarray:
        return np.vstack([self.channel(n) for n in names])

    def select(self, states: Sequence[str]) -> "Dataset":
        """Keep only the named state channels (inputs unchanged)."""
        return Dataset(self.states(states), self.U.copy(), self.dt, tuple(states), self.input_names)

    def slice(self, start: int, stop: int | None = None) -> "Dataset":
        return Dataset(self.X[:, start:stop].copy(), self.U[:, start:stop].copy(), self.dt,
                       self.state_names, self.input_names, dict(self.meta))

    def split(self, train_fraction: float = 0.75) -> tuple["Dataset", "Dataset"]:
        """Chronological split: the first fraction trains, the tail validates."""
        cut = int(round(self.n_o * train_fraction))
        return self.slice(0, cut), self.slice(cut)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("k",) + self.state_names + self.input_names)
        for k in range(self.n_o):
            w.writerow([k] + [_fmt(v) for v in self.X[:, k]] + [_fmt(v) for v in self.U[:, k]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path, dt: float = 1.0, n_inputs: int | None = None) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0][1:]
        data = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).T
        if n_inputs is None:
            n_inputs = sum(1 for h in header if h.upper().startswith("CT"))
        n_x = len(header) - n_inputs
        return cls(data[:n_x], data[n_x:], dt, tuple(header[:n_x]), tuple(header[n_x:]))
