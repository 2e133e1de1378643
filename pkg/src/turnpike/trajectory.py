"""Sampled (t, x, u, lambda) trajectories and their CSV format."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Trajectory:
    """Samples of a state/control/costate path on a strictly increasing grid.

    ``lambda0`` records the cost-multiplier normalization of ``lam``: -0.5 for
    the LQ closed form, -1.0 everywhere else. Use :meth:`with_unit_costate`
    to compare across conventions.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    method: str = ""
    lambda0: float = -1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing with at least 2 samples")
        for name in ("x", "u", "lam"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.shape[0] != t.size:
                raise ValueError(f"{name} has {arr.shape[0]} samples, grid has {t.size}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "t", t)

    @property
    def T(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def cost(self) -> float | None:
        return self.meta.get("cost")

    def with_unit_costate(self) -> "Trajectory":
        """Same trajectory with costates rescaled to the lambda0 = -1 convention."""
        if self.lambda0 == -1.0:
            return self
        return replace(self, lam=self.lam * (-1.0 / self.lambda0), lambda0=-1.0)

    def at(self, time: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Linear interpolation of (x, u, lambda) at ``time``."""
        interp = lambda a: np.array([np.interp(time, self.t, a[:, j]) for j in range(a.shape[1])])  # noqa: E731
        return interp(self.x), interp(self.u), interp(self.lam)

    def to_csv(self, path: str | os.PathLike | None = None) -> str:
        """CSV with header ``t,x1..xn,u1..um,lambda1..lambdan``.

        Costates are written in the lambda0 = -1 convention, 17 significant digits.
        """
        tr = self.with_unit_costate()
        header = (
            ["t"]
            + [f"x{i + 1}" for i in range(tr.n)]
            + [f"u{i + 1}" for i in range(tr.m)]
            + [f"lambda{i + 1}" for i in range(tr.n)]
        )
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        data = np.column_stack([tr.t, tr.x, tr.u, tr.lam])
        for row in data:
            buf.write(",".join(format(v, ".17g") for v in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            write_atomic(path, text)
        return text

    @classmethod
    def from_csv(cls, source: str | os.PathLike, method: str = "csv") -> "Trajectory":
        with open(source, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError("empty trajectory file")
        header = rows[0]
        if header[0] != "t":
            raise ValueError("trajectory CSV must start with a 't' column")
        n = sum(1 for h in header if h.startswith("x"))
        m = sum(1 for h in header if h.startswith("u"))
        expected = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
        expected += [f"lambda{i + 1}" for i in range(n)]
        if header != expected:
            raise ValueError(f"unexpected CSV header {header}")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        return cls(
            t=data[:, 0],
            x=data[:, 1 : 1 + n],
            u=data[:, 1 + n : 1 + n + m],
            lam=data[:, 1 + n + m :],
            method=method,
            lambda0=-1.0,
        )


def trapezoid_cost(t: np.ndarray, values: np.ndarray) -> float:
    return float(np.trapezoid(values, t))


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
