"""Carriers for sampled complex fields and estimator settings."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..process import fmt


@dataclass(frozen=True, eq=False)
class ComplexFieldSample:
    """Values of a C^m-valued field at sites ``(t, x1..xd)``.

    ``mask[i]`` is True when site ``i`` lies outside the positive-density
    region; its values are NaN and it is excluded from every statistic.
    """

    points: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    backend: str
    stderr: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        vals = np.asarray(self.values, dtype=complex)
        if vals.ndim == 1:
            vals = vals[:, None]
        mask = np.asarray(self.mask, dtype=bool)
        if not (pts.shape[0] == vals.shape[0] == mask.shape[0]):
            raise ValueError("points, values and mask must have the same length")
        if not np.all(np.isfinite(vals[~mask])):
            raise ValueError("non-finite value at an unmasked site")
        for arr in (pts, vals, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", mask)
        if self.stderr is not None:
            se = np.asarray(self.stderr, dtype=float).reshape(vals.shape)
            se.setflags(write=False)
            object.__setattr__(self, "stderr", se)

    @property
    def t(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 1:]

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag

    @property
    def valid(self) -> np.ndarray:
        return self.values[~self.mask]

    def conj(self) -> "ComplexFieldSample":
        return ComplexFieldSample(self.points, self.values.conj(), self.mask, self.backend, self.stderr, self.label)

    def with_values(self, values, label=None, stderr=None) -> "ComplexFieldSample":
        return ComplexFieldSample(self.points, values, self.mask, self.backend, stderr, label or self.label)

    def to_csv(self, path) -> None:
        """Columns ``t, x1..xd, re_1..re_m, im_1..im_m, se_1..se_m, masked``."""
        d = self.points.shape[1] - 1
        m = self.values.shape[1]
        header = ["t"] + [f"x{k + 1}" for k in range(d)]
        header += [f"re_{k + 1}" for k in range(m)] + [f"im_{k + 1}" for k in range(m)]
        header += [f"se_{k + 1}" for k in range(m)] + ["masked"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(self.points.shape[0]):
                row = [fmt(v) for v in self.points[i]]
                row += [fmt(v) for v in self.values[i].real] + [fmt(v) for v in self.values[i].imag]
                row += [fmt(v) for v in self.stderr[i]] if self.stderr is not None else [""] * m
                row.append(int(self.mask[i]))
                w.writerow(row)


def reconstruct(sample: ComplexFieldSample, mu: int = 1):
    """Recover the forward and backward fields from a sample of D_mu X.

    ``D = Re + mu Im`` and ``D_* = Re - mu Im``.
    """
    _check_mu(mu)
    re, im = sample.values.real, sample.values.imag
    return re + mu * im, re - mu * im


def make_sites(t, x) -> np.ndarray:
    """Sites array with columns ``(t, x1..xd)`` from a time (scalar or array) and positions."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return np.column_stack([t, x])


def _check_mu(mu):
    if mu not in (1, -1):
        raise ValueError(f"mu must be +1 or -1, got {mu!r}")


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings for the ensemble estimators.

    ``h`` is the difference-quotient increment (``None`` means ``10 dt``);
    ``time_window`` pools slices within ``+-time_window`` of the target time.
    ``bandwidth`` drives the kernel regression and the masking density;
    ``derivative_bandwidth`` the local-polynomial fits behind second-order
    quantities.  Sites whose estimated density falls below
    ``min_local_mass`` times its maximum are masked.
    """

    h: float | None = None
    bandwidth: float | str = "auto"
    kernel: str = "gaussian"
    min_local_mass: float = 1e-3
    time_window: float = 0.0
    derivative_bandwidth: float | str = "auto"
    degree: int = 2
    min_effective_samples: float = 20.0

    def __post_init__(self):
        if self.kernel != "gaussian":
            raise ValueError("only the gaussian kernel is implemented")
        if self.h is not None and self.h <= 0:
            raise ValueError("h must be positive")
        if self.time_window < 0:
            raise ValueError("time_window must be nonnegative")
        if self.degree < 1:
            raise ValueError("local polynomial degree must be at least 1")

    def h_steps(self, dt: float) -> int:
        if self.h is None:
            return 10
        k = int(round(self.h / dt))
        if k < 1 or abs(k * dt - self.h) > 1e-9 * self.h:
            raise ValueError(f"h={self.h} is not an integer multiple of dt={dt}")
        return k

    def window_steps(self, dt: float) -> int:
        return int(round(self.time_window / dt))
