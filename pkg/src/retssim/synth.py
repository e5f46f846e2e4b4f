"""Synthetic returns: windowed volatility from a trajectory feeding q-Gaussian draws."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import qgaussian
from .errors import DataError
from .sde import ModelParams, Trajectory


@dataclass(frozen=True, eq=False)
class ReturnSeries:
    """Returns on consecutive windows of ``tau`` seconds.

    ``zero_flags`` marks windows without price change (always false for
    model output). ``values`` are signed; absolute values are taken by the
    estimators.
    """

    tau: float
    values: np.ndarray
    start_time: float = 0.0
    normalized: bool = False
    zero_flags: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        flags = self.zero_flags
        flags = np.zeros(values.shape, bool) if flags is None else np.asarray(flags, bool)
        if flags.shape != values.shape:
            raise DataError("zero_flags and values differ in length")
        if not self.tau > 0:
            raise DataError("tau must be positive")
        if not np.all(np.isfinite(values)):
            raise DataError("return series contains non-finite values")
        values.setflags(write=False)
        flags.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "zero_flags", flags)

    def __len__(self):
        return self.values.size

    def replace(self, **changes) -> "ReturnSeries":
        return dataclasses.replace(self, **changes)


def volatility_window(traj: Trajectory, t_start_scaled: float, tau_scaled: float, r0_bar: float) -> float:
    """``1 + r0_bar/tau_s * |integral of x over [t, t + tau_s]|``."""
    if not tau_scaled > 0:
        raise DataError("tau_scaled must be positive")
    t_end = t_start_scaled + tau_scaled
    if t_start_scaled < 0 or t_end > traj.duration:
        raise DataError(
            f"window [{t_start_scaled}, {t_end}] outside trajectory support [0, {traj.duration}]"
        )
    return 1.0 + r0_bar / tau_scaled * abs(float(traj.integral(t_start_scaled, t_end)))


def volatility_series(traj: Trajectory, tau_scaled: float, r0_bar: float, n_windows: int) -> np.ndarray:
    """Vectorized :func:`volatility_window` over consecutive windows from t = 0."""
    edges = np.arange(n_windows + 1) * tau_scaled
    if n_windows < 1 or edges[-1] > traj.duration:
        raise DataError("trajectory too short for the requested windows")
    c = traj.cumulative_integral(edges)
    return 1.0 + r0_bar / tau_scaled * np.abs(np.diff(c))


def window_count(traj: Trajectory, tau_scaled: float) -> int:
    n = int(math.floor(traj.duration / tau_scaled))
    while n > 0 and n * tau_scaled > traj.duration:
        n -= 1
    return n


def generate_returns(
    traj: Trajectory, p: ModelParams, tau_seconds: float, rng: np.random.Generator,
    max_windows: int | None = None,
) -> ReturnSeries:
    """One signed q-Gaussian draw per non-overlapping window of ``tau_seconds``.

    ``max_windows`` caps the count; the path usually overshoots its target
    duration by part of a step, which would otherwise add a few windows.
    """
    tau_s = float(p.to_scaled(tau_seconds))
    n = window_count(traj, tau_s)
    if max_windows is not None:
        n = min(n, int(max_windows))
    if n < 1:
        raise DataError(
            f"trajectory of {traj.duration} scaled units holds no window of {tau_s} units"
        )
    r0 = volatility_series(traj, tau_s, p.r0_bar, n)
    values = qgaussian.draw(r0, p.lam, rng)
    return ReturnSeries(tau=float(tau_seconds), values=values)


def dispersion(series: ReturnSeries, exclude_zero_flagged: bool = False) -> float:
    v = series.values[~series.zero_flags] if exclude_zero_flagged else series.values
    if v.size < 2:
        raise DataError("need at least two returns to estimate dispersion")
    return float(np.std(v))


def normalize(series: ReturnSeries, exclude_zero_flagged: bool = False) -> ReturnSeries:
    """Divide by the whole-series standard deviation.

    Zero-flagged windows count toward the dispersion unless
    ``exclude_zero_flagged`` is set.
    """
    sd = dispersion(series, exclude_zero_flagged)
    if not sd > 0:
        raise DataError("return series has zero variance")
    return series.replace(values=series.values / sd, normalized=True)


def write_returns_csv(series: ReturnSeries, path) -> None:
    """Header ``t_seconds,r``; one row per window, stamped at the window start."""
    t = series.start_time + np.arange(len(series)) * series.tau
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t_seconds", "r"])
        for ti, ri in zip(t, series.values):
            w.writerow([repr(float(ti)), repr(float(ri))])


def read_returns_csv(path) -> ReturnSeries:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["t_seconds", "r"]:
        raise DataError(f"{path}: expected header t_seconds,r")
    t = np.array([float(r[0]) for r in rows[1:]])
    v = np.array([float(r[1]) for r in rows[1:]])
    if t.size < 2:
        raise DataError(f"{path}: need at least two rows")
    return ReturnSeries(tau=float(t[1] - t[0]), values=v, start_time=float(t[0]))
