"""Nonlinear SDE for the average return per unit time ``x``.

In scaled time ``t_s = sigma_t^2 t`` the process obeys

    dx = [eta - lambda0/2 - (x/x_max)^2] (1+x^2)^(eta-1) / (eps sqrt(1+x^2) + 1)^2 x dt_s
         + (1+x^2)^(eta/2) / (eps sqrt(1+x^2) + 1) dW_s

and is integrated with the state-dependent step

    h_k = kappa^2 (eps sqrt(1+x_k^2) + 1)^2 / (1+x_k^2)^(eta-1)

which cancels the multiplicative factors, leaving the update

    x_{k+1} = x_k + kappa^2 [eta - lambda0/2 - (x_k/x_max)^2] x_k + kappa sqrt(1+x_k^2) zeta_k.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError, DataError, RetssimError

# Overflow guard, in units of x_max.
CLAMP_FACTOR = 10.0
MAX_CLAMP_FRACTION = 1e-4
_BLOCK = 1 << 16
_TRAJECTORY_CSV_MAX_ROWS = 5_000_000


@dataclass(frozen=True)
class ModelParams:
    """Model parameters; defaults are the reference set used for the NYSE/VSE fit.

    ``sigma_t_sq`` is in 1/s. ``literal_update`` drops the leading ``x_k``
    from the update (the form without it does not integrate the SDE and
    exists only for comparison).
    """

    eta: float = 2.5
    lambda0: float = 3.6
    epsilon: float = 0.017
    x_max: float = 1000.0
    sigma_t_sq: float = 1.0 / 3.0 * 1e-6
    r0_bar: float = 0.4
    lam: float = 5.0
    kappa: float = 0.1
    seed: int = 0
    burn_in_scaled_time: float = 1e4
    x0: float = 1.0
    literal_update: bool = False

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ConfigError(f"kappa must lie in (0, 1), got {self.kappa}")
        for name in ("x_max", "sigma_t_sq", "r0_bar"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not self.lam > 1:
            raise ConfigError(f"lam must exceed 1, got {self.lam}")
        if self.burn_in_scaled_time < 0:
            raise ConfigError("burn_in_scaled_time must be nonnegative")
        if not -(1 << 63) <= int(self.seed) < (1 << 64):
            raise ConfigError("seed must fit in 64 bits")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model parameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def to_seconds(self, t_scaled):
        return np.asarray(t_scaled) / self.sigma_t_sq

    def to_scaled(self, t_seconds):
        return np.asarray(t_seconds) * self.sigma_t_sq


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Piecewise-constant path: ``values[k]`` holds on ``[times[k], times[k+1])``.

    ``steps[k]`` is the exact step size taken from ``values[k]``; ``times`` is
    its running sum, so the support is ``[0, times[-1]]``.
    """

    times_scaled: np.ndarray
    values: np.ndarray
    steps: np.ndarray
    params: ModelParams
    clamp_count: int = 0
    _cumint: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.values.size == 0:
            raise DataError("empty trajectory")
        if self.times_scaled.shape != self.values.shape or self.steps.size != self.values.size - 1:
            raise DataError("trajectory arrays have inconsistent lengths")
        for a in (self.times_scaled, self.values, self.steps):
            a.setflags(write=False)
        cum = np.empty_like(self.times_scaled)
        cum[0] = 0.0
        np.cumsum(self.values[:-1] * self.steps, out=cum[1:])
        cum.setflags(write=False)
        object.__setattr__(self, "_cumint", cum)

    def __len__(self):
        return self.values.size

    @property
    def duration(self) -> float:
        return float(self.times_scaled[-1])

    @property
    def times_seconds(self) -> np.ndarray:
        return self.params.to_seconds(self.times_scaled)

    def cumulative_integral(self, t):
        """Exact integral of the path from 0 to ``t`` (vectorized)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.duration):
            raise DataError("integration bound outside trajectory support")
        if self.steps.size == 0:
            return np.zeros_like(t)
        k = np.searchsorted(self.times_scaled, t, side="right") - 1
        k = np.minimum(k, self.steps.size - 1)
        return self._cumint[k] + self.values[k] * (t - self.times_scaled[k])

    def integral(self, a, b):
        return self.cumulative_integral(b) - self.cumulative_integral(a)


def drift(x, p: ModelParams):
    x = np.asarray(x, dtype=float)
    s = 1.0 + x * x
    bracket = p.eta - p.lambda0 / 2 - (x / p.x_max) ** 2
    return bracket * s ** (p.eta - 1) / (p.epsilon * np.sqrt(s) + 1.0) ** 2 * x


def diffusion(x, p: ModelParams):
    s = 1.0 + np.asarray(x, dtype=float) ** 2
    return s ** (p.eta / 2) / (p.epsilon * np.sqrt(s) + 1.0)


def step_size(x, p: ModelParams):
    s = 1.0 + np.asarray(x, dtype=float) ** 2
    return p.kappa**2 * (p.epsilon * np.sqrt(s) + 1.0) ** 2 / s ** (p.eta - 1)


def step(x_k, zeta, p: ModelParams):
    """One iteration of the variable-step scheme, clamped to ``|x| <= 10 x_max``."""
    x_k = np.asarray(x_k, dtype=float)
    k2 = p.kappa**2
    incr = k2 * (p.eta - p.lambda0 / 2 - (x_k / p.x_max) ** 2) * x_k
    incr = incr + p.kappa * np.sqrt(1.0 + x_k * x_k) * zeta
    out = incr if p.literal_update else x_k + incr
    lim = CLAMP_FACTOR * p.x_max
    out = np.clip(out, -lim, lim)
    return out if out.ndim else float(out)


@numba.njit(nogil=True, cache=True)
def _advance(x, t, t_end, zetas, out_x, out_h, out_t, n_out,
             eta, a, eps, x_max, kappa, literal):
    """Iterate until ``t >= t_end``, the zeta block, or the output buffer runs out.

    Returns (x, t, zetas_used, n_out, clamps). Storing is skipped when
    ``out_x`` has length 0.
    """
    store = out_x.size > 0
    k2 = kappa * kappa
    lim = 10.0 * x_max
    clamps = 0
    i = 0
    while i < zetas.size and t < t_end:
        if store and n_out >= out_h.size:
            break
        s = 1.0 + x * x
        r = math.sqrt(s)
        h = k2 * (eps * r + 1.0) ** 2 / s ** (eta - 1.0)
        q = x / x_max
        incr = k2 * (a - q * q) * x + kappa * r * zetas[i]
        if literal:
            xn = incr
        else:
            xn = x + incr
        if xn > lim:
            xn = lim
            clamps += 1
        elif xn < -lim:
            xn = -lim
            clamps += 1
        if store:
            out_x[n_out] = x
            out_h[n_out] = h
            out_t[n_out + 1] = t + h
            n_out += 1
        x = xn
        t += h
        i += 1
    return x, t, i, n_out, clamps


class _ZetaStream:
    """Standard normals drawn in fixed-size blocks so the sequence is seed-determined."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.buf = np.empty(0)
        self.pos = 0

    def chunk(self) -> np.ndarray:
        if self.pos >= self.buf.size:
            self.buf = self.rng.standard_normal(_BLOCK)
            self.pos = 0
        return self.buf[self.pos:]

    def consume(self, n: int) -> None:
        self.pos += n


def _kernel_args(p: ModelParams):
    return (p.eta, p.eta - p.lambda0 / 2, p.epsilon, p.x_max, p.kappa, p.literal_update)


def _burn_in(p: ModelParams, zs: _ZetaStream):
    x, t, clamps = float(p.x0), 0.0, 0
    empty = np.empty(0)
    args = _kernel_args(p)
    while t < p.burn_in_scaled_time:
        x, t, used, _, c = _advance(x, t, p.burn_in_scaled_time, zs.chunk(),
                                    empty, empty, empty, 0, *args)
        zs.consume(used)
        clamps += c
    return x, clamps


def _run(p, zs, x, t_end=np.inf, n_steps=None):
    cap = n_steps if n_steps is not None else 1 << 20
    out_x = np.empty(cap)
    out_h = np.empty(cap)
    out_t = np.empty(cap + 1)
    out_t[0] = 0.0
    n = 0
    t = 0.0
    clamps = 0
    args = _kernel_args(p)
    while t < t_end and (n_steps is None or n < n_steps):
        if n >= out_h.size:
            cap *= 2
            out_x = np.resize(out_x, cap)
            out_h = np.resize(out_h, cap)
            out_t = np.resize(out_t, cap + 1)
        x, t, used, n, c = _advance(x, t, t_end, zs.chunk(), out_x, out_h, out_t, n, *args)
        zs.consume(used)
        clamps += c
    values = np.append(out_x[:n], x)
    return values, out_h[:n].copy(), out_t[: n + 1].copy(), clamps


def _finish(p, values, steps, times, clamps, burn_clamps, total_steps):
    clamps += burn_clamps
    if total_steps and clamps / total_steps > MAX_CLAMP_FRACTION:
        raise RetssimError(
            f"overflow guard hit on {clamps} of {total_steps} steps; reduce kappa"
        )
    return Trajectory(times, values, steps, p, clamp_count=clamps)


def simulate(p: ModelParams, duration_scaled: float, rng: np.random.Generator | None = None) -> Trajectory:
    """Simulate a post-burn-in trajectory covering at least ``duration_scaled``.

    Starts from ``p.x0``, discards ``p.burn_in_scaled_time`` and re-zeroes
    time at the first retained point. With ``rng=None`` a generator seeded
    from ``p.seed`` is used.
    """
    if not duration_scaled > 0:
        raise ConfigError("duration_scaled must be positive")
    if rng is None:
        rng = np.random.default_rng(p.seed)
    zs = _ZetaStream(rng)
    x, burn_clamps = _burn_in(p, zs)
    values, steps, times, clamps = _run(p, zs, x, t_end=duration_scaled)
    return _finish(p, values, steps, times, clamps, burn_clamps, steps.size)


def simulate_steps(p: ModelParams, n_steps: int, rng: np.random.Generator | None = None) -> Trajectory:
    """Like :func:`simulate` but stops after a fixed number of retained steps."""
    if n_steps < 1:
        raise ConfigError("n_steps must be positive")
    if rng is None:
        rng = np.random.default_rng(p.seed)
    zs = _ZetaStream(rng)
    x, burn_clamps = _burn_in(p, zs)
    values, steps, times, clamps = _run(p, zs, x, n_steps=int(n_steps))
    return _finish(p, values, steps, times, clamps, burn_clamps, steps.size)


def resample_uniform(traj: Trajectory, dt_scaled: float) -> np.ndarray:
    """Hold-left samples of ``x`` at ``0, dt, 2 dt, ...`` strictly inside the support."""
    if not dt_scaled > 0:
        raise ConfigError("dt_scaled must be positive")
    if len(traj) == 0:
        raise DataError("empty trajectory")
    n = int(math.ceil(traj.duration / dt_scaled))
    grid = np.arange(n) * dt_scaled
    k = np.searchsorted(traj.times_scaled, grid, side="right") - 1
    return traj.values[np.clip(k, 0, len(traj) - 1)]


@numba.njit(nogil=True, cache=True)
def _advance_sampled(x, t, t_end, next_grid, dt, zetas, out, n_out,
                     eta, a, eps, x_max, kappa, literal):
    """Like :func:`_advance` but records hold-left samples at ``next_grid + j dt``."""
    k2 = kappa * kappa
    lim = 10.0 * x_max
    clamps = 0
    i = 0
    while i < zetas.size and t < t_end:
        s = 1.0 + x * x
        r = math.sqrt(s)
        h = k2 * (eps * r + 1.0) ** 2 / s ** (eta - 1.0)
        while next_grid < t + h and next_grid < t_end and n_out < out.size:
            out[n_out] = x
            n_out += 1
            next_grid = n_out * dt
        q = x / x_max
        incr = k2 * (a - q * q) * x + kappa * r * zetas[i]
        if literal:
            xn = incr
        else:
            xn = x + incr
        if xn > lim:
            xn = lim
            clamps += 1
        elif xn < -lim:
            xn = -lim
            clamps += 1
        x = xn
        t += h
        i += 1
    return x, t, i, n_out, clamps


def sample_uniform(p: ModelParams, duration_scaled: float, dt_scaled: float,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Stream ``x`` at ``0, dt, ...`` below ``duration_scaled`` without storing the path.

    Consumes the random stream exactly like :func:`simulate`, so the result
    equals ``resample_uniform(simulate(p, duration, rng), dt)`` truncated to
    the grid points below ``duration_scaled``.
    """
    if not duration_scaled > 0 or not dt_scaled > 0:
        raise ConfigError("duration_scaled and dt_scaled must be positive")
    if rng is None:
        rng = np.random.default_rng(p.seed)
    zs = _ZetaStream(rng)
    x, clamps = _burn_in(p, zs)
    n = int(math.ceil(duration_scaled / dt_scaled))
    out = np.empty(n)
    t, k, total = 0.0, 0, 0
    args = _kernel_args(p)
    while t < duration_scaled:
        x, t, used, k, c = _advance_sampled(x, t, duration_scaled, k * dt_scaled, dt_scaled,
                                            zs.chunk(), out, k, *args)
        zs.consume(used)
        clamps += c
        total += used
    if total and clamps / total > MAX_CLAMP_FRACTION:
        raise RetssimError(f"overflow guard hit on {clamps} of {total} steps; reduce kappa")
    return out[:k]


def stationary_density(x, p: ModelParams):
    """Unnormalized stationary density of the SDE (Ito Fokker-Planck solution).

    Proportional to (eps sqrt(1+x^2) + 1)^2 (1+x^2)^(-lambda0/2) exp(-x^2/x_max^2 + ...);
    the exponent integral is evaluated in closed form.
    """
    x = np.asarray(x, dtype=float)
    s = 1.0 + x * x
    m2 = p.x_max**2
    # int 2 x^3 / (x_max^2 (1 + x^2)) dx = (x^2 - ln(1 + x^2)) / x_max^2
    confine = -(x * x - np.log(s)) / m2
    return (p.epsilon * np.sqrt(s) + 1.0) ** 2 * s ** (-p.lambda0 / 2) * np.exp(confine)


def write_trajectory_csv(traj: Trajectory, path, max_rows: int = _TRAJECTORY_CSV_MAX_ROWS) -> None:
    """Debug dump with header ``t_scaled,x``."""
    if len(traj) > max_rows:
        raise DataError(f"trajectory has {len(traj)} rows, above the dump limit {max_rows}")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t_scaled", "x"])
        for t, x in zip(traj.times_scaled, traj.values):
            w.writerow([repr(float(t)), repr(float(x))])
