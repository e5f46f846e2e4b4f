"""Estimators for the two target statistics of absolute returns.

* log-binned probability density of normalized ``|r|``
* one-sided power spectral density of ``|r|`` (non-overlapping Welch)

plus power-law slope fitting and equal-weight ensemble averaging.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import ConfigError, DataError
from .synth import ReturnSeries

PDF_LOWER_EDGE = 1e-2
DEFAULT_BINS_PER_DECADE = 10
PARSEVAL_RTOL = 0.02


@dataclass(frozen=True, eq=False)
class HistogramEstimate:
    bin_edges: np.ndarray
    density: np.ndarray
    counts: np.ndarray
    count: int
    members: int = 1

    @property
    def centers(self) -> np.ndarray:
        return np.sqrt(self.bin_edges[:-1] * self.bin_edges[1:])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    def mass(self) -> float:
        return float(np.sum(self.density * self.widths))


@dataclass(frozen=True, eq=False)
class SpectrumEstimate:
    """One-sided PSD; ``freqs`` in Hz, DC excluded."""

    freqs: np.ndarray
    power: np.ndarray
    segment_length: int
    segments_averaged: int
    variance: float = float("nan")
    members: int = 1

    def parseval_sum(self) -> float:
        df = self.freqs[0] if self.freqs.size else 0.0
        return float(np.sum(self.power) * df)


def log_edges(bins_per_decade: int = DEFAULT_BINS_PER_DECADE, lower: float = PDF_LOWER_EDGE,
              upper: float = 1.0) -> np.ndarray:
    """Decade-anchored log-spaced edges from ``lower`` until ``upper`` is covered."""
    if bins_per_decade < 1:
        raise ConfigError("bins_per_decade must be positive")
    lo = math.log10(lower)
    n = max(1, math.ceil((math.log10(max(upper, lower)) - lo) * bins_per_decade - 1e-9))
    edges = 10.0 ** (lo + np.arange(n + 1) / bins_per_decade)
    if edges[-1] < upper:
        edges = np.append(edges, 10.0 ** (lo + (n + 1) / bins_per_decade))
    return edges


def pdf_estimate(series: ReturnSeries, bins_per_decade: int = DEFAULT_BINS_PER_DECADE,
                 exclude_zero_flagged: bool = True, lower: float = PDF_LOWER_EDGE,
                 upper: float | None = None) -> HistogramEstimate:
    """Density of ``|r|`` on log bins spanning ``[lower, upper]``.

    ``upper`` defaults to the sample maximum; pass a fixed value when
    estimates will be merged. Density is ``count / (N * width)`` with ``N``
    all retained samples, so mass outside the bins is simply missing.
    """
    if bins_per_decade < 4:
        raise ConfigError("bins_per_decade must be at least 4")
    v = series.values
    if exclude_zero_flagged:
        v = v[~series.zero_flags]
    if v.size == 0:
        raise DataError("no returns left to estimate a density")
    a = np.abs(v)
    edges = log_edges(bins_per_decade, lower, float(a.max()) if upper is None else upper)
    counts, _ = np.histogram(a, edges)
    density = counts / (a.size * np.diff(edges))
    return HistogramEstimate(edges, density, counts.astype(np.int64), int(a.size))


def psd_estimate(series: ReturnSeries, segment_length: int, tau: float | None = None,
                 window: str = "rectangular") -> SpectrumEstimate:
    """Averaged periodogram of ``|r|`` over non-overlapping segments.

    Each segment is mean-removed. Power is one-sided and scaled so that
    ``sum(power) * df`` equals the mean per-segment variance (exactly for
    the rectangular window, up to the Nyquist-bin convention).
    """
    if segment_length < 2 or segment_length & (segment_length - 1):
        raise ConfigError("segment_length must be a power of two >= 2")
    if window not in ("rectangular", "hann"):
        raise ConfigError(f"unknown window {window!r}")
    tau = series.tau if tau is None else tau
    a = np.abs(series.values)
    m = a.size // segment_length
    if m < 1:
        raise DataError(f"series of {a.size} values shorter than segment length {segment_length}")
    seg = a[: m * segment_length].reshape(m, segment_length)
    seg = seg - seg.mean(axis=1, keepdims=True)
    w = np.ones(segment_length) if window == "rectangular" else np.hanning(segment_length)
    u = np.mean(w * w)
    spec = np.abs(np.fft.rfft(seg * w, axis=1)) ** 2
    p = spec.mean(axis=0) / (segment_length**2 * u)
    # fold negative frequencies; the Nyquist bin has no partner
    p[1:-1] *= 2
    df = 1.0 / (segment_length * tau)
    return SpectrumEstimate(
        freqs=np.arange(1, p.size) * df,
        power=p[1:] / df,
        segment_length=segment_length,
        segments_averaged=m,
        variance=float(np.mean(seg.var(axis=1))),
    )


def largest_segment(n: int, cap: int) -> int:
    """Largest power of two not exceeding ``min(n, cap)``."""
    k = min(n, cap)
    if k < 2:
        raise DataError("series too short for a spectrum")
    return 1 << (k.bit_length() - 1)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    n_points: int


def _xy(estimate):
    if isinstance(estimate, HistogramEstimate):
        return estimate.centers, estimate.density
    if isinstance(estimate, SpectrumEstimate):
        return estimate.freqs, estimate.power
    x, y = estimate
    return np.asarray(x, float), np.asarray(y, float)


def slope_fit(estimate, lo: float, hi: float, min_count: int = 0) -> SlopeFit:
    """OLS slope of ``log10 y`` on ``log10 x`` for ``lo <= x <= hi``.

    Accepts a histogram, a spectrum or an ``(x, y)`` pair. ``min_count``
    drops sparsely populated histogram bins.
    """
    x, y = _xy(estimate)
    m = (x >= lo) & (x <= hi) & (y > 0)
    if min_count and isinstance(estimate, HistogramEstimate):
        m &= estimate.counts >= min_count
    if m.sum() < 5:
        raise DataError(f"only {int(m.sum())} usable points in [{lo}, {hi}]; need 5")
    res = sps.linregress(np.log10(x[m]), np.log10(y[m]))
    return SlopeFit(float(res.slope), float(res.stderr), float(res.intercept), int(m.sum()))


def log_bin_spectrum(est: SpectrumEstimate, bins_per_decade: int = DEFAULT_BINS_PER_DECADE) -> SpectrumEstimate:
    """Average power inside decade-anchored log bins; centres are geometric.

    Bins without any frequency are dropped.
    """
    edges = log_edges(bins_per_decade, lower=10.0 ** math.floor(math.log10(est.freqs[0])),
                      upper=est.freqs[-1] * 1.000001)
    idx = np.digitize(est.freqs, edges) - 1
    n = np.bincount(idx, minlength=edges.size - 1)
    s = np.bincount(idx, weights=est.power, minlength=edges.size - 1)
    keep = n > 0
    centers = np.sqrt(edges[:-1] * edges[1:])
    return SpectrumEstimate(centers[keep], s[keep] / n[keep], est.segment_length,
                            est.segments_averaged, est.variance, est.members)


def ensemble_merge(estimates):
    """Pointwise mean of estimates on one grid, equal weight per member.

    Each estimate carries the number of members it already averages, so
    merging merged estimates gives the same result as one flat merge.
    """
    estimates = list(estimates)
    if not estimates:
        raise DataError("nothing to merge")
    first = estimates[0]
    if isinstance(first, HistogramEstimate):
        for e in estimates[1:]:
            if not isinstance(e, HistogramEstimate) or not np.array_equal(e.bin_edges, first.bin_edges):
                raise DataError("histogram grids differ")
        return HistogramEstimate(
            first.bin_edges,
            _weighted_mean([e.density for e in estimates], [e.members for e in estimates]),
            np.sum([e.counts for e in estimates], axis=0),
            int(sum(e.count for e in estimates)),
            int(sum(e.members for e in estimates)),
        )
    if isinstance(first, SpectrumEstimate):
        for e in estimates[1:]:
            if not isinstance(e, SpectrumEstimate) or not np.array_equal(e.freqs, first.freqs):
                raise DataError("spectrum frequency grids differ")
        return SpectrumEstimate(
            first.freqs,
            _weighted_mean([e.power for e in estimates], [e.members for e in estimates]),
            first.segment_length,
            int(sum(e.segments_averaged for e in estimates)),
            float(_weighted_mean([[e.variance] for e in estimates], [e.members for e in estimates])[0]),
            int(sum(e.members for e in estimates)),
        )
    raise TypeError(f"cannot merge {type(first).__name__}")


def _weighted_mean(arrays, weights):
    # math.fsum is exactly rounded, so the result does not depend on member order
    stack = np.stack(arrays) * np.asarray(weights, float)[:, None]
    return np.array([math.fsum(col) for col in stack.T]) / float(sum(weights))


def write_histogram_csv(est: HistogramEstimate, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "density", "count"])
        for lo, hi, d, c in zip(est.bin_edges[:-1], est.bin_edges[1:], est.density, est.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(d)), int(c)])


def read_histogram_csv(path) -> HistogramEstimate:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["bin_lo", "bin_hi", "density", "count"]:
        raise DataError(f"{path}: not a histogram CSV")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: empty histogram")
    lo = np.array([float(r[0]) for r in body])
    hi = np.array([float(r[1]) for r in body])
    edges = np.append(lo, hi[-1])
    counts = np.array([int(r[3]) for r in body], dtype=np.int64)
    return HistogramEstimate(edges, np.array([float(r[2]) for r in body]), counts, int(counts.sum()))


def write_spectrum_csv(est: SpectrumEstimate, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["freq_hz", "power"])
        for fr, p in zip(est.freqs, est.power):
            w.writerow([repr(float(fr)), repr(float(p))])


def read_spectrum_csv(path) -> SpectrumEstimate:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["freq_hz", "power"]:
        raise DataError(f"{path}: not a spectrum CSV")
    if len(rows) < 2:
        raise DataError(f"{path}: empty spectrum")
    freqs = np.array([float(r[0]) for r in rows[1:]])
    power = np.array([float(r[1]) for r in rows[1:]])
    return SpectrumEstimate(freqs, power, segment_length=2 * freqs.size, segments_averaged=0)
