import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retssim import stats
from retssim.errors import ConfigError, DataError
from retssim.qgaussian import QGaussian
from retssim.synth import ReturnSeries


def series(v, tau=60.0, **kw):
    return ReturnSeries(tau, np.asarray(v, float), **kw)


def test_log_edges_decade_anchored():
    e = stats.log_edges(10, 1e-2, 1e2)
    assert e[0] == 1e-2 and e.size == 41
    assert e[10] == pytest.approx(0.1, rel=1e-14) and e[-1] == pytest.approx(100.0, rel=1e-14)
    assert np.allclose(np.diff(np.log10(e)), 0.1)


def test_all_ones_histogram():
    h = stats.pdf_estimate(series(np.ones(1000)))
    nz = np.flatnonzero(h.counts)
    assert nz.size == 1
    lo, hi = h.bin_edges[nz[0]], h.bin_edges[nz[0] + 1]
    assert lo <= 1.0 <= hi
    assert h.density[nz[0]] == pytest.approx(1 / (hi - lo), rel=1e-12)
    assert h.mass() == pytest.approx(1.0, rel=1e-12)


def test_histogram_matches_qgaussian():
    d = QGaussian(1, 5)
    n = 1_000_000
    x = d.sample(np.random.default_rng(0), n)
    h = stats.pdf_estimate(series(x), upper=1e3)
    # density of |r| is twice the symmetric density, averaged over each bin
    exact = 2 * np.diff(d.cdf(h.bin_edges)) / h.widths
    expected = exact * h.widths * n
    ok = expected >= 100
    assert ok.sum() > 20
    # 5% where that is at least three Poisson deviations, three deviations elsewhere
    tight = expected >= 3600
    assert np.allclose(h.density[tight], exact[tight], rtol=0.05)
    assert np.all(np.abs(h.counts[ok] - expected[ok]) <= 3 * np.sqrt(expected[ok]))


def test_histogram_excludes_flagged_and_validates():
    s = series([0.0, 0.5, 0.0], zero_flags=[True, False, True])
    assert stats.pdf_estimate(s).count == 1
    assert stats.pdf_estimate(s, exclude_zero_flagged=False).count == 3
    with pytest.raises(DataError):
        stats.pdf_estimate(series([0.0], zero_flags=[True]))
    with pytest.raises(ConfigError):
        stats.pdf_estimate(series([1.0]), bins_per_decade=3)


def test_merge_of_halves_is_whole():
    x = np.random.default_rng(1).standard_t(4, 200_000)
    a = stats.pdf_estimate(series(x[:100_000]), upper=1e3)
    b = stats.pdf_estimate(series(x[100_000:]), upper=1e3)
    whole = stats.pdf_estimate(series(x), upper=1e3)
    m = stats.ensemble_merge([a, b])
    assert np.allclose(m.density, whole.density, rtol=1e-12, atol=0)
    assert np.array_equal(m.counts, whole.counts) and m.members == 2


def test_sinusoid_peak():
    tau = 60.0
    n = 4096
    k = np.arange(n)
    # |r| of a shifted sinusoid keeps its period
    x = 3 + np.sin(2 * np.pi * k / 16)
    est = stats.psd_estimate(series(x, tau), 1024)
    assert est.freqs[np.argmax(est.power)] == pytest.approx(1 / (16 * tau), rel=1e-12)
    assert est.segments_averaged == 4


def test_white_noise_flat_and_parseval():
    x = np.random.default_rng(2).normal(size=2**20)
    est = stats.psd_estimate(series(x, 1.0), 4096)
    fit = stats.slope_fit(stats.log_bin_spectrum(est), est.freqs[0], est.freqs[-1])
    assert abs(fit.slope) < 0.1
    assert est.parseval_sum() == pytest.approx(np.var(np.abs(x)), rel=stats.PARSEVAL_RTOL)
    # exact for the rectangular window against the mean per-segment variance
    assert est.parseval_sum() == pytest.approx(est.variance, rel=1e-10)


def test_hann_window_parseval_approximate():
    x = np.random.default_rng(3).normal(size=2**18)
    est = stats.psd_estimate(series(x, 1.0), 1024, window="hann")
    assert est.parseval_sum() == pytest.approx(est.variance, rel=stats.PARSEVAL_RTOL)


def test_psd_validation():
    with pytest.raises(ConfigError):
        stats.psd_estimate(series(np.ones(100)), 100)
    with pytest.raises(ConfigError):
        stats.psd_estimate(series(np.ones(100)), 64, window="kaiser")
    with pytest.raises(DataError):
        stats.psd_estimate(series(np.ones(100)), 128)
    assert stats.largest_segment(1000, 65536) == 512
    assert stats.largest_segment(10**6, 65536) == 65536


def test_slope_fit_exact_power_law():
    x = np.logspace(0, 3, 40)
    fit = stats.slope_fit((x, 7 * x**-3.0), 1, 1e3)
    assert fit.slope == pytest.approx(-3.0, abs=1e-12)
    assert fit.n_points == 40
    assert stats.slope_fit((x, np.full(40, 2.0)), 1, 1e3).slope == pytest.approx(0.0, abs=1e-12)


def test_slope_fit_needs_points():
    x = np.logspace(0, 1, 4)
    with pytest.raises(DataError):
        stats.slope_fit((x, x), 1, 10)


def test_slope_fit_qgaussian_tail():
    d = QGaussian(1, 5)
    x = d.sample(np.random.default_rng(4), 4_000_000)
    h = stats.pdf_estimate(series(x), upper=1e3)
    # exact bin-averaged density on the far tail
    exact = stats.HistogramEstimate(h.bin_edges, 2 * np.diff(d.cdf(h.bin_edges)) / h.widths, h.counts, h.count)
    assert stats.slope_fit(exact, 10, 100).slope == pytest.approx(-5.0, abs=0.3)
    # sampled: 4e6 draws populate the tail out to ~30
    assert stats.slope_fit(h, 3, 30, min_count=10).slope == pytest.approx(-5.0, abs=0.3)


def spectra(seed, k):
    rng = np.random.default_rng(seed)
    f = np.arange(1, 9) / 80.0
    return [stats.SpectrumEstimate(f, rng.random(8) * 10.0 ** rng.integers(-8, 8), 16, 1, 1.0)
            for _ in range(k)]


def test_merge_identity():
    s = spectra(0, 1)[0]
    assert np.array_equal(stats.ensemble_merge([s]).power, s.power)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_merge_commutative_associative(seed, order):
    es = spectra(seed, 5)
    flat = stats.ensemble_merge(es).power
    assert np.allclose(stats.ensemble_merge([es[i] for i in order]).power, flat, rtol=1e-12, atol=0)
    nested = stats.ensemble_merge([stats.ensemble_merge(es[:2]), stats.ensemble_merge(es[2:])])
    assert np.allclose(nested.power, flat, rtol=1e-12, atol=0)
    assert nested.members == 5


def test_merge_grid_mismatch():
    a = stats.SpectrumEstimate(np.array([1.0, 2.0]), np.ones(2), 4, 1)
    b = stats.SpectrumEstimate(np.array([1.0, 3.0]), np.ones(2), 4, 1)
    with pytest.raises(DataError):
        stats.ensemble_merge([a, b])
    h = stats.pdf_estimate(series([0.5, 2.0]))
    with pytest.raises(DataError):
        stats.ensemble_merge([h, a])
    with pytest.raises(DataError):
        stats.ensemble_merge([])
    with pytest.raises(TypeError):
        stats.ensemble_merge([1, 2])


def test_log_bin_spectrum():
    f = np.arange(1, 1001) * 1e-3
    est = stats.SpectrumEstimate(f, f**-1.0, 2000, 1)
    lb = stats.log_bin_spectrum(est, 10)
    assert lb.freqs.size < 35 and np.all(np.diff(lb.freqs) > 0)
    assert stats.slope_fit(lb, 1e-2, 1.0).slope == pytest.approx(-1.0, abs=0.05)


def test_csv_roundtrips(tmp_path):
    h = stats.pdf_estimate(series(np.random.default_rng(5).normal(size=1000)), upper=10)
    stats.write_histogram_csv(h, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "bin_lo,bin_hi,density,count"
    hb = stats.read_histogram_csv(tmp_path / "h.csv")
    assert np.array_equal(hb.bin_edges, h.bin_edges) and np.array_equal(hb.density, h.density)
    s = spectra(1, 1)[0]
    stats.write_spectrum_csv(s, tmp_path / "s.csv")
    sb = stats.read_spectrum_csv(tmp_path / "s.csv")
    assert np.array_equal(sb.freqs, s.freqs) and np.array_equal(sb.power, s.power)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        stats.read_spectrum_csv(tmp_path / "bad.csv")
    with pytest.raises(DataError):
        stats.read_histogram_csv(tmp_path / "bad.csv")


def test_parseval_constant_is_zero():
    est = stats.psd_estimate(series(np.full(256, 2.0)), 64)
    assert est.parseval_sum() == 0.0 and math.isclose(est.variance, 0.0, abs_tol=1e-30)
