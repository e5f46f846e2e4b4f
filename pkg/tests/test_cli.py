import csv
import json
import math

import numpy as np
import pytest

from retssim import cli, empirics, stats
from retssim.errors import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_THRESHOLD

SMALL = {
    "params": {"burn_in_scaled_time": 50.0, "seed": 3},
    "taus": [60, 600],
    "windows": 20000,
    "segment_length": 4096,
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def files(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


def test_simulate_layout_and_manifest(tmp_path, config):
    out = tmp_path / "m"
    assert cli.main(["simulate", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert files(out) == ["600s/pdf.csv", "600s/psd.csv", "60s/pdf.csv", "60s/psd.csv", "manifest.json"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["config"]["params"]["seed"] == 3
    assert {s["tau"] for s in man["seeds"]} == {60.0, 600.0}
    assert all(s["windows"] == 20000 and s["clamp_count"] == 0 for s in man["seeds"])
    for rel, digest in man["outputs"].items():
        assert cli._sha256(out / rel) == digest
    head = (out / "60s/psd.csv").read_text().splitlines()[0]
    assert head == "freq_hz,power"


def test_simulate_byte_identical_and_manifest_replay(tmp_path, config):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli.main(["simulate", "--config", str(config), "--out", str(a)]) == 0
    assert cli.main(["simulate", "--config", str(config), "--out", str(b)]) == 0
    assert cli.main(["simulate", "--config", str(a / "manifest.json"), "--out", str(c)]) == 0
    for rel in ("60s/pdf.csv", "60s/psd.csv", "600s/pdf.csv", "600s/psd.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes() == (c / rel).read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mc = json.loads((c / "manifest.json").read_text())
    assert ma["outputs"] == mc["outputs"] and ma["seeds"] == mc["seeds"]


def test_threads_do_not_change_output(tmp_path, config, monkeypatch):
    monkeypatch.setenv("RETSSIM_THREADS", "1")
    assert cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / "one"),
                     "--realizations", "2"]) == 0
    monkeypatch.setenv("RETSSIM_THREADS", "4")
    assert cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / "four"),
                     "--realizations", "2"]) == 0
    for rel in ("60s/pdf.csv", "600s/psd.csv"):
        assert (tmp_path / "one" / rel).read_bytes() == (tmp_path / "four" / rel).read_bytes()
    monkeypatch.setenv("RETSSIM_THREADS", "many")
    assert cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_seed_changes_output(tmp_path, config):
    cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / "a"), "--tau", "60"])
    cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / "b"), "--tau", "60",
              "--seed", "4"])
    assert (tmp_path / "a/60s/psd.csv").read_bytes() != (tmp_path / "b/60s/psd.csv").read_bytes()


@pytest.mark.parametrize("argv", [["--kappa", "1.5"], ["--realizations", "0"],
                                  ["--segment-length", "1000"], ["--tau", "-60"]])
def test_simulate_config_errors(tmp_path, config, argv):
    out = tmp_path / "bad"
    assert cli.main(["simulate", "--config", str(config), "--out", str(out)] + argv) == EXIT_CONFIG
    assert not out.exists()


def test_bad_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["simulate", "--config", str(p)]) == EXIT_CONFIG
    p.write_text('{"tuas": [60]}')
    assert cli.main(["simulate", "--config", str(p)]) == EXIT_CONFIG


def write_tape(path, symbol_returns, tau=60.0):
    tapes = [empirics.ticks_from_returns(r, tau, symbol=s) for s, r in symbol_returns.items()]
    empirics.write_ticks_csv(path, tapes)


def test_analyze_constant_prices_is_data_error(tmp_path):
    write_tape(tmp_path / "t.csv", {"FLAT": np.zeros(5000)})
    out = tmp_path / "e"
    rc = cli.main(["analyze", str(tmp_path / "t.csv"), "--tau", "60", "--out", str(out),
                   "--segment-length", "1024"])
    assert rc == EXIT_DATA and not out.exists()


def test_analyze_missing_file(tmp_path):
    assert cli.main(["analyze", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "e")]) == EXIT_DATA
    assert cli.main(["analyze", "--out", str(tmp_path / "e")]) == EXIT_CONFIG


def test_analyze_averages_symbols(tmp_path):
    rng = np.random.default_rng(0)
    ra, rb = rng.standard_t(4, 8192), 3 * rng.standard_t(4, 8192)
    write_tape(tmp_path / "t.csv", {"AAA": ra, "BBB": rb})
    write_tape(tmp_path / "a.csv", {"AAA": ra})
    write_tape(tmp_path / "b.csv", {"BBB": rb})
    for name in ("t", "a", "b"):
        assert cli.main(["analyze", str(tmp_path / f"{name}.csv"), "--tau", "60",
                         "--out", str(tmp_path / f"o{name}"), "--segment-length", "1024"]) == 0
    both = stats.read_spectrum_csv(tmp_path / "ot/60s/psd.csv")
    sa = stats.read_spectrum_csv(tmp_path / "oa/60s/psd.csv")
    sb = stats.read_spectrum_csv(tmp_path / "ob/60s/psd.csv")
    assert np.allclose(both.power, (sa.power + sb.power) / 2, rtol=1e-12)
    hb = stats.read_histogram_csv(tmp_path / "ot/60s/pdf.csv")
    ha = stats.read_histogram_csv(tmp_path / "oa/60s/pdf.csv")
    hbb = stats.read_histogram_csv(tmp_path / "ob/60s/pdf.csv")
    assert np.allclose(hb.density, (ha.density + hbb.density) / 2, rtol=1e-12)
    man = json.loads((tmp_path / "ot/manifest.json").read_text())
    assert set(man["excluded_zero_fraction"]["60s"]) == {"AAA", "BBB"}
    assert all(v["malformed"] == 0 for v in man["inputs"].values())


def test_analyze_with_session(tmp_path):
    # a tape of trades inside one 10:00-16:00 UTC session
    start = 1709546400000  # 2024-03-04 10:00 UTC, a Monday
    r = np.random.default_rng(1).normal(0, 1, 300)
    tape = empirics.ticks_from_returns(r, 60.0, symbol="S", start_ms=start)
    empirics.write_ticks_csv(tmp_path / "t.csv", [tape])
    sess = tmp_path / "s.json"
    sess.write_text(json.dumps({"exchange": "X", "timezone": "UTC", "open": "10:00", "close": "16:00",
                                "holidays": []}))
    assert cli.main(["analyze", str(tmp_path / "t.csv"), "--session", str(sess), "--tau", "60",
                     "--out", str(tmp_path / "o"), "--segment-length", "64"]) == 0


def test_compare_self_and_scaled(tmp_path, config):
    m = tmp_path / "m"
    cli.main(["simulate", "--config", str(config), "--out", str(m)])
    report = tmp_path / "r.csv"
    assert cli.main(["compare", str(m), str(m), "--out", str(report)]) == 0
    rows = list(csv.DictReader(report.open()))
    assert [float(r["tau_s"]) for r in rows] == [60.0, 600.0]
    assert all(float(r["pdf_metric"]) == 0.0 and float(r["psd_metric"]) == 0.0 for r in rows)
    assert all(r["pass"] == "1" for r in rows)

    # every density times ten: the metric is exactly one decade
    scaled = tmp_path / "s"
    for label in ("60s", "600s"):
        (scaled / label).mkdir(parents=True)
        h = stats.read_histogram_csv(m / label / "pdf.csv")
        stats.write_histogram_csv(stats.HistogramEstimate(h.bin_edges, h.density * 10, h.counts, h.count),
                                  scaled / label / "pdf.csv")
        (scaled / label / "psd.csv").write_bytes((m / label / "psd.csv").read_bytes())
    rows = cli.compare_dirs(m, scaled)
    assert all(math.isclose(r["pdf_metric"], 1.0, rel_tol=1e-12) for r in rows)
    assert cli.main(["compare", str(m), str(scaled), "--out", str(report)]) == EXIT_THRESHOLD
    assert {r["pass"] for r in csv.DictReader(report.open())} == {"0"}
    assert cli.main(["compare", str(m), str(scaled), "--out", str(report), "--threshold", "1.5"]) == 0


def test_compare_mismatched_taus(tmp_path, config):
    cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / "a")])
    cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / "b"), "--tau", "60"])
    assert cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "b"),
                     "--out", str(tmp_path / "r.csv")]) == EXIT_DATA


def test_ticks_then_analyze(tmp_path, config):
    tape = tmp_path / "ticks.csv"
    assert cli.main(["ticks", "--config", str(config), "--out", str(tape)]) == 0
    data = empirics.read_ticks(tape)
    assert data.symbols == ["SYN"] and data.timestamps["SYN"].size == 20001
    assert cli.main(["analyze", str(tape), "--tau", "60", "--out", str(tmp_path / "e"),
                     "--segment-length", "4096"]) == 0


def test_dump_returns(tmp_path, config):
    out = tmp_path / "m"
    assert cli.main(["simulate", "--config", str(config), "--out", str(out), "--tau", "60",
                     "--dump-returns"]) == 0
    lines = (out / "60s/returns_0.csv").read_text().splitlines()
    assert lines[0] == "t_seconds,r" and len(lines) == 20001
