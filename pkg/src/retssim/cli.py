"""Command-line front end: ``simulate``, ``analyze``, ``compare`` and ``ticks``.

Outputs go to ``<out>/<tau>s/{pdf.csv,psd.csv}`` plus ``<out>/manifest.json``.
A manifest can be fed back through ``--config`` to reproduce a run.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, empirics, sde, stats, synth
from .errors import EXIT_OK, ConfigError, DataError, RetssimError, ThresholdError

log = logging.getLogger("retssim")

DEFAULT_TAUS = (60.0, 600.0, 1800.0)
DEFAULT_SEGMENT = 1 << 16
DEFAULT_PDF_UPPER = 1e3
DEFAULT_THRESHOLD = 0.3
MIN_BIN_COUNT = 100


@dataclass
class RunConfig:
    params: sde.ModelParams = field(default_factory=sde.ModelParams)
    taus: tuple = DEFAULT_TAUS
    realizations: int = 1
    duration_scaled: float = 20.0
    # when set, each tau gets windows * sigma_t^2 * tau of scaled time instead
    windows: int | None = None
    output_dir: str = "out"
    inputs: tuple = ()
    session: str | None = None
    segment_length: int = DEFAULT_SEGMENT
    window: str = "rectangular"
    bins_per_decade: int = stats.DEFAULT_BINS_PER_DECADE
    pdf_upper: float = DEFAULT_PDF_UPPER
    exclude_zeros: bool = True
    dispersion: str = "all"

    def __post_init__(self):
        self.taus = tuple(float(t) for t in self.taus)
        self.inputs = tuple(str(p) for p in self.inputs)
        if not self.taus or any(not t > 0 for t in self.taus):
            raise ConfigError("taus must be a nonempty list of positive seconds")
        if len(set(self.taus)) != len(self.taus):
            raise ConfigError("taus contain duplicates")
        if int(self.realizations) < 1:
            raise ConfigError("realizations must be at least 1")
        if not self.duration_scaled > 0:
            raise ConfigError("duration_scaled must be positive")
        if self.windows is not None and int(self.windows) < 1:
            raise ConfigError("windows must be positive")
        if self.dispersion not in ("all", "nonzero"):
            raise ConfigError("dispersion must be 'all' or 'nonzero'")
        if self.window not in ("rectangular", "hann"):
            raise ConfigError("window must be 'rectangular' or 'hann'")
        sl = int(self.segment_length)
        if sl < 2 or sl & (sl - 1):
            raise ConfigError("segment_length must be a power of two")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "config" in d and "seeds" in d:
            d = dict(d["config"])  # a manifest
        params = sde.ModelParams.from_dict(d.pop("params", {}) or {})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(params=params, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["taus"] = list(self.taus)
        d["inputs"] = list(self.inputs)
        return d

    def duration_for(self, tau: float) -> float:
        if self.windows is None:
            return self.duration_scaled
        return self.windows * float(self.params.to_scaled(tau))


def tau_label(tau: float) -> str:
    return f"{int(tau)}s" if float(tau).is_integer() else f"{tau!r}s"


def _threads() -> int:
    raw = os.environ.get("RETSSIM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"RETSSIM_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


def _pmap(fn, items):
    items = list(items)
    n = min(_threads(), len(items))
    if n <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _seed_sequence(seed: int, tau: float, realization: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed) % (1 << 64),
                                  spawn_key=(int(round(tau * 1000)), int(realization)))


def realization_returns(cfg: RunConfig, tau: float, realization: int):
    """Simulate one (tau, realization) member; returns (series, trajectory)."""
    traj_ss, ret_ss = _seed_sequence(cfg.params.seed, tau, realization).spawn(2)
    traj = sde.simulate(cfg.params, cfg.duration_for(tau), np.random.default_rng(traj_ss))
    series = synth.generate_returns(traj, cfg.params, tau, np.random.default_rng(ret_ss), cfg.windows)
    return series, traj


class _Staging:
    """Write into a scratch directory and move into place only on success."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".retssim-", dir=self.out.parent))

    def path(self, rel: str) -> Path:
        p = self.tmp / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for src in sorted(self.tmp.rglob("*")):
                    if src.is_file():
                        dst = self.out / src.relative_to(self.tmp)
                        dst.parent.mkdir(parents=True, exist_ok=True)
                        os.replace(src, dst)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _write_estimates(stage: _Staging, tau: float, pdf, psd) -> list[str]:
    label = tau_label(tau)
    stats.write_histogram_csv(pdf, stage.path(f"{label}/pdf.csv"))
    stats.write_spectrum_csv(psd, stage.path(f"{label}/psd.csv"))
    return [f"{label}/pdf.csv", f"{label}/psd.csv"]


def _manifest_base(command: str, cfg: RunConfig) -> dict:
    return {
        "tool": "retssim",
        "version": __version__,
        "command": command,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
    }


def _write_manifest(stage: _Staging, manifest: dict, outputs: list[str]) -> None:
    manifest["outputs"] = {rel: _sha256(stage.tmp / rel) for rel in outputs}
    with open(stage.path("manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_simulate(cfg: RunConfig, dump_returns: bool = False) -> dict:
    """Model statistics per tau, averaged over seeded realizations."""
    tasks = [(tau, i) for tau in cfg.taus for i in range(cfg.realizations)]

    def run(task):
        tau, i = task
        series, traj = realization_returns(cfg, tau, i)
        return task, synth.normalize(series), traj

    results = {task: (series, traj) for task, series, traj in _pmap(run, tasks)}
    manifest = _manifest_base("simulate", cfg)
    manifest["seeds"] = []
    outputs = []
    with _Staging(cfg.output_dir) as stage:
        for tau in cfg.taus:
            members = [results[(tau, i)] for i in range(cfg.realizations)]
            n = min(len(s) for s, _ in members)
            seg = stats.largest_segment(n, cfg.segment_length)
            pdfs, psds = [], []
            for i, (series, traj) in enumerate(members):
                pdfs.append(stats.pdf_estimate(series, cfg.bins_per_decade, upper=cfg.pdf_upper))
                psds.append(stats.psd_estimate(series, seg, tau, cfg.window))
                manifest["seeds"].append({
                    "tau": tau, "realization": i,
                    "entropy": int(cfg.params.seed) % (1 << 64),
                    "spawn_key": [int(round(tau * 1000)), i],
                    "steps": int(traj.steps.size), "clamp_count": int(traj.clamp_count),
                    "windows": len(series),
                })
                if dump_returns:
                    rel = f"{tau_label(tau)}/returns_{i}.csv"
                    synth.write_returns_csv(series, stage.path(rel))
                    outputs.append(rel)
            outputs += _write_estimates(stage, tau, stats.ensemble_merge(pdfs), stats.ensemble_merge(psds))
        _write_manifest(stage, manifest, outputs)
    return manifest


def _load_ticks(paths) -> tuple[empirics.TickData, dict]:
    merged_t: dict[str, list] = {}
    merged_p: dict[str, list] = {}
    info = {}
    for path in sorted(paths):
        if not Path(path).is_file():
            raise DataError(f"tick file not found: {path}")
        data = empirics.read_ticks(path)
        info[str(path)] = {"sha256": _sha256(path), "rows": data.rows, "malformed": data.malformed}
        for sym in data.symbols:
            merged_t.setdefault(sym, []).append(data.timestamps[sym])
            merged_p.setdefault(sym, []).append(data.prices[sym])
    out = empirics.TickData({}, {})
    for sym in merged_t:
        t = np.concatenate(merged_t[sym])
        order = np.argsort(t, kind="stable")
        out.timestamps[sym] = t[order]
        out.prices[sym] = np.concatenate(merged_p[sym])[order]
    return out, info


def empirical_member(data, symbol, tau, cfg: RunConfig, session):
    """Grid, returns and normalization for one symbol; returns (series, excluded fraction)."""
    series = empirics.symbol_returns(data, symbol, tau, session)
    frac = float(series.zero_flags.mean())
    if cfg.exclude_zeros and frac == 1.0:
        raise DataError(f"{symbol} at tau={tau}s: every window has zero return; "
                        "nothing left after exclusion")
    return synth.normalize(series, exclude_zero_flagged=cfg.dispersion == "nonzero"), frac


def cmd_analyze(cfg: RunConfig) -> dict:
    """Empirical statistics per tau, averaged over symbols."""
    if not cfg.inputs:
        raise ConfigError("analyze needs at least one tick file")
    session = empirics.load_session(cfg.session) if cfg.session else None
    data, info = _load_ticks(cfg.inputs)
    symbols = data.symbols
    if not symbols:
        raise DataError("tick files contain no valid trades")
    tasks = [(tau, s) for tau in cfg.taus for s in symbols]
    results = dict(zip(tasks, _pmap(lambda t: empirical_member(data, t[1], t[0], cfg, session), tasks)))

    manifest = _manifest_base("analyze", cfg)
    manifest["inputs"] = info
    manifest["seeds"] = []
    manifest["excluded_zero_fraction"] = {}
    outputs = []
    with _Staging(cfg.output_dir) as stage:
        for tau in cfg.taus:
            members = [results[(tau, s)] for s in symbols]
            seg = stats.largest_segment(min(len(m[0]) for m in members), cfg.segment_length)
            pdfs = [stats.pdf_estimate(m[0], cfg.bins_per_decade, cfg.exclude_zeros, upper=cfg.pdf_upper)
                    for m in members]
            psds = [stats.psd_estimate(m[0], seg, tau, cfg.window) for m in members]
            manifest["excluded_zero_fraction"][tau_label(tau)] = {
                s: (m[1] if cfg.exclude_zeros else 0.0) for s, m in zip(symbols, members)}
            outputs += _write_estimates(stage, tau, stats.ensemble_merge(pdfs), stats.ensemble_merge(psds))
        _write_manifest(stage, manifest, outputs)
    return manifest


def _tau_dirs(root: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(Path(root).iterdir())
            if p.is_dir() and (p / "pdf.csv").is_file() and (p / "psd.csv").is_file()}


def pdf_metric(a: stats.HistogramEstimate, b: stats.HistogramEstimate,
               min_count: int = MIN_BIN_COUNT) -> tuple[float, int]:
    """Mean |log10 a - log10 b| over shared bins where both counts reach ``min_count``."""
    ea, eb = np.round(np.log10(a.bin_edges), 9), np.round(np.log10(b.bin_edges), 9)
    common, ia, ib = np.intersect1d(ea[:-1], eb[:-1], return_indices=True)
    ok = ((a.counts[ia] >= min_count) & (b.counts[ib] >= min_count)
          & (a.density[ia] > 0) & (b.density[ib] > 0))
    if not ok.any():
        raise DataError("no histogram bins with enough counts in both estimates")
    d = np.abs(np.log10(a.density[ia][ok]) - np.log10(b.density[ib][ok]))
    return float(d.mean()), int(ok.sum())


def psd_metric(a: stats.SpectrumEstimate, b: stats.SpectrumEstimate, band=None) -> tuple[float, int]:
    """Mean |log10 a - log10 b| of log-binned spectra over shared bins in ``band`` (Hz)."""
    la, lb = stats.log_bin_spectrum(a), stats.log_bin_spectrum(b)
    ka, kb = np.round(np.log10(la.freqs), 9), np.round(np.log10(lb.freqs), 9)
    common, ia, ib = np.intersect1d(ka, kb, return_indices=True)
    f = la.freqs[ia]
    ok = (la.power[ia] > 0) & (lb.power[ib] > 0)
    if band is not None:
        ok &= (f >= band[0]) & (f <= band[1])
    if not ok.any():
        raise DataError("no overlapping spectrum bins in the comparison band")
    d = np.abs(np.log10(la.power[ia][ok]) - np.log10(lb.power[ib][ok]))
    return float(d.mean()), int(ok.sum())


def compare_dirs(model_dir, empirical_dir, band=None) -> list[dict]:
    md, ed = _tau_dirs(model_dir), _tau_dirs(empirical_dir)
    if not md:
        raise DataError(f"{model_dir}: no per-tau outputs")
    if set(md) != set(ed):
        raise DataError(f"tau outputs differ: {sorted(md)} vs {sorted(ed)}")
    rows = []
    for label in sorted(md, key=lambda s: float(s[:-1])):
        pm, pn = pdf_metric(stats.read_histogram_csv(md[label] / "pdf.csv"),
                            stats.read_histogram_csv(ed[label] / "pdf.csv"))
        sm, sn = psd_metric(stats.read_spectrum_csv(md[label] / "psd.csv"),
                            stats.read_spectrum_csv(ed[label] / "psd.csv"), band)
        rows.append({"tau_s": float(label[:-1]), "pdf_metric": pm, "pdf_bins": pn,
                     "psd_metric": sm, "psd_bins": sn})
    return rows


def cmd_compare(model_dir, empirical_dir, out, threshold: float = DEFAULT_THRESHOLD, band=None) -> list[dict]:
    """Write the per-tau report; raise ThresholdError if any metric exceeds ``threshold``."""
    rows = compare_dirs(model_dir, empirical_dir, band)
    for r in rows:
        r["pass"] = r["pdf_metric"] <= threshold and r["psd_metric"] <= threshold
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tau_s", "pdf_metric", "pdf_bins", "psd_metric", "psd_bins", "pass"])
        for r in rows:
            w.writerow([repr(r["tau_s"]), repr(r["pdf_metric"]), r["pdf_bins"],
                        repr(r["psd_metric"]), r["psd_bins"], int(r["pass"])])
    failed = [r["tau_s"] for r in rows if not r["pass"]]
    if failed:
        raise ThresholdError(f"metric above {threshold} at tau {failed}")
    return rows


def cmd_ticks(cfg: RunConfig, out, realization: int = 0, symbol: str = "SYN") -> Path:
    """Tick tape from the returns of one simulation member at the first tau."""
    tau = cfg.taus[0]
    series, _ = realization_returns(cfg, tau, realization)
    tape = empirics.ticks_from_returns(series.values, tau, symbol=symbol)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    empirics.write_ticks_csv(out, [tape])
    return out


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            return RunConfig.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _apply_flags(cfg: RunConfig, a) -> RunConfig:
    changes = {}
    if getattr(a, "tau", None):
        changes["taus"] = tuple(a.tau)
    for name in ("realizations", "segment_length", "window", "duration", "windows", "session",
                 "dispersion"):
        v = getattr(a, name, None)
        if v is not None:
            changes["duration_scaled" if name == "duration" else name] = v
    if getattr(a, "out", None) is not None:
        changes["output_dir"] = a.out
    if getattr(a, "exclude_zeros", None) is not None:
        changes["exclude_zeros"] = a.exclude_zeros
    if getattr(a, "inputs", None):
        changes["inputs"] = tuple(a.inputs)
    params = cfg.params
    if getattr(a, "seed", None) is not None:
        params = params.replace(seed=a.seed)
    if getattr(a, "kappa", None) is not None:
        params = params.replace(kappa=a.kappa)
    return dataclasses.replace(cfg, params=params, **changes)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retssim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config or a previous manifest")
        sp.add_argument("--tau", type=float, action="append", help="window in seconds (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--segment-length", type=int)
        sp.add_argument("--window", choices=["rectangular", "hann"])

    s = sub.add_parser("simulate", help="model PDF and PSD per tau")
    common(s)
    s.add_argument("--realizations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--kappa", type=float)
    s.add_argument("--duration", type=float, help="scaled duration per realization")
    s.add_argument("--windows", type=int, help="windows per tau (overrides --duration)")
    s.add_argument("--dump-returns", action="store_true")

    a = sub.add_parser("analyze", help="empirical PDF and PSD per tau from tick CSV")
    common(a)
    a.add_argument("inputs", nargs="*", help="tick CSV files")
    a.add_argument("--session", help="session spec JSON")
    a.add_argument("--exclude-zeros", action=argparse.BooleanOptionalAction, default=None)
    a.add_argument("--dispersion", choices=["all", "nonzero"])

    c = sub.add_parser("compare", help="model vs empirical metrics per tau")
    c.add_argument("model_dir")
    c.add_argument("empirical_dir")
    c.add_argument("--out", default="compare.csv")
    c.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    c.add_argument("--band", type=float, nargs=2, metavar=("LO_HZ", "HI_HZ"))

    t = sub.add_parser("ticks", help="synthetic tick CSV from one simulated realization")
    t.add_argument("--config")
    t.add_argument("--tau", type=float, action="append")
    t.add_argument("--seed", type=int)
    t.add_argument("--duration", type=float)
    t.add_argument("--windows", type=int)
    t.add_argument("--realization", type=int, default=0)
    t.add_argument("--symbol", default="SYN")
    t.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            cmd_compare(args.model_dir, args.empirical_dir, args.out, args.threshold, args.band)
        elif args.command == "ticks":
            out = args.out
            args.out = None
            cmd_ticks(_apply_flags(load_config(args.config), args), out, args.realization, args.symbol)
        else:
            cfg = _apply_flags(load_config(args.config), args)
            if args.command == "simulate":
                cmd_simulate(cfg, dump_returns=args.dump_returns)
            else:
                cmd_analyze(cfg)
    except RetssimError as exc:
        log.error("%s", exc)
        print(f"retssim: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
