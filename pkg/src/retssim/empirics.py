"""Tick-by-tick trades to windowed log returns.

Prices are sampled previous-tick on a grid of spacing ``tau`` inside each
trading session; returns never straddle a session boundary or a grid point
without a prior trade.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
from dataclasses import dataclass, field
from zoneinfo import ZoneInfo

import numpy as np

from .errors import ConfigError, DataError
from .synth import ReturnSeries

log = logging.getLogger(__name__)

TICK_HEADER = ["timestamp_ms", "symbol", "price"]
MAX_MALFORMED_FRACTION = 1e-3


@dataclass(frozen=True)
class TradeRecord:
    timestamp: int
    price: float
    symbol: str


@dataclass
class TickData:
    """Per-symbol trades, each as sorted parallel arrays."""

    timestamps: dict[str, np.ndarray]
    prices: dict[str, np.ndarray]
    rows: int = 0
    malformed: int = 0

    @property
    def symbols(self) -> list[str]:
        return sorted(self.timestamps)

    def records(self, symbol: str) -> list[TradeRecord]:
        return [TradeRecord(int(t), float(p), symbol)
                for t, p in zip(self.timestamps[symbol], self.prices[symbol])]


@dataclass(frozen=True)
class SessionSpec:
    """Daily trading session in local exchange time.

    ``close`` may be ``"24:00"``. ``weekdays`` uses Monday = 0.
    """

    exchange: str
    timezone: str
    open: str
    close: str
    holidays: tuple[str, ...] = ()
    weekdays: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        try:
            ZoneInfo(self.timezone)
        except Exception as exc:
            raise ConfigError(f"unknown timezone {self.timezone!r}") from exc
        o, c = _minutes(self.open), _minutes(self.close)
        if not 0 <= o < c <= 24 * 60:
            raise ConfigError(f"session open {self.open} must precede close {self.close}")
        for h in self.holidays:
            dt.date.fromisoformat(h)

    @classmethod
    def from_dict(cls, d: dict) -> "SessionSpec":
        try:
            return cls(
                exchange=str(d["exchange"]),
                timezone=str(d["timezone"]),
                open=str(d["open"]),
                close=str(d["close"]),
                holidays=tuple(d.get("holidays", ())),
                weekdays=tuple(d.get("weekdays", (0, 1, 2, 3, 4))),
            )
        except KeyError as exc:
            raise ConfigError(f"session spec missing field {exc}") from exc

    def windows(self, first_ms: int, last_ms: int) -> list[tuple[int, int]]:
        """Session (open_ms, close_ms) pairs overlapping [first_ms, last_ms]."""
        tz = ZoneInfo(self.timezone)
        day = dt.datetime.fromtimestamp(first_ms / 1000, tz).date()
        end = dt.datetime.fromtimestamp(last_ms / 1000, tz).date()
        holidays = {dt.date.fromisoformat(h) for h in self.holidays}
        o, c = _minutes(self.open), _minutes(self.close)
        out = []
        while day <= end:
            if day.weekday() in self.weekdays and day not in holidays:
                midnight = dt.datetime.combine(day, dt.time(), tz)
                out.append((_epoch_ms(midnight + dt.timedelta(minutes=o)),
                            _epoch_ms(midnight + dt.timedelta(minutes=c))))
            day += dt.timedelta(days=1)
        return out


def _minutes(hhmm: str) -> int:
    try:
        h, m = hhmm.split(":")
        return int(h) * 60 + int(m)
    except ValueError as exc:
        raise ConfigError(f"bad time of day {hhmm!r}") from exc


def _epoch_ms(t: dt.datetime) -> int:
    # normalize through UTC so DST gaps resolve consistently
    return int(round(t.astimezone(dt.timezone.utc).timestamp() * 1000))


def load_session(path) -> SessionSpec:
    with open(path) as f:
        return SessionSpec.from_dict(json.load(f))


def parse_ticks(stream, max_malformed_fraction: float = MAX_MALFORMED_FRACTION) -> TickData:
    """Read ``timestamp_ms,symbol,price`` CSV from a binary or text stream.

    Rows that fail validation (unparsable fields, non-positive or
    non-finite price) are skipped and counted; exceeding the malformed
    budget is an error. Sorting by timestamp is stable.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    try:
        text = io.TextIOWrapper(stream, encoding="utf-8", newline="") if _is_binary(stream) else stream
        reader = csv.reader(text)
        header = next(reader, None)
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"unreadable tick stream: {exc}") from exc
    if header is None or [h.strip() for h in header] != TICK_HEADER:
        raise DataError(f"tick CSV header must be {','.join(TICK_HEADER)}, got {header}")

    ts: dict[str, list[int]] = {}
    px: dict[str, list[float]] = {}
    rows = malformed = 0
    try:
        for row in reader:
            if not row:
                continue
            rows += 1
            try:
                t_raw, sym, p_raw = row
                t = int(t_raw)
                p = float(p_raw)
                sym = sym.strip()
                if not (p > 0 and np.isfinite(p)) or not sym:
                    raise ValueError
            except ValueError:
                malformed += 1
                continue
            ts.setdefault(sym, []).append(t)
            px.setdefault(sym, []).append(p)
    except UnicodeDecodeError as exc:
        raise DataError(f"unreadable tick stream: {exc}") from exc
    finally:
        if text is not stream:
            text.detach()
    if malformed:
        log.warning("skipped %d malformed tick rows of %d", malformed, rows)
    if rows and malformed / rows > max_malformed_fraction:
        raise DataError(f"{malformed} of {rows} tick rows malformed, above budget")

    data = TickData({}, {}, rows=rows, malformed=malformed)
    for sym in ts:
        t = np.asarray(ts[sym], dtype=np.int64)
        order = np.argsort(t, kind="stable")
        data.timestamps[sym] = t[order]
        data.prices[sym] = np.asarray(px[sym])[order]
    return data


def _is_binary(stream) -> bool:
    return isinstance(stream, (io.RawIOBase, io.BufferedIOBase)) or "b" in getattr(stream, "mode", "")


def read_ticks(path, **kw) -> TickData:
    with open(path, "rb") as f:
        return parse_ticks(f, **kw)


@dataclass(frozen=True, eq=False)
class PriceGrid:
    """Previous-tick prices on a ``tau`` grid; NaN marks an absent price.

    ``segments`` labels each grid point with its session; grid points of
    different sessions never pair into a return. ``times`` are epoch ms.
    """

    tau: float
    start: int
    times: np.ndarray
    prices: np.ndarray
    segments: np.ndarray = field(default=None)

    def __len__(self):
        return self.prices.size


def _grid_segment(t_trades, p_trades, lo, hi, tau_ms):
    times = np.arange(lo, hi + 1, tau_ms, dtype=np.int64)
    if t_trades.size == 0:
        return times, np.full(times.size, np.nan)
    i0 = np.searchsorted(t_trades, lo, side="left")
    k = np.searchsorted(t_trades, times, side="right") - 1
    prices = np.where(k >= i0, p_trades[np.maximum(k, 0)], np.nan)
    return times, prices


def build_grid(timestamps, prices, tau: float, session: SessionSpec | None = None) -> PriceGrid:
    """Sample the last trade at or before each grid point.

    Without a session the whole record is one segment starting at the
    first trade. With one, every session opens a fresh segment anchored at
    its open time and only trades inside the session are held.
    """
    t = np.asarray(timestamps, dtype=np.int64)
    p = np.asarray(prices, dtype=float)
    if t.size == 0:
        raise DataError("no trade records")
    if np.any(np.diff(t) < 0):
        raise DataError("trade records must be sorted by timestamp")
    tau_ms = int(round(tau * 1000))
    if tau_ms <= 0:
        raise ConfigError("tau must be at least one millisecond")

    if session is None:
        spans = [(int(t[0]), int(t[-1]))]
    else:
        spans = session.windows(int(t[0]), int(t[-1]))
    all_t, all_p, all_s = [], [], []
    for seg, (lo, hi) in enumerate(spans):
        inside = slice(np.searchsorted(t, lo, "left"), np.searchsorted(t, hi, "right"))
        gt, gp = _grid_segment(t[inside], p[inside], lo, hi, tau_ms)
        all_t.append(gt)
        all_p.append(gp)
        all_s.append(np.full(gt.size, seg, dtype=np.int64))
    if not all_t:
        raise DataError("no trading session overlaps the records")
    times = np.concatenate(all_t)
    return PriceGrid(tau=float(tau), start=int(times[0]) if times.size else 0, times=times,
                     prices=np.concatenate(all_p), segments=np.concatenate(all_s))


def compute_returns(grid: PriceGrid) -> ReturnSeries:
    """Log returns between consecutive present grid points of one segment."""
    p = grid.prices
    ok = (~np.isnan(p[:-1])) & (~np.isnan(p[1:])) & (grid.segments[:-1] == grid.segments[1:])
    if not ok.any():
        raise DataError("grid has no pair of consecutive present prices")
    idx = np.flatnonzero(ok)
    r = np.log(p[idx + 1]) - np.log(p[idx])
    zero = p[idx + 1] == p[idx]
    return ReturnSeries(tau=grid.tau, values=r, start_time=grid.times[idx[0]] / 1000.0,
                        zero_flags=zero)


def exclude_zeros(series: ReturnSeries) -> tuple[ReturnSeries, float]:
    """Drop zero-flagged windows; returns the kept series and the dropped fraction.

    Only for PDF estimation. Spectra must use the full sequence.
    """
    keep = ~series.zero_flags
    if not keep.any():
        raise DataError("every window is zero-flagged; nothing left after exclusion")
    frac = 1.0 - keep.sum() / keep.size
    return series.replace(values=series.values[keep], zero_flags=series.zero_flags[keep]), float(frac)


def symbol_returns(data: TickData, symbol: str, tau: float, session: SessionSpec | None = None) -> ReturnSeries:
    grid = build_grid(data.timestamps[symbol], data.prices[symbol], tau, session)
    return compute_returns(grid)


def ticks_from_returns(returns, tau: float, symbol: str = "SYN", price0: float = 100.0,
                       scale: float = 1e-3, start_ms: int = 0):
    """Synthetic trade tape: one trade per window priced at ``price0 * exp(scale * cumsum(r))``.

    Returns (timestamps_ms, prices, symbol). The first trade carries
    ``price0`` so the tape reproduces every window return.
    """
    r = np.asarray(returns, dtype=float)
    tau_ms = int(round(tau * 1000))
    logp = np.concatenate([[0.0], np.cumsum(scale * r)])
    ts = start_ms + np.arange(logp.size, dtype=np.int64) * tau_ms
    return ts, price0 * np.exp(logp), symbol


def write_ticks_csv(path, tapes) -> None:
    """Write one or more ``(timestamps, prices, symbol)`` tapes as tick CSV."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TICK_HEADER)
        for ts, ps, sym in tapes:
            for t, p in zip(ts, ps):
                w.writerow([int(t), sym, repr(float(p))])
