"""OHLCV ingestion, synthetic series, standardization, splits and windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .delay_sim import CorruptedSeries
from .numerics import make_rng

OHLCV = ("open", "high", "low", "close", "volume")
DEFAULT_SPLIT = (0.70, 0.15, 0.15)
_T0 = 1_700_000_000


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeSeries:
    timestamps: np.ndarray  # int64 seconds, strictly increasing
    values: np.ndarray  # (T, D) float64
    feature_names: tuple[str, ...]

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DataError(f"values must be (T, D), got shape {vals.shape}")
        if ts.shape != (vals.shape[0],):
            raise DataError(f"{ts.shape[0]} timestamps for {vals.shape[0]} rows")
        if len(self.feature_names) != vals.shape[1]:
            raise DataError(f"{len(self.feature_names)} names for {vals.shape[1]} features")
        if ts.size > 1 and not (np.diff(ts) > 0).all():
            bad = int(np.flatnonzero(np.diff(ts) <= 0)[0]) + 1
            raise DataError(f"timestamps not strictly increasing at row {bad}")
        if not np.isfinite(vals).all():
            bad = int(np.flatnonzero(~np.isfinite(vals).all(axis=1))[0])
            raise DataError(f"non-finite value in row {bad}")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]

    def slice(self, lo, hi) -> "TimeSeries":
        return TimeSeries(self.timestamps[lo:hi], self.values[lo:hi], self.feature_names)

    def equals(self, other) -> bool:
        return (
            self.feature_names == other.feature_names
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values)
        )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_csv(path, columns=OHLCV) -> TimeSeries:
    """Read ``timestamp`` plus ``columns`` from a headed CSV (extra columns ignored)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip().lower() for h in header]
        missing = [c for c in ("timestamp", *columns) if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {', '.join(missing)}")
        ti = header.index("timestamp")
        ci = [header.index(c) for c in columns]
        stamps, rows = [], []
        prev = None
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                t = int(rec[ti])
                row = [float(rec[i]) for i in ci]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in row):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if prev is not None and t <= prev:
                kind = "duplicate" if t == prev else "decreasing"
                raise DataError(f"{path}:{lineno}: {kind} timestamp {t}")
            prev = t
            stamps.append(t)
            rows.append(row)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))
    return TimeSeries(np.array(stamps, dtype=np.int64), values, tuple(columns))


def write_csv(series: TimeSeries, path) -> None:
    """Write with shortest round-trip float formatting, so a reload is bit-exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestamp", *series.feature_names))
        for t, row in zip(series.timestamps.tolist(), series.values.tolist()):
            w.writerow([t, *(repr(v) for v in row)])


# ---------------------------------------------------------------------------
# Synthetic series
# ---------------------------------------------------------------------------


def synth_series(kind, length, seed, **params) -> TimeSeries:
    """Deterministic synthetic data.

    ``sine_mixture``: each feature is a sum of three sinusoids with integer
    periods ``periods`` (default 7, 11, 13) plus N(0, noise^2).
    ``gbm_ohlcv``: geometric Brownian motion traced at ``substeps`` points per
    bar; open is the previous close, high/low the bar extremes, and volume is
    log-normal. Log-volume is AR(1) noise (``volume_ar``) plus, when
    ``volume_slow_share`` > 0, a slowly drifting AR(1) level carrying that
    share of the variance.
    """
    if length < 1:
        raise DataError("length must be >= 1")
    rng = make_rng(seed, "synth", kind)
    stamps = _T0 + np.arange(length, dtype=np.int64)
    if kind == "sine_mixture":
        return _sine_mixture(length, rng, stamps, **params)
    if kind == "gbm_ohlcv":
        return _gbm_ohlcv(length, rng, stamps, **params)
    raise DataError(f"unknown synthetic kind {kind!r}")


def _sine_mixture(length, rng, stamps, n_features=5, periods=(7, 11, 13), noise=0.1):
    t = np.arange(length, dtype=np.float64)
    values = np.empty((length, n_features))
    for f in range(n_features):
        amps = rng.uniform(0.5, 1.5, size=len(periods))
        phases = rng.uniform(0.0, 2 * np.pi, size=len(periods))
        col = np.zeros(length)
        for a, per, ph in zip(amps, periods, phases):
            # integer periods: reduce the phase argument exactly before sin
            col += a * np.sin(2 * np.pi * (np.mod(t, per) / per) + ph)
        values[:, f] = col
    if noise:
        values += rng.normal(0.0, noise, size=values.shape)
    return TimeSeries(stamps, values, tuple(f"s{i}" for i in range(n_features)))


def _gbm_ohlcv(
    length,
    rng,
    stamps,
    s0=100.0,
    drift=0.0,
    volatility=1e-3,
    substeps=8,
    volume_mean=10.0,
    volume_sigma=0.5,
    volume_ar=0.5,
    volume_slow_ar=0.999,
    volume_slow_share=0.0,
):
    dt = 1.0 / substeps
    incr = rng.normal(
        (drift - 0.5 * volatility**2) * dt, volatility * np.sqrt(dt), size=(length, substeps)
    )
    logp = np.log(s0) + np.cumsum(incr.reshape(-1)).reshape(length, substeps)
    path = np.exp(logp)
    close = path[:, -1]
    open_ = np.concatenate(([s0], close[:-1]))
    high = np.maximum(open_, path.max(axis=1))
    low = np.minimum(open_, path.min(axis=1))
    # log volume: slowly drifting level plus fast AR(1) noise, split by variance share
    eps = rng.normal(size=(length, 2))
    logv = (_ar1(eps[:, 0], volume_ar, volume_sigma * np.sqrt(1.0 - volume_slow_share))
            + _ar1(eps[:, 1], volume_slow_ar, volume_sigma * np.sqrt(volume_slow_share)))
    volume = np.exp(np.log(volume_mean) + logv)
    values = np.column_stack([open_, high, low, close, volume])
    return TimeSeries(stamps, values, OHLCV)


def _ar1(eps, phi, sigma):
    """Stationary AR(1) with marginal std ``sigma`` driven by standard normal ``eps``."""
    if not 0.0 <= phi < 1.0:
        raise ValueError(f"AR coefficient must be in [0, 1), got {phi}")
    drive = sigma * np.sqrt(1.0 - phi * phi) * eps
    drive[0] = sigma * eps[0]
    return lfilter([1.0], [1.0, -phi], drive)


# ---------------------------------------------------------------------------
# Splits and standardization
# ---------------------------------------------------------------------------


def split_bounds(n, fractions=DEFAULT_SPLIT):
    """Cut points floor(n * cumulative fraction)."""
    fr = [float(f) for f in fractions]
    if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    cum = np.cumsum(fr)
    cuts = [0] + [int(math.floor(n * c + 1e-9)) for c in cum[:-1]] + [n]
    return list(zip(cuts[:-1], cuts[1:]))


def chronological_split(series, fractions=DEFAULT_SPLIT, min_length=1):
    """Contiguous, ordered, disjoint pieces of a ``TimeSeries`` or ``CorruptedSeries``.

    ``min_length`` is the shortest acceptable piece (window + horizon for a
    usable split).
    """
    n = series.source_len if isinstance(series, CorruptedSeries) else len(series)
    bounds = split_bounds(n, fractions)
    for (lo, hi), name in zip(bounds, ("train", "val", "test", "extra")):
        if hi - lo < min_length:
            raise DataError(
                f"{name} split has {hi - lo} rows; need at least {min_length} for one window"
            )
    if isinstance(series, CorruptedSeries):
        return tuple(_slice_corrupted(series, lo, hi) for lo, hi in bounds)
    return tuple(series.slice(lo, hi) for lo, hi in bounds)


def _slice_corrupted(c: CorruptedSeries, lo, hi) -> CorruptedSeries:
    # the slice keeps held values; its mask may start with 0, so it is not re-validated
    return CorruptedSeries(c.observed.slice(lo, hi), _MaskSlice(c.mask, lo, hi), hi - lo)


@dataclass(frozen=True)
class _MaskSlice:
    parent: object
    lo: int
    hi: int

    @property
    def states(self):
        return self.parent.states[self.lo : self.hi]

    def digest(self):
        return self.parent.digest()


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        return (values - self.mean) / self.std

    def invert(self, values):
        return values * self.std + self.mean

    def apply_series(self, series):
        if isinstance(series, CorruptedSeries):
            return replace(series, observed=self.apply_series(series.observed))
        return replace(series, values=self.apply(series.values))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def fit_standardizer(train: TimeSeries) -> Standardizer:
    """Per-feature z-score fitted on the (clean) training split."""
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    flat = np.flatnonzero(~(std > 0))
    if flat.size:
        names = ", ".join(train.feature_names[i] for i in flat)
        raise DataError(f"zero-variance feature(s) in training split: {names}")
    return Standardizer(mean, std)


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray  # (window, d_in) from the corrupted series
    target: np.ndarray  # (horizon, d_out) from the clean series
    origin_index: int  # position of the last input row

    @property
    def input_range(self):
        return (self.origin_index - self.input.shape[0] + 1, self.origin_index)

    @property
    def target_range(self):
        return (self.origin_index + 1, self.origin_index + self.target.shape[0])


class WindowSet:
    """Windows over one split, gathered lazily from the underlying arrays."""

    def __init__(self, observed, clean, origins, window, horizon, d_out):
        self.window = window
        self.horizon = horizon
        self.origins = np.asarray(origins, dtype=np.int64)
        self._inputs = sliding_window_view(observed, window, axis=0)  # (T-L+1, D, L)
        self._targets = sliding_window_view(clean[:, :d_out], horizon, axis=0)

    def __len__(self):
        return self.origins.size

    def __getitem__(self, i) -> WindowSample:
        t = int(self.origins[i])
        x = self._inputs[t - self.window + 1].T
        y = self._targets[t + 1].T
        return WindowSample(np.array(x), np.array(y), t)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def batch(self, idx=None):
        """Stacked (inputs, targets) for the given positions (all by default)."""
        o = self.origins if idx is None else self.origins[idx]
        x = np.ascontiguousarray(self._inputs[o - self.window + 1].transpose(0, 2, 1))
        y = np.ascontiguousarray(self._targets[o + 1].transpose(0, 2, 1))
        return x, y


def window_origins(n, window, horizon, mode):
    """Origins t (0-based last input row). Train: stride 1. Eval: stride window+horizon."""
    if n < window + horizon:
        raise DataError(f"series of length {n} is shorter than window+horizon={window + horizon}")
    if mode == "train":
        stride = 1
    elif mode == "eval":
        stride = window + horizon
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return np.arange(window - 1, n - horizon, stride, dtype=np.int64)


def make_windows(corrupted, clean: TimeSeries, cfg, mode="train") -> WindowSet:
    observed = corrupted.observed if isinstance(corrupted, CorruptedSeries) else corrupted
    if len(observed) != len(clean):
        raise DataError(f"corrupted length {len(observed)} != clean length {len(clean)}")
    if observed.n_features != cfg.d_in:
        raise DataError(f"series has {observed.n_features} features, config d_in={cfg.d_in}")
    if clean.n_features < cfg.d_out:
        raise DataError(f"clean series has {clean.n_features} features < d_out={cfg.d_out}")
    origins = window_origins(len(clean), cfg.window, cfg.horizon, mode)
    return WindowSet(observed.values, clean.values, origins, cfg.window, cfg.horizon, cfg.d_out)


# ---------------------------------------------------------------------------
# End-to-end preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    standardizer: Standardizer
    train: WindowSet
    val: WindowSet
    test: WindowSet


def prepare(clean: TimeSeries, corrupted: CorruptedSeries, cfg, fractions=DEFAULT_SPLIT):
    """Split, fit the standardizer on clean train rows, standardize both, window each split.

    Train windows are dense; val and test use the non-overlapping eval stride.
    """
    need = cfg.window + cfg.horizon
    clean_parts = chronological_split(clean, fractions, min_length=need)
    obs_parts = chronological_split(corrupted, fractions, min_length=need)
    std = fit_standardizer(clean_parts[0])
    sets = []
    for (c, o), mode in zip(zip(clean_parts, obs_parts), ("train", "eval", "eval")):
        sets.append(make_windows(std.apply_series(o), std.apply_series(c), cfg, mode))
    return PreparedData(std, *sets)
