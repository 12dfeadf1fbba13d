"""Zero-order-hold staleness: stagnation masks and the row-hold corruption.

A mask entry of 1 is a fresh observation, 0 a stagnation event where the
observed row repeats the previous observed row. The first entry is always 1.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._backend import kernels
from .numerics import make_rng

MASK_MAGIC = b"RLMXMASK"
MASK_VERSION = 1
_MASK_HEADER = struct.Struct("<8sIQdQ")  # magic, version, length, ratio, seed


@dataclass(frozen=True, eq=False)
class StagnationMask:
    states: np.ndarray  # uint8, 0/1
    target_ratio: float
    seed: int

    def __post_init__(self):
        s = self.states
        if s.ndim != 1 or s.size == 0:
            raise ValueError("mask must be a non-empty 1-D sequence")
        if not np.isin(s, (0, 1)).all():
            raise ValueError("mask states must be 0 or 1")
        if s[0] != 1:
            raise ValueError("mask must start with an update (s_1 = 1)")

    def __len__(self):
        return self.states.size

    def __eq__(self, other):
        if not isinstance(other, StagnationMask):
            return NotImplemented
        return (
            self.target_ratio == other.target_ratio
            and self.seed == other.seed
            and np.array_equal(self.states, other.states)
        )

    def digest(self) -> str:
        """SHA-256 over the packed states; used to prove masks are shared."""
        h = hashlib.sha256()
        h.update(struct.pack("<Q", self.states.size))
        h.update(np.packbits(self.states).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class CorruptedSeries:
    observed: "TimeSeries"  # noqa: F821
    mask: StagnationMask
    source_len: int


def _check_ratio(delay_ratio):
    if not 0.0 <= delay_ratio < 1.0:
        raise ValueError(f"delay_ratio must be in [0, 1), got {delay_ratio}")


def generate_mask(length, delay_ratio, seed, mode="iid", mean_run=None):
    """Draw a stagnation mask.

    ``mode="iid"`` makes each step after the first a stagnation event with
    probability ``delay_ratio``. ``mode="markov"`` draws bursty stagnation
    from a two-state chain whose stationary stagnation probability is
    ``delay_ratio`` and whose zero-runs have mean length ``mean_run``.
    """
    _check_ratio(delay_ratio)
    if length < 1:
        raise ValueError("mask length must be >= 1")
    rng = make_rng(seed, "stagnation-mask", mode)
    if mode == "iid":
        u = rng.random(length)
        states = (u >= delay_ratio).astype(np.uint8)
    elif mode == "markov":
        states = _markov_states(length, delay_ratio, mean_run, rng)
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    states[0] = 1
    return StagnationMask(states, float(delay_ratio), int(seed))


def _markov_states(length, ratio, mean_run, rng):
    if mean_run is None:
        mean_run = 1.0 / (1.0 - ratio)
    if mean_run < 1.0:
        raise ValueError("mean_run must be >= 1")
    states = np.ones(length, dtype=np.uint8)
    if ratio == 0.0:
        return states
    p_leave_zero = 1.0 / mean_run
    # stationary P(0) = p_enter / (p_enter + p_leave) = ratio
    p_enter_zero = min(1.0, ratio * p_leave_zero / (1.0 - ratio))
    u = rng.random(length)
    cur = 1
    for t in range(1, length):
        if cur == 1:
            cur = 0 if u[t] < p_enter_zero else 1
        else:
            cur = 1 if u[t] < p_leave_zero else 0
        states[t] = cur
    return states


def hold_rows(values: np.ndarray, mask: StagnationMask | np.ndarray) -> np.ndarray:
    """Apply the hold to a raw (T, D) array; every column freezes together."""
    states = mask.states if isinstance(mask, StagnationMask) else np.asarray(mask, np.uint8)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
        return kernels.zoh_hold(values, _states_u8(states, values.shape[0]))[:, 0]
    return kernels.zoh_hold(values, _states_u8(states, values.shape[0]))


def _states_u8(states, n):
    if states.shape[0] != n:
        raise ValueError(f"mask length {states.shape[0]} != series length {n}")
    if n and states[0] != 1:
        raise ValueError("mask must start with 1; the first observation has nothing to hold")
    return np.ascontiguousarray(states, dtype=np.uint8)


def apply_zoh(clean, mask: StagnationMask) -> CorruptedSeries:
    """Corrupt a clean ``TimeSeries``; timestamps and feature names are kept."""
    observed = hold_rows(clean.values, mask)
    return CorruptedSeries(replace(clean, values=observed), mask, len(clean.values))


@dataclass(frozen=True)
class StalenessStats:
    fraction: float
    run_histogram: dict[int, int]
    max_run: int
    mean_run: float

    def to_dict(self):
        return {
            "fraction": self.fraction,
            "run_histogram": {str(k): v for k, v in sorted(self.run_histogram.items())},
            "max_run": self.max_run,
            "mean_run": self.mean_run,
        }


def staleness_stats(c: CorruptedSeries | StagnationMask) -> StalenessStats:
    mask = c.mask if isinstance(c, CorruptedSeries) else c
    states = np.ascontiguousarray(mask.states, dtype=np.uint8)
    runs = kernels.zero_runs(states)
    lengths, counts = np.unique(runs, return_counts=True)
    return StalenessStats(
        fraction=float((states == 0).sum() / states.size),
        run_histogram={int(k): int(v) for k, v in zip(lengths, counts)},
        max_run=int(runs.max()) if runs.size else 0,
        mean_run=float(runs.mean()) if runs.size else 0.0,
    )


# ---------------------------------------------------------------------------
# Mask files
# ---------------------------------------------------------------------------


def save_mask(mask: StagnationMask, path) -> None:
    """Write a mask. ``.csv`` gives ``t,s_t`` rows (t from 1); anything else the packed binary form."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            fh.write(f"# target_ratio={mask.target_ratio!r} seed={mask.seed}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "s_t"])
            for t, s in enumerate(mask.states, start=1):
                w.writerow([t, int(s)])
        return
    header = _MASK_HEADER.pack(
        MASK_MAGIC, MASK_VERSION, mask.states.size, mask.target_ratio, mask.seed
    )
    path.write_bytes(header + np.packbits(mask.states).tobytes())


def load_mask(path) -> StagnationMask:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        ratio, seed = 0.0, 0
        states = []
        with open(path, newline="") as fh:
            first = fh.readline()
            header_line = 1
            if first.startswith("#"):
                header_line = 2
                for tok in first[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "target_ratio":
                        ratio = float(val)
                    elif key == "seed":
                        seed = int(val)
            else:
                fh.seek(0)
            reader = csv.reader(fh)
            head = next(reader, None)
            if head != ["t", "s_t"]:
                raise ValueError(f"{path}: expected header 't,s_t', got {head}")
            for lineno, row in enumerate(reader, start=header_line + 1):
                if len(row) != 2 or row[0] != str(len(states) + 1) or row[1] not in ("0", "1"):
                    raise ValueError(f"{path}:{lineno}: bad mask row {row}")
                states.append(int(row[1]))
        return StagnationMask(np.array(states, dtype=np.uint8), ratio, seed)
    blob = path.read_bytes()
    if len(blob) < _MASK_HEADER.size:
        raise ValueError(f"{path}: truncated mask file")
    magic, version, n, ratio, seed = _MASK_HEADER.unpack_from(blob)
    if magic != MASK_MAGIC or version != MASK_VERSION:
        raise ValueError(f"{path}: not a mask file (magic {magic!r}, version {version})")
    packed = np.frombuffer(blob, dtype=np.uint8, offset=_MASK_HEADER.size)
    if packed.size != (n + 7) // 8:
        raise ValueError(f"{path}: expected {(n + 7) // 8} payload bytes, found {packed.size}")
    return StagnationMask(np.unpackbits(packed, count=n), ratio, seed)
