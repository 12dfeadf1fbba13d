"""The residual bottleneck mixing network.

Data flow for one batch of windows ``x`` with shape (B, window, d_in)::

    H0 = gelu(x @ W_in + b_in)                              (B*window, width)
    for each block i:
        T  = transpose(dropout(gelu(transpose(LN(H)) @ W_t + b_t)))
        Ht = H + T
        C  = dropout(gelu(LN(Ht) @ W_exp + b_exp)) @ W_comp + b_comp
        H  = Ht + C + skip_scale * sum_{j<=i} (H_j @ G_j + c_j)
    y = H[last time step] @ W_head + b_head  ->  (B, horizon, d_out)

``width`` is ``d_bottleneck`` for the full model and ``d_model`` for the
``no_compression`` ablation. ``no_residual`` drops both residual adds and
the skip sum (and with it the skip projections).
"""

from __future__ import annotations

import functools
import hashlib
import json
import struct
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .numerics import (
    DimensionError,
    dropout_backward,
    dropout_forward,
    gelu_backward,
    gelu_forward,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    make_rng,
)

ABLATIONS = ("full", "no_compression", "no_residual")


class ConfigError(ValueError):
    """An invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ModelConfig:
    window: int = 20
    horizon: int = 1
    d_in: int = 5
    d_out: int = 5
    d_bottleneck: int = 32
    d_model: int = 64
    n_blocks: int = 2
    skip_scale: float = 0.1
    dropout: float = 0.1
    activation: str = "gelu"
    ablation: str = "full"

    def __post_init__(self):
        for name in ("window", "horizon", "d_in", "d_out", "d_bottleneck", "d_model", "n_blocks"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.d_bottleneck > self.d_model:
            raise ConfigError(
                "d_bottleneck",
                f"bottleneck width {self.d_bottleneck} exceeds d_model {self.d_model}",
            )
        if not self.skip_scale >= 0:
            raise ConfigError("skip_scale", f"must be >= 0, got {self.skip_scale!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", f"must be in [0, 1), got {self.dropout!r}")
        if self.activation != "gelu":
            raise ConfigError("activation", f"only 'gelu' is supported, got {self.activation!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError("ablation", f"must be one of {ABLATIONS}, got {self.ablation!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown model config field")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    @property
    def width(self) -> int:
        """Hidden width carried between blocks."""
        return self.d_model if self.ablation == "no_compression" else self.d_bottleneck

    @property
    def residual(self) -> bool:
        return self.ablation != "no_residual"

    @functools.cached_property
    def _digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def digest(self) -> str:
        return self._digest


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParameterSet:
    """Every learnable array as a named view into one flat float64 vector."""

    def __init__(self, layout: Sequence[tuple[str, tuple[int, ...]]], flat=None):
        self.layout = tuple((name, tuple(int(s) for s in shape)) for name, shape in layout)
        self._slices = {}
        offset = 0
        for name, shape in self.layout:
            if name in self._slices:
                raise ValueError(f"duplicate parameter name {name!r}")
            n = int(np.prod(shape, dtype=np.int64))
            self._slices[name] = (offset, offset + n, shape)
            offset += n
        if flat is None:
            flat = np.zeros(offset)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (offset,):
            raise DimensionError(f"flat vector has shape {flat.shape}, layout needs ({offset},)")
        self.flat = flat

    def __getitem__(self, name) -> np.ndarray:
        lo, hi, shape = self._slices[name]
        return self.flat[lo:hi].reshape(shape)

    def __contains__(self, name):
        return name in self._slices

    def __iter__(self):
        return iter(self._slices)

    def names(self):
        return list(self._slices)

    @property
    def size(self) -> int:
        return self.flat.size

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet(self.layout)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.layout, self.flat.copy())

    def digest(self) -> str:
        h = hashlib.sha256(repr(self.layout).encode())
        h.update(self.flat.astype("<f8").tobytes())
        return h.hexdigest()


def parameter_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    w, L = cfg.width, cfg.window
    out = [("input.w", (cfg.d_in, w)), ("input.b", (w,))]
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        out += [
            (p + "time_norm.gamma", (w,)),
            (p + "time_norm.beta", (w,)),
            (p + "time_mix.w", (L, L)),
            (p + "time_mix.b", (L,)),
            (p + "feat_norm.gamma", (w,)),
            (p + "feat_norm.beta", (w,)),
            (p + "expand.w", (w, cfg.d_model)),
            (p + "expand.b", (cfg.d_model,)),
            (p + "compress.w", (cfg.d_model, w)),
            (p + "compress.b", (w,)),
        ]
    if cfg.residual:
        for j in range(cfg.n_blocks):
            out += [(f"skip.{j}.w", (w, w)), (f"skip.{j}.b", (w,))]
    out += [("head.w", (w, cfg.horizon * cfg.d_out)), ("head.b", (cfg.horizon * cfg.d_out,))]
    return out


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter total; independent of ``parameter_layout``."""
    w, L, dm = cfg.width, cfg.window, cfg.d_model
    per_block = 2 * 2 * w + (L * L + L) + (w * dm + dm) + (dm * w + w)
    skips = cfg.n_blocks * (w * w + w) if cfg.residual else 0
    head_out = cfg.horizon * cfg.d_out
    return (cfg.d_in * w + w) + cfg.n_blocks * per_block + skips + (w * head_out + head_out)


def init_parameters(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and betas 0; gammas 1."""
    params = ParameterSet(parameter_layout(cfg))
    rng = make_rng(seed, "init")
    for name, shape in params.layout:
        view = params[name]
        if name.endswith(".gamma"):
            view[...] = 1.0
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            view[...] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class _BlockCache:
    ln_time: object
    lin_time: object
    gelu_time: object
    drop_time: object
    ln_feat: object
    lin_expand: object
    gelu_expand: object
    drop_expand: object
    lin_compress: object


@dataclass
class ForwardTrace:
    """Saved state of one forward call; consumed by a single ``backward``."""

    config_digest: str
    batch: int
    single: bool
    lin_input: object = None
    gelu_input: object = None
    blocks: list = field(default_factory=list)
    skips: list = field(default_factory=list)
    hidden: list = field(default_factory=list)  # H^(0..n_blocks), each (B*window, width)
    lin_head: object = None
    consumed: bool = False


def _check_window(cfg, x):
    if x.ndim != 3 or x.shape[1:] != (cfg.window, cfg.d_in):
        raise DimensionError(
            f"expected window shape ({cfg.window}, {cfg.d_in}) (optionally batched), "
            f"got {x.shape}"
        )
    if not np.isfinite(x).all():
        raise ValueError("window contains non-finite values")


def _block_forward(cfg, params, i, h, batch, rng, training):
    L, w = cfg.window, cfg.width
    p = f"blocks.{i}."
    n1, ln_time = layernorm_forward(h, params[p + "time_norm.gamma"], params[p + "time_norm.beta"])
    n1t = n1.reshape(batch, L, w).transpose(0, 2, 1).reshape(batch * w, L)
    zt, lin_time = linear_forward(n1t, params[p + "time_mix.w"], params[p + "time_mix.b"])
    at, gelu_time = gelu_forward(zt)
    dt, drop_time = dropout_forward(at, cfg.dropout, rng, training)
    temp = dt.reshape(batch, w, L).transpose(0, 2, 1).reshape(batch * L, w)
    h_time = h + temp if cfg.residual else temp

    n2, ln_feat = layernorm_forward(
        h_time, params[p + "feat_norm.gamma"], params[p + "feat_norm.beta"]
    )
    ze, lin_expand = linear_forward(n2, params[p + "expand.w"], params[p + "expand.b"])
    ae, gelu_expand = gelu_forward(ze)
    de, drop_expand = dropout_forward(ae, cfg.dropout, rng, training)
    hc, lin_compress = linear_forward(de, params[p + "compress.w"], params[p + "compress.b"])
    out = h_time + hc if cfg.residual else hc
    cache = _BlockCache(
        ln_time, lin_time, gelu_time, drop_time,
        ln_feat, lin_expand, gelu_expand, drop_expand, lin_compress,
    )
    return out, cache


def forward(cfg: ModelConfig, params: ParameterSet, window, rng=None, training=False):
    """Predict (horizon, d_out) from a (window, d_in) input, or a batch of them.

    ``rng`` is only drawn from when ``training`` and ``cfg.dropout > 0``.
    """
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    _check_window(cfg, x)
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    B, L, w = x.shape[0], cfg.window, cfg.width
    trace = ForwardTrace(cfg.digest(), B, single)

    z, trace.lin_input = linear_forward(
        x.reshape(B * L, cfg.d_in), params["input.w"], params["input.b"]
    )
    h, trace.gelu_input = gelu_forward(z)
    trace.hidden.append(h)
    skip_sum = None
    for i in range(cfg.n_blocks):
        h_next, cache = _block_forward(cfg, params, i, h, B, rng, training)
        trace.blocks.append(cache)
        if cfg.residual:
            proj, lin_skip = linear_forward(
                trace.hidden[i], params[f"skip.{i}.w"], params[f"skip.{i}.b"]
            )
            trace.skips.append(lin_skip)
            skip_sum = proj if skip_sum is None else skip_sum + proj
            h_next = h_next + cfg.skip_scale * skip_sum
        h = h_next
        trace.hidden.append(h)

    last = np.ascontiguousarray(h.reshape(B, L, w)[:, -1, :])
    y, trace.lin_head = linear_forward(last, params["head.w"], params["head.b"])
    pred = y.reshape(B, cfg.horizon, cfg.d_out)
    return (pred[0] if single else pred), trace


def _block_backward(cfg, grads, i, g_out, cache: _BlockCache, batch):
    """Backprop one block; returns the gradient w.r.t. the block input."""
    L, w = cfg.window, cfg.width
    p = f"blocks.{i}."
    g_de, gw, gb = linear_backward(g_out, cache.lin_compress)
    grads[p + "compress.w"][...] = gw
    grads[p + "compress.b"][...] = gb
    g_ze = gelu_backward(dropout_backward(g_de, cache.drop_expand), cache.gelu_expand)
    g_n2, gw, gb = linear_backward(g_ze, cache.lin_expand)
    grads[p + "expand.w"][...] = gw
    grads[p + "expand.b"][...] = gb
    g_ln, gg, gbeta = layernorm_backward(g_n2, cache.ln_feat)
    grads[p + "feat_norm.gamma"][...] = gg
    grads[p + "feat_norm.beta"][...] = gbeta
    g_time = g_out + g_ln if cfg.residual else g_ln

    g_dt = g_time.reshape(batch, L, w).transpose(0, 2, 1).reshape(batch * w, L)
    g_zt = gelu_backward(dropout_backward(g_dt, cache.drop_time), cache.gelu_time)
    g_n1t, gw, gb = linear_backward(g_zt, cache.lin_time)
    grads[p + "time_mix.w"][...] = gw
    grads[p + "time_mix.b"][...] = gb
    g_n1 = g_n1t.reshape(batch, w, L).transpose(0, 2, 1).reshape(batch * L, w)
    g_ln, gg, gbeta = layernorm_backward(g_n1, cache.ln_time)
    grads[p + "time_norm.gamma"][...] = gg
    grads[p + "time_norm.beta"][...] = gbeta
    return g_time + g_ln if cfg.residual else g_ln


def backward(cfg: ModelConfig, params: ParameterSet, trace: ForwardTrace, grad_prediction):
    """Exact gradients of a scalar loss given d(loss)/d(prediction).

    The trace is single-use. Each H^(j) fans out into the next block and into
    every later skip sum, so its gradient collects from all of them.
    """
    if trace.consumed:
        raise RuntimeError("forward trace already consumed by a previous backward")
    if trace.config_digest != cfg.digest():
        raise ValueError("trace was produced under a different model config")
    g = np.asarray(grad_prediction, dtype=np.float64)
    expected = (cfg.horizon, cfg.d_out) if trace.single else (trace.batch, cfg.horizon, cfg.d_out)
    if g.shape != expected:
        raise DimensionError(f"grad_prediction shape {g.shape}, expected {expected}")
    trace.consumed = True
    B, L, w = trace.batch, cfg.window, cfg.width
    grads = params.zeros_like()

    g_last, gw, gb = linear_backward(g.reshape(B, -1), trace.lin_head)
    grads["head.w"][...] = gw
    grads["head.b"][...] = gb
    g_h = np.zeros((B, L, w))
    g_h[:, -1, :] = g_last
    g_h = g_h.reshape(B * L, w)

    # running sum of total gradients of H^(m) for m above the current block
    g_later = None
    for i in reversed(range(cfg.n_blocks)):
        g_in = _block_backward(cfg, grads, i, g_h, trace.blocks[i], B)
        if cfg.residual:
            g_later = g_h if g_later is None else g_later + g_h
            g_proj = cfg.skip_scale * g_later
            g_src, gw, gb = linear_backward(g_proj, trace.skips[i])
            grads[f"skip.{i}.w"][...] = gw
            grads[f"skip.{i}.b"][...] = gb
            g_in = g_in + g_src
        g_h = g_in

    g_z = gelu_backward(g_h, trace.gelu_input)
    _, gw, gb = linear_backward(g_z, trace.lin_input)
    grads["input.w"][...] = gw
    grads["input.b"][...] = gb
    return grads


def final_hidden(trace: ForwardTrace, cfg: ModelConfig):
    """H^(n_blocks) reshaped to (B, window, width)."""
    return trace.hidden[-1].reshape(trace.batch, cfg.window, cfg.width)


# ---------------------------------------------------------------------------
# Parameter files
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic      8 bytes   b"RLMXPARM"
#   version    u32       1
#   cfg hash   32 bytes  sha256 of the canonical config JSON
#   n_slices   u32
#   per slice: u16 name length, utf-8 name, u8 ndim, ndim x u32 dims
#   payload    float64 little-endian, slices concatenated in header order

PARAM_MAGIC = b"RLMXPARM"
PARAM_VERSION = 1


class ParameterFileError(ValueError):
    pass


class ConfigMismatchError(ParameterFileError):
    pass


def encode_parameters(params: ParameterSet, cfg_digest: str) -> bytes:
    parts = [PARAM_MAGIC, struct.pack("<I", PARAM_VERSION), bytes.fromhex(cfg_digest)]
    parts.append(struct.pack("<I", len(params.layout)))
    for name, shape in params.layout:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
    parts.append(params.flat.astype("<f8").tobytes())
    return b"".join(parts)


def save_parameters(params: ParameterSet, path, cfg: ModelConfig) -> None:
    Path(path).write_bytes(encode_parameters(params, cfg.digest()))


def decode_parameters(blob: bytes, cfg: ModelConfig | None = None) -> ParameterSet:
    try:
        if blob[:8] != PARAM_MAGIC:
            raise ParameterFileError("bad magic bytes; not a parameter file")
        (version,) = struct.unpack_from("<I", blob, 8)
        if version != PARAM_VERSION:
            raise ParameterFileError(f"unsupported parameter file version {version}")
        digest = blob[12:44].hex()
        (n,) = struct.unpack_from("<I", blob, 44)
        pos = 48
        layout = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2 : pos + 2 + ln].decode()
            pos += 2 + ln
            (nd,) = struct.unpack_from("<B", blob, pos)
            shape = struct.unpack_from(f"<{nd}I", blob, pos + 1)
            pos += 1 + 4 * nd
            layout.append((name, tuple(shape)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ParameterFileError(f"corrupt parameter header: {exc}") from None
    if cfg is not None:
        if digest != cfg.digest():
            raise ConfigMismatchError(
                "parameter file was saved under a different model config "
                f"(file {digest[:12]}, expected {cfg.digest()[:12]})"
            )
        if layout != [(nm, tuple(s)) for nm, s in parameter_layout(cfg)]:
            raise ConfigMismatchError("parameter layout does not match the config")
    total = sum(int(np.prod(s, dtype=np.int64)) for _, s in layout)
    payload = blob[pos:]
    if len(payload) != 8 * total:
        raise ParameterFileError(f"payload has {len(payload)} bytes, expected {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ParameterSet(layout, flat)


def load_parameters(path, cfg: ModelConfig) -> ParameterSet:
    return decode_parameters(Path(path).read_bytes(), cfg)
