"""Corrupted-to-clean training, evaluation metrics, baselines and the experiment grid."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import model as M
from .data import DEFAULT_SPLIT, TimeSeries, load_csv, prepare, synth_series
from .delay_sim import apply_zoh, generate_mask
from .numerics import AdamState, DimensionError, adam_step, linear_backward, linear_forward, make_rng

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, batch_index, loss):
        super().__init__(
            f"non-finite training loss {loss!r} at epoch {epoch}, batch {batch_index}"
        )
        self.epoch = epoch
        self.batch_index = batch_index


# ---------------------------------------------------------------------------
# Loss and metrics
# ---------------------------------------------------------------------------


def mse_loss(pred, target):
    """Mean squared error over every element and its gradient w.r.t. ``pred``.

    For a batch this equals the mean of per-sample losses, each averaged over
    its horizon * d_out entries.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def metrics(preds, targets):
    """Pooled MSE, MAE and R^2 (against the pooled target mean), plus per-feature values.

    R^2 is ``None`` when the targets have zero spread.
    """
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"predictions {p.shape} vs targets {t.shape}")
    if p.size == 0:
        raise ValueError("no predictions to score")
    out = _scores(p.reshape(-1), t.reshape(-1))
    per = []
    n_feat = t.shape[-1] if t.ndim >= 2 else 1
    for f in range(n_feat):
        per.append(_scores(p[..., f].reshape(-1), t[..., f].reshape(-1)))
    out["per_feature"] = per
    return out


def _scores(p, t):
    err = p - t
    ss_res = float(np.sum(err * err))
    dev = t - t.mean()
    ss_tot = float(np.sum(dev * dev))
    r2 = None if ss_tot == 0.0 or t.size < 2 else 1.0 - ss_res / ss_tot
    return {"mse": ss_res / t.size, "mae": float(np.mean(np.abs(err))), "r2": r2}


# ---------------------------------------------------------------------------
# Models behind one interface
# ---------------------------------------------------------------------------


class ReLaMixModel:
    kind = "relamix"
    trainable = True

    def __init__(self, cfg: M.ModelConfig):
        self.cfg = cfg

    @property
    def name(self):
        return self.kind

    @property
    def ablation(self):
        return self.cfg.ablation

    def init(self, seed):
        return M.init_parameters(self.cfg, seed)

    def n_params(self):
        return M.count_parameters(self.cfg)

    def forward(self, params, x, rng=None, training=False):
        return M.forward(self.cfg, params, x, rng, training)

    def backward(self, params, trace, grad):
        return M.backward(self.cfg, params, trace, grad)

    def config_dict(self):
        return self.cfg.to_dict()


class LinearBaseline:
    """One linear map from the flattened window to the flattened horizon."""

    kind = "linear"
    ablation = "none"
    trainable = True

    def __init__(self, cfg: M.ModelConfig):
        self.cfg = cfg
        self.n_in = cfg.window * cfg.d_in
        self.n_out = cfg.horizon * cfg.d_out

    name = property(lambda self: self.kind)

    def layout(self):
        return [("linear.w", (self.n_in, self.n_out)), ("linear.b", (self.n_out,))]

    def init(self, seed):
        params = M.ParameterSet(self.layout())
        bound = 1.0 / np.sqrt(self.n_in)
        params["linear.w"][...] = make_rng(seed, "init").uniform(
            -bound, bound, size=(self.n_in, self.n_out)
        )
        return params

    def n_params(self):
        return self.n_in * self.n_out + self.n_out

    def forward(self, params, x, rng=None, training=False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        xb = x.reshape(1 if single else x.shape[0], self.n_in)
        y, cache = linear_forward(xb, params["linear.w"], params["linear.b"])
        pred = y.reshape(-1, self.cfg.horizon, self.cfg.d_out)
        return (pred[0] if single else pred), cache

    def backward(self, params, cache, grad):
        grads = params.zeros_like()
        _, gw, gb = linear_backward(np.asarray(grad).reshape(-1, self.n_out), cache)
        grads["linear.w"][...] = gw
        grads["linear.b"][...] = gb
        return grads

    def config_dict(self):
        return {"window": self.cfg.window, "horizon": self.cfg.horizon,
                "d_in": self.cfg.d_in, "d_out": self.cfg.d_out}


class PersistenceBaseline:
    """Repeats the last observed input row (first d_out features) for every future step."""

    kind = "persistence"
    ablation = "none"
    trainable = False

    def __init__(self, cfg: M.ModelConfig):
        self.cfg = cfg

    name = property(lambda self: self.kind)

    def init(self, seed):
        return M.ParameterSet([])

    def n_params(self):
        return 0

    def forward(self, params, x, rng=None, training=False):
        x = np.asarray(x, dtype=np.float64)
        last = x[..., -1:, : self.cfg.d_out]
        return np.repeat(last, self.cfg.horizon, axis=-2), None

    def config_dict(self):
        return {"horizon": self.cfg.horizon, "d_out": self.cfg.d_out}


MODEL_KEYS = ("relamix", "no_compression", "no_residual", "persistence", "linear")
MODEL_GROUPS = {
    "all": MODEL_KEYS,
    "ablations": ("no_compression", "no_residual"),
    "baselines": ("persistence", "linear"),
}


def expand_models(keys):
    out = []
    for k in keys:
        for m in MODEL_GROUPS.get(k, (k,)):
            if m not in MODEL_KEYS:
                raise ValueError(f"unknown model {m!r}; choose from {MODEL_KEYS} or {sorted(MODEL_GROUPS)}")
            if m not in out:
                out.append(m)
    return out


def build_model(key, cfg: M.ModelConfig):
    if key == "relamix":
        return ReLaMixModel(cfg.replace(ablation="full"))
    if key in ("no_compression", "no_residual"):
        return ReLaMixModel(cfg.replace(ablation=key))
    if key == "persistence":
        return PersistenceBaseline(cfg)
    if key == "linear":
        return LinearBaseline(cfg)
    raise ValueError(f"unknown model {key!r}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    shuffle: bool = True
    steps_per_epoch: int | None = None  # None = one full pass; otherwise a random subset of batches

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise M.ConfigError("learning_rate", f"must be >= 0, got {self.learning_rate!r}")
        for name in ("batch_size", "max_epochs", "patience", "steps_per_epoch"):
            v = getattr(self, name)
            if name == "steps_per_epoch" and v is None:
                continue
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise M.ConfigError(name, f"must be a positive integer, got {v!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise M.ConfigError(unknown[0], "unknown train config field")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    initial_val_loss: float = float("nan")

    @property
    def epochs_run(self):
        return len(self.epochs)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e},{tr!r},{va!r}" for e, tr, va in self.epochs]
        return "\n".join(lines) + "\n"


def predict(mdl, params, windows, batch_size=1024):
    """Eval-mode predictions for every window, shape (N, horizon, d_out)."""
    out = []
    for lo in range(0, len(windows), batch_size):
        x, _ = windows.batch(np.arange(lo, min(lo + batch_size, len(windows))))
        pred, _ = mdl.forward(params, x, None, False)
        out.append(pred)
    if not out:
        raise ValueError("empty window set")
    return np.concatenate(out)


def dataset_loss(mdl, params, windows):
    _, y = windows.batch()
    return mse_loss(predict(mdl, params, windows), y)[0]


def train(mdl, tcfg: TrainConfig, train_windows, val_windows, params=None):
    """Minibatch Adam on the MSE loss with early stopping on validation loss.

    Returns the parameters with the lowest validation loss and the history.
    """
    if len(train_windows) < 1 or len(val_windows) < 1:
        raise ValueError("need at least one training window and one validation window")
    if params is None:
        params = mdl.init(tcfg.seed)
    history = TrainHistory()
    history.initial_val_loss = dataset_loss(mdl, params, val_windows)
    if not getattr(mdl, "trainable", True):
        return params, history
    best = params.copy()
    history.best_val_loss = history.initial_val_loss
    state = AdamState.zeros(params.size, lr=tcfg.learning_rate)
    order_rng = make_rng(tcfg.seed, "shuffle")
    drop_rng = make_rng(tcfg.seed, "dropout")
    n = len(train_windows)
    stale = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        order = order_rng.permutation(n) if tcfg.shuffle else np.arange(n)
        if tcfg.steps_per_epoch is not None:
            order = order[: tcfg.steps_per_epoch * tcfg.batch_size]
        total = 0.0
        for bi, lo in enumerate(range(0, len(order), tcfg.batch_size)):
            x, y = train_windows.batch(order[lo : lo + tcfg.batch_size])
            pred, trace = mdl.forward(params, x, drop_rng, True)
            loss, grad = mse_loss(pred, y)
            if not np.isfinite(loss):
                raise NonFiniteLossError(epoch, bi, loss)
            grads = mdl.backward(params, trace, grad)
            params.flat = adam_step(params.flat, grads.flat, state)
            total += loss * x.shape[0]
        val = dataset_loss(mdl, params, val_windows)
        history.epochs.append((epoch, total / len(order), val))
        log.debug("epoch %d train %.6g val %.6g", epoch, total / len(order), val)
        if val < history.best_val_loss:
            history.best_val_loss = val
            history.best_epoch = epoch
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    return best, history


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    model: str
    ablation: str
    delay_ratio: float
    k: int
    mse: float
    mae: float
    r2: float | None
    params: int
    epochs: int
    seed: int
    mask_hash: str
    config_hash: str
    per_feature: list = field(default_factory=list)
    units: str = "standardized"
    wall_time: float = 0.0

    def __post_init__(self):
        if self.mse < 0 or self.mae < 0 or (self.r2 is not None and self.r2 > 1.0):
            raise ValueError(f"inconsistent metrics: mse={self.mse} mae={self.mae} r2={self.r2}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})

    def sort_key(self):
        return (self.model, self.ablation, self.delay_ratio, self.k, self.seed)


def evaluate(mdl, params, windows, *, delay_ratio=0.0, seed=0, mask_hash="", config_hash="",
             epochs=0, wall_time=0.0, standardizer=None) -> EvalReport:
    """Score eval-mode predictions over ``windows`` (dropout off, no parameter updates).

    Metrics are in standardized units unless ``standardizer`` is given, in which
    case predictions and targets are mapped back to raw units first.
    """
    if len(windows) == 0:
        raise ValueError("empty window set")
    _, y = windows.batch()
    pred = predict(mdl, params, windows)
    if standardizer is not None:
        d = y.shape[-1]
        pred = pred * standardizer.std[:d] + standardizer.mean[:d]
        y = y * standardizer.std[:d] + standardizer.mean[:d]
    m = metrics(pred, y)
    return EvalReport(
        model=mdl.name,
        ablation=mdl.ablation,
        delay_ratio=float(delay_ratio),
        k=int(windows.horizon),
        mse=m["mse"],
        mae=m["mae"],
        r2=m["r2"],
        params=int(mdl.n_params()),
        epochs=int(epochs),
        seed=int(seed),
        mask_hash=mask_hash,
        config_hash=config_hash,
        per_feature=m["per_feature"],
        units="standardized" if standardizer is None else "raw",
        wall_time=wall_time,
    )


def config_digest(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


def load_dataset(spec: dict) -> TimeSeries:
    """``{"csv": path}`` or ``{"synth": kind, "length": n, "seed": s, "params": {...}}``."""
    if "csv" in spec:
        return load_csv(spec["csv"])
    if "synth" in spec:
        return synth_series(
            spec["synth"], int(spec.get("length", 20_000)), int(spec.get("seed", 0)),
            **spec.get("params", {}),
        )
    raise ValueError("dataset spec needs a 'csv' or 'synth' entry")


def cell_seed(seed, *key) -> int:
    """Training seed for one grid cell, independent of which other cells run."""
    ss = np.random.SeedSequence([int(seed), int(config_digest([str(k) for k in key])[:15], 16)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class CellFailure:
    model: str
    delay_ratio: float
    k: int
    seed: int
    error: str
    numeric: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class GridResult:
    reports: list
    failures: list
    histories: dict = field(default_factory=dict)


def run_grid(
    dataset,
    delay_ratios=(0.15, 0.25, 0.35),
    horizons=(1, 5, 7, 10),
    models=("relamix", "no_compression", "no_residual", "persistence", "linear"),
    seeds=(0,),
    model_cfg: M.ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    fractions=DEFAULT_SPLIT,
    on_report=None,
    units="standardized",
) -> GridResult:
    """One report per (model, delay ratio, horizon, seed).

    ``dataset`` is a spec dict (see ``load_dataset``) or a ``TimeSeries``. The
    mask for each (ratio, seed) is drawn once and shared by every model and
    horizon. A failing cell is recorded and the rest of the grid still runs.
    """
    if units not in ("standardized", "raw"):
        raise ValueError(f"units must be 'standardized' or 'raw', got {units!r}")
    model_cfg = model_cfg or M.ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    clean = dataset if isinstance(dataset, TimeSeries) else load_dataset(dataset)
    data_id = dataset if isinstance(dataset, dict) else {"sha256": _series_digest(clean)}
    model_keys = expand_models(models)
    result = GridResult([], [])
    for seed in seeds:
        for ratio in delay_ratios:
            mask = generate_mask(len(clean), ratio, seed)
            corrupted = apply_zoh(clean, mask)
            mask_hash = mask.digest()
            for k in horizons:
                cfg_k = model_cfg.replace(horizon=int(k))
                try:
                    prepared = prepare(clean, corrupted, cfg_k, fractions)
                except ValueError as exc:
                    log.warning("ratio=%s k=%s seed=%s: %s", ratio, k, seed, exc)
                    result.failures.extend(
                        CellFailure(key, float(ratio), int(k), int(seed), str(exc), False)
                        for key in model_keys
                    )
                    continue
                for key in model_keys:
                    mdl = build_model(key, cfg_k)
                    tcfg = replace(train_cfg, seed=cell_seed(seed, key, ratio, k))
                    chash = config_digest(
                        {"model": mdl.config_dict(), "kind": key, "train": tcfg.to_dict(),
                         "data": data_id, "split": list(fractions)}
                    )
                    t0 = time.perf_counter()
                    try:
                        params, hist = train(mdl, tcfg, prepared.train, prepared.val)
                        rep = evaluate(
                            mdl, params, prepared.test, delay_ratio=ratio, seed=seed,
                            mask_hash=mask_hash, config_hash=chash, epochs=hist.epochs_run,
                            wall_time=time.perf_counter() - t0,
                            standardizer=prepared.standardizer if units == "raw" else None,
                        )
                    except Exception as exc:  # noqa: BLE001 - recorded, grid continues
                        log.warning("cell %s ratio=%s k=%s seed=%s failed: %s", key, ratio, k, seed, exc)
                        result.failures.append(
                            CellFailure(key, float(ratio), int(k), int(seed), str(exc),
                                        isinstance(exc, FloatingPointError))
                        )
                        continue
                    result.reports.append(rep)
                    result.histories[(key, float(ratio), int(k), int(seed))] = hist
                    if on_report is not None:
                        on_report(rep, hist)
    result.reports.sort(key=EvalReport.sort_key)
    return result


def _series_digest(series: TimeSeries) -> str:
    h = hashlib.sha256()
    h.update(series.timestamps.astype("<i8").tobytes())
    h.update(series.values.astype("<f8").tobytes())
    h.update("|".join(series.feature_names).encode())
    return h.hexdigest()
