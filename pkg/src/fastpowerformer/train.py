"""Adam training with early stopping, error metrics and resource counters."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import AttentionCost, track_cost
from .data import Dataset, WindowBatch
from .model import Model
from .tensor import Tape, Tensor, mean, memory, no_tape, square, sub

log = logging.getLogger(__name__)

MAPE_EPS = 1e-6


class DivergenceError(RuntimeError):
    """Training produced a non-finite or runaway loss."""

    def __init__(self, message: str, report: "TrainReport") -> None:
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} targets vs {yhat.size} predictions")
    if y.size == 0:
        raise ValueError("metrics need at least one value")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def mape_with_count(y, yhat, eps: float = MAPE_EPS) -> tuple[float, int]:
    """Percentage error over targets with |y| >= eps, plus how many were skipped."""
    y, yhat = _pair(y, yhat)
    keep = np.abs(y) >= eps
    excluded = int(y.size - keep.sum())
    if not keep.any():
        return float("nan"), excluded
    return float(100.0 * np.mean(np.abs((y[keep] - yhat[keep]) / y[keep]))), excluded


def mape(y, yhat, eps: float = MAPE_EPS) -> float:
    return mape_with_count(y, yhat, eps)[0]


@dataclass
class Metrics:
    mse: float
    mae: float
    mape: float
    mape_excluded: int

    @classmethod
    def of(cls, y, yhat) -> "Metrics":
        m, n = mape_with_count(y, yhat)
        return cls(mse(y, yhat), mae(y, yhat), m, n)


def persistence_forecast(windows: WindowBatch, horizon: Optional[int] = None) -> np.ndarray:
    horizon = windows.targets.shape[1] if horizon is None else horizon
    return np.repeat(windows.last[:, None], horizon, axis=1)


def persistence_baseline(windows: WindowBatch) -> Metrics:
    """Metrics of repeating the last observed power value across the horizon."""
    return Metrics.of(windows.targets, persistence_forecast(windows))


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: Optional[float] = None) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}, moment {m.shape}")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.assign(p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    patience: int = 2
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_batch_size: int = 256
    divergence_threshold: float = 1e8
    max_train_batches: Optional[int] = None  # per epoch; None = full pass

    def __post_init__(self) -> None:
        from .model import ConfigError

        for name in ("epochs", "patience", "batch_size", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr", "must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1/beta2", "must lie in [0, 1)")
        if self.max_train_batches is not None and self.max_train_batches < 1:
            raise ConfigError("max_train_batches", "must be >= 1 when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        from .model import ConfigError

        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown train option")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    peak_bytes: int
    score_entries: int


@dataclass
class TrainReport:
    """Everything a run produces that is a pure function of config, data and seed.

    Wall-clock timings live in :attr:`epoch_seconds` and are written to a
    separate file so that the report itself is reproducible byte for byte.
    """

    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    diverged: bool = False
    test: Optional[Metrics] = None
    test_mw: Optional[Metrics] = None
    persistence: Optional[Metrics] = None
    persistence_mw: Optional[Metrics] = None
    peak_bytes: int = 0
    score_entries: int = 0
    checksum: str = ""
    epoch_seconds: list[float] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "diverged": self.diverged,
            "test": _maybe(self.test),
            "test_mw": _maybe(self.test_mw),
            "persistence": _maybe(self.persistence),
            "persistence_mw": _maybe(self.persistence_mw),
            "peak_bytes": self.peak_bytes,
            "score_entries": self.score_entries,
            "checksum": self.checksum,
        }

    def to_text(self) -> str:
        """JSON lines: a config header, one record per epoch, then a summary."""
        lines = [json.dumps({"config": self.config}, sort_keys=True)]
        lines += [json.dumps({"epoch": asdict(e)}, sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({"summary": self.summary()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    def write_timings(self, path) -> None:
        Path(path).write_text(json.dumps({"epoch_seconds": self.epoch_seconds}, indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "TrainReport":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        rep = cls(rows[0]["config"])
        for r in rows[1:-1]:
            rep.epochs.append(EpochRecord(**r["epoch"]))
        s = rows[-1]["summary"]
        for k in ("best_epoch", "stopped_early", "diverged", "peak_bytes", "score_entries", "checksum"):
            setattr(rep, k, s[k])
        for k in ("test", "test_mw", "persistence", "persistence_mw"):
            setattr(rep, k, Metrics(**s[k]) if s[k] else None)
        return rep


def _maybe(m: Optional[Metrics]) -> Optional[dict]:
    return None if m is None else asdict(m)


def predict(model: Model, windows: WindowBatch, batch_size: int = 256) -> np.ndarray:
    """Normalised forecasts (N, P) for every window, without recording gradients."""
    out = []
    with no_tape():
        for b in windows.batches(batch_size):
            out.append(model(b.inputs).y_hat.data)
    return np.concatenate(out, axis=0)


def _loss_step(model: Model, params: list[Tensor], batch: WindowBatch) -> tuple[float, list[np.ndarray]]:
    with Tape() as tape:
        tape.watch(params)
        y_hat = model(batch.inputs).y_hat
        loss = mean(square(sub(y_hat, Tensor(batch.targets, _copy=False))))
        grads = tape.backward(loss)
    return loss.item(), [grads[p] for p in params]


def resource_counters(report: TrainReport) -> tuple[list[float], int, int]:
    """(epoch seconds, peak live tensor bytes, attention score entries) of a run."""
    return list(report.epoch_seconds), report.peak_bytes, report.score_entries


def train(model: Model, data: Dataset, config: TrainConfig = TrainConfig()) -> TrainReport:
    """Minimise MSE on the training windows; keep the best-validation weights."""
    if min(len(data.train), len(data.val), len(data.test)) == 0:
        raise ValueError("every split needs at least one window")
    report = TrainReport({"model": model.config.to_dict(), "train": config.to_dict()})
    params = model.parameters()
    state = AdamState.for_params(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    best_val, best_state, since_best = np.inf, model.state_dict(), 0
    memory.reset_peak()
    run_cost = AttentionCost()

    with track_cost(run_cost):
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            memory.reset_peak()
            epoch_cost = AttentionCost()
            total, count = 0.0, 0
            with track_cost(epoch_cost):
                for i, batch in enumerate(data.train.batches(config.batch_size, rng)):
                    if config.max_train_batches is not None and i >= config.max_train_batches:
                        break
                    loss, grads = _loss_step(model, params, batch)
                    if not np.isfinite(loss) or loss > config.divergence_threshold:
                        report.diverged = True
                        raise DivergenceError(f"epoch {epoch} batch {i}: training loss {loss!r}", report)
                    adam_step(params, grads, state)
                    total += loss * len(batch)
                    count += len(batch)
            val = mse(data.val.targets, predict(model, data.val, config.eval_batch_size))
            report.epoch_seconds.append(time.perf_counter() - t0)
            report.epochs.append(EpochRecord(epoch, total / count, val, memory.peak, epoch_cost.score_entries))
            report.peak_bytes = max(report.peak_bytes, memory.peak)
            log.info("epoch %d train %.6f val %.6f (%.1fs)", epoch, total / count, val, report.epoch_seconds[-1])
            if not np.isfinite(val) or val > config.divergence_threshold:
                report.diverged = True
                raise DivergenceError(f"epoch {epoch}: validation loss {val!r}", report)
            if val < best_val:
                best_val, best_state, since_best = val, model.state_dict(), 0
                report.best_epoch = epoch
            else:
                since_best += 1
                if since_best >= config.patience:
                    report.stopped_early = epoch < config.epochs
                    break

    model.load_state_dict(best_state)
    report.score_entries = run_cost.score_entries
    report.checksum = model.checksum()
    evaluate(model, data, report, config.eval_batch_size)
    return report


def evaluate(model: Model, data: Dataset, report: TrainReport, batch_size: int = 256) -> TrainReport:
    """Fill test and persistence metrics (normalised and MW) into ``report``."""
    y = data.test.targets
    y_hat = predict(model, data.test, batch_size)
    mu, sd = data.normalizer.mean[data.target], data.normalizer.std[data.target]
    report.test = Metrics.of(y, y_hat)
    report.test_mw = Metrics.of(y * sd + mu, y_hat * sd + mu)
    base = persistence_forecast(data.test)
    report.persistence = Metrics.of(y, base)
    report.persistence_mw = Metrics.of(y * sd + mu, base * sd + mu)
    return report


def write_predictions(path, windows: WindowBatch, y_hat: np.ndarray, mean_: float, std: float) -> None:
    """Long-format CSV: window, step, truth and prediction in MW."""
    truth = windows.targets * std + mean_
    pred = y_hat * std + mean_
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "step", "truth_mw", "prediction_mw"])
        for i in range(truth.shape[0]):
            for j in range(truth.shape[1]):
                w.writerow([i, j + 1, repr(float(truth[i, j])), repr(float(pred[i, j]))])
