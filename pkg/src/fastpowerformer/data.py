"""Wind-farm CSV ingestion, cleaning, scaling, windowing and a synthetic farm."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

TIME_COLUMN = "Time(year-month-day h:m:s)"
POWER_COLUMN = "Power (MW)"
TIME_FORMAT = "%Y-%m-%d %H:%M:%S"
CADENCE = np.timedelta64(15, "m")

TABLE3_NUMERIC = [
    "Wind speed at height of 10 meters (m/s)",
    "Wind direction at height of 10 meters (˚)",
    "Wind speed at height of 30 meters (m/s)",
    "Wind direction at height of 30 meters (˚)",
    "Wind speed at height of 50 meters (m/s)",
    "Wind direction at height of 50 meters (˚)",
    "Wind speed - at the height of wheel hub (m/s)",
    "Wind direction - at the height of wheel hub (˚)",
    "Air temperature (°C)",
    "Atmosphere (hpa)",
    "Relative humidity (%)",
    POWER_COLUMN,
]

MISSING_LIMIT = 0.5
OUTLIER_Z = 5.0
MAD_SCALE = 1.4826  # MAD -> standard deviation under normality


class DataError(ValueError):
    """Input data cannot be used (schema, parsing or quality problem)."""


@dataclass(frozen=True)
class Schema:
    time_column: str
    numeric: tuple[str, ...]
    power: str = POWER_COLUMN
    directions: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.power not in self.numeric:
            raise ValueError(f"power column {self.power!r} must be one of the numeric columns")

    @classmethod
    def generic(cls, covariates: Sequence[str], power: str = POWER_COLUMN, time_column: str = TIME_COLUMN) -> "Schema":
        return cls(time_column, tuple(covariates) + (power,), power)

    def to_dict(self) -> dict:
        return {"time_column": self.time_column, "numeric": list(self.numeric), "power": self.power,
                "directions": list(self.directions)}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(d["time_column"], tuple(d["numeric"]), d["power"], tuple(d.get("directions", ())))


DEFAULT_SCHEMA = Schema(
    TIME_COLUMN,
    tuple(TABLE3_NUMERIC),
    POWER_COLUMN,
    tuple(c for c in TABLE3_NUMERIC if c.startswith("Wind direction")),
)


@dataclass
class ChannelReport:
    missing: int = 0
    imputed: int = 0
    outliers_clipped: int = 0
    negatives_clipped: int = 0


@dataclass
class CleaningReport:
    rows_in: int = 0
    rows_out: int = 0
    duplicates_dropped: int = 0
    gap_rows_inserted: int = 0
    channels: dict[str, ChannelReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows_in": self.rows_in,
            "rows_out": self.rows_out,
            "duplicates_dropped": self.duplicates_dropped,
            "gap_rows_inserted": self.gap_rows_inserted,
            "channels": {k: vars(v) for k, v in self.channels.items()},
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class SeriesFrame:
    """Timestamped numeric channels in a fixed column order."""

    timestamps: np.ndarray  # datetime64[s]
    columns: dict[str, np.ndarray]
    report: Optional[CleaningReport] = None

    def __post_init__(self) -> None:
        for name, col in self.columns.items():
            if len(col) != len(self.timestamps):
                raise DataError(f"column {name!r} has {len(col)} rows, expected {len(self.timestamps)}")

    @property
    def n_rows(self) -> int:
        return len(self.timestamps)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def values(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        names = self.names if names is None else names
        return np.stack([self.columns[n] for n in names], axis=1)

    def rows(self, lo: int, hi: int) -> "SeriesFrame":
        return SeriesFrame(self.timestamps[lo:hi], {k: v[lo:hi] for k, v in self.columns.items()})

    def to_frame(self, time_column: str = TIME_COLUMN) -> pd.DataFrame:
        df = pd.DataFrame(self.columns)
        df.insert(0, time_column, pd.to_datetime(self.timestamps).strftime(TIME_FORMAT))
        return df

    def to_csv(self, path, time_column: str = TIME_COLUMN) -> None:
        self.to_frame(time_column).to_csv(path, index=False, float_format="%.10g")


# ---------------------------------------------------------------------------
# loading and cleaning
# ---------------------------------------------------------------------------

def load_csv(path, schema: Schema = DEFAULT_SCHEMA) -> SeriesFrame:
    """Read a UTF-8 comma-separated file with a header row.

    Unparseable numeric cells become NaN (missing) and the row is kept.
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: file is empty") from None
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    if df.empty:
        raise DataError(f"{path}: no data rows")
    df.columns = [c.strip() for c in df.columns]
    for col in (schema.time_column, *schema.numeric):
        if col not in df.columns:
            raise DataError(f"{path}: missing required column {col!r}")
    try:
        ts = pd.to_datetime(df[schema.time_column].str.strip(), format=TIME_FORMAT)
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: unparseable timestamp ({exc})") from None
    cols = {c: pd.to_numeric(df[c].str.strip(), errors="coerce").to_numpy(dtype=np.float64) for c in schema.numeric}
    return SeriesFrame(ts.to_numpy().astype("datetime64[s]"), cols)


def _regularize(frame: SeriesFrame, report: CleaningReport) -> SeriesFrame:
    ts = frame.timestamps
    order = np.argsort(ts, kind="stable")
    if np.any(order != np.arange(len(ts))):
        raise DataError("timestamps are not in increasing order")
    keep = np.ones(len(ts), dtype=bool)
    keep[1:] = ts[1:] != ts[:-1]
    report.duplicates_dropped = int((~keep).sum())
    ts = ts[keep]
    cols = {k: v[keep] for k, v in frame.columns.items()}
    if len(ts) > 1:
        steps = np.diff(ts)
        if np.any(steps % CADENCE != np.timedelta64(0, "s")):
            raise DataError("timestamps are not aligned to a 15-minute cadence")
        grid = np.arange(ts[0], ts[-1] + CADENCE, CADENCE)
        if len(grid) != len(ts):
            pos = ((ts - ts[0]) // CADENCE).astype(np.int64)
            full = {}
            for k, v in cols.items():
                col = np.full(len(grid), np.nan)
                col[pos] = v
                full[k] = col
            report.gap_rows_inserted = len(grid) - len(ts)
            ts, cols = grid, full
    return SeriesFrame(ts.astype("datetime64[s]"), cols)


def robust_bounds(x: np.ndarray, z: float = OUTLIER_Z) -> tuple[float, float]:
    """median -/+ z robust standard deviations (scaled MAD) of the finite values."""
    finite = x[np.isfinite(x)]
    med = float(np.median(finite))
    mad = float(np.median(np.abs(finite - med)))
    half = z * MAD_SCALE * mad
    return med - half, med + half


def clean(frame: SeriesFrame, schema: Schema = DEFAULT_SCHEMA) -> SeriesFrame:
    """Regular cadence, robust outlier clipping, interpolation, physical bounds."""
    report = CleaningReport(rows_in=frame.n_rows)
    frame = _regularize(frame, report)
    n = frame.n_rows
    idx = np.arange(n)
    cols = {}
    for name, raw in frame.columns.items():
        x = raw.copy()
        rep = report.channels[name] = ChannelReport()
        miss = ~np.isfinite(x)
        rep.missing = int(miss.sum())
        if rep.missing > MISSING_LIMIT * n:
            raise DataError(f"column {name!r} is {rep.missing / n:.0%} missing (limit {MISSING_LIMIT:.0%})")
        if name not in schema.directions:
            lo, hi = robust_bounds(x)
            if hi > lo:
                out = ~miss & ((x < lo) | (x > hi))
                rep.outliers_clipped = int(out.sum())
                x[~miss] = np.clip(x[~miss], lo, hi)
        if rep.missing:
            # np.interp holds the end values flat, i.e. nearest fill at the edges
            x[miss] = np.interp(idx[miss], idx[~miss], x[~miss])
            rep.imputed = rep.missing
        if name == schema.power:
            neg = x < 0
            rep.negatives_clipped = int(neg.sum())
            x[neg] = 0.0
        cols[name] = x
    report.rows_out = n
    return SeriesFrame(frame.timestamps, cols, report)


# ---------------------------------------------------------------------------
# features, scaling, splitting, windows
# ---------------------------------------------------------------------------

def encode_features(
    frame: SeriesFrame,
    schema: Schema = DEFAULT_SCHEMA,
    encode_directions: bool = True,
    include_power: bool = True,
) -> SeriesFrame:
    """Model input channels: directions as sin/cos pairs, power history last.

    The power column is always carried (it is the target); with
    ``include_power=False`` it is excluded from :func:`input_channels`.
    """
    cols: dict[str, np.ndarray] = {}
    for name in schema.numeric:
        if name == schema.power:
            continue
        x = frame.columns[name]
        if encode_directions and name in schema.directions:
            rad = np.deg2rad(x)
            cols[f"{name} [sin]"] = np.sin(rad)
            cols[f"{name} [cos]"] = np.cos(rad)
        else:
            cols[name] = x
    cols[schema.power] = frame.columns[schema.power]
    out = SeriesFrame(frame.timestamps, cols, frame.report)
    out.include_power = include_power  # type: ignore[attr-defined]
    return out


def input_channels(frame: SeriesFrame, schema: Schema = DEFAULT_SCHEMA) -> list[str]:
    if getattr(frame, "include_power", True):
        return frame.names
    return [n for n in frame.names if n != schema.power]


class Normalizer:
    """Per-channel standardisation fitted on one (training) frame."""

    def __init__(self) -> None:
        self.mean: dict[str, float] = {}
        self.std: dict[str, float] = {}
        self.fit_count = 0
        self.fit_rows = 0

    @property
    def fitted(self) -> bool:
        return bool(self.mean)

    def fit(self, frame: SeriesFrame) -> "Normalizer":
        if self.fitted:
            raise RuntimeError("normalizer already fitted; create a new one")
        for name, x in frame.columns.items():
            m, s = float(np.mean(x)), float(np.std(x))
            if not s > 0:
                warnings.warn(f"channel {name!r} is constant; using std 1", RuntimeWarning, stacklevel=2)
                s = 1.0
            self.mean[name], self.std[name] = m, s
        self.fit_count += 1
        self.fit_rows = frame.n_rows
        return self

    def transform(self, frame: SeriesFrame) -> SeriesFrame:
        if not self.fitted:
            raise RuntimeError("normalizer used before fit")
        out = SeriesFrame(frame.timestamps, {k: (v - self.mean[k]) / self.std[k] for k, v in frame.columns.items()})
        out.include_power = getattr(frame, "include_power", True)  # type: ignore[attr-defined]
        return out

    def inverse(self, frame: SeriesFrame) -> SeriesFrame:
        return SeriesFrame(frame.timestamps, {k: v * self.std[k] + self.mean[k] for k, v in frame.columns.items()})

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "fit_rows": self.fit_rows}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        n = cls()
        n.mean = {k: float(v) for k, v in d["mean"].items()}
        n.std = {k: float(v) for k, v in d["std"].items()}
        n.fit_rows = int(d.get("fit_rows", 0))
        n.fit_count = 1
        return n


def split_7_1_2(frame: SeriesFrame, min_rows: int = 1) -> tuple[SeriesFrame, SeriesFrame, SeriesFrame]:
    """Chronological 70/10/20 split (floor, floor, remainder)."""
    n = frame.n_rows
    if n < min_rows:
        raise DataError(f"need at least {min_rows} rows to split, got {n}")
    # integer arithmetic: 0.7 * n can land just below a whole number
    n_train = (7 * n) // 10
    n_val = n // 10
    a, b = n_train, n_train + n_val
    parts = frame.rows(0, a), frame.rows(a, b), frame.rows(b, n)
    for p in parts:
        p.include_power = getattr(frame, "include_power", True)  # type: ignore[attr-defined]
    return parts


@dataclass
class WindowBatch:
    inputs: np.ndarray  # (B, T, V)
    targets: np.ndarray  # (B, P)
    starts: np.ndarray  # row index of each input window's first step
    last: np.ndarray  # target value at the final input step (persistence forecast)

    def __len__(self) -> int:
        return len(self.starts)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator["WindowBatch"]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for lo in range(0, len(order), batch_size):
            sel = order[lo : lo + batch_size]
            yield WindowBatch(np.ascontiguousarray(self.inputs[sel]), self.targets[sel].copy(), self.starts[sel], self.last[sel])


def window_count(n_rows: int, T: int, P: int, stride: int = 1) -> int:
    return (n_rows - T - P) // stride + 1


def make_windows(
    frame: SeriesFrame,
    T: int,
    P: int,
    stride: int = 1,
    target: str = POWER_COLUMN,
    channels: Optional[Sequence[str]] = None,
) -> WindowBatch:
    """All (past T rows, next P target values) pairs stepping by ``stride``."""
    if T < 1 or P < 1 or stride < 1:
        raise ValueError("T, P and stride must be positive")
    n = frame.n_rows
    if n < T + P:
        raise DataError(f"need at least T+P={T + P} rows for one window, got {n}")
    channels = input_channels(frame) if channels is None else list(channels)
    values = frame.values(channels)
    y = frame.columns[target]
    starts = np.arange(0, n - T - P + 1, stride)
    xin = np.lib.stride_tricks.sliding_window_view(values, T, axis=0)[starts].transpose(0, 2, 1)
    yout = np.lib.stride_tricks.sliding_window_view(y[T:], P)[starts]
    return WindowBatch(xin, yout, starts, y[starts + T - 1].copy())


# ---------------------------------------------------------------------------
# synthetic farm
# ---------------------------------------------------------------------------

DAY = 96
WEEK = 672


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    e = rng.normal(0.0, sigma, size=n)
    out = np.empty(n)
    out[0] = e[0] / np.sqrt(1 - phi * phi)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + e[t]
    return out


def power_curve(speed: np.ndarray, capacity: float, cut_in: float = 3.0, rated: float = 12.0) -> np.ndarray:
    """Cubic ramp between cut-in and rated speed, flat at capacity above it."""
    frac = np.clip((speed - cut_in) / (rated - cut_in), 0.0, 1.0)
    return capacity * frac**3


def synth_wind(seed: int, n_rows: int, V: int = 12, capacity: float = 100.0, start: str = "2020-01-01 00:00:00") -> SeriesFrame:
    """Synthetic 15-minute farm record with daily/weekly cycles.

    ``V`` counts numeric columns including power.  ``V == 12`` produces the
    standard column set; other sizes use generic covariate names.
    """
    if n_rows < 1:
        raise ValueError("n_rows must be positive")
    if V < 2:
        raise ValueError("need at least one covariate besides power")
    rng = np.random.default_rng(seed)
    k = np.arange(n_rows)
    day = 2 * np.pi * k / DAY
    week = 2 * np.pi * k / WEEK

    def cycle(a_day, a_week, phase_d=None, phase_w=None):
        pd_ = rng.uniform(0, 2 * np.pi) if phase_d is None else phase_d
        pw = rng.uniform(0, 2 * np.pi) if phase_w is None else phase_w
        return a_day * np.sin(day + pd_) + a_week * np.sin(week + pw)

    hub = np.maximum(8.0 + cycle(3.0, 1.2) + _ar1(rng, n_rows, 0.97, 0.15), 0.0)
    power = power_curve(hub, capacity) + rng.normal(0.0, 0.01 * capacity, n_rows)
    power = np.clip(power, 0.0, capacity)
    ts = np.datetime64(start, "s") + k * CADENCE.astype("timedelta64[s]")

    if V == len(TABLE3_NUMERIC):
        cols: dict[str, np.ndarray] = {}
        base_dir = 200.0 + cycle(30.0, 60.0) + _ar1(rng, n_rows, 0.95, 3.0)
        for i, h in enumerate((10, 30, 50)):
            shear = (h / 80.0) ** (1 / 7)
            cols[TABLE3_NUMERIC[2 * i]] = np.maximum(hub * shear + _ar1(rng, n_rows, 0.8, 0.1), 0.0)
            cols[TABLE3_NUMERIC[2 * i + 1]] = np.mod(base_dir - 4.0 * (3 - i) + rng.normal(0, 2.0, n_rows), 360.0)
        cols[TABLE3_NUMERIC[6]] = hub
        cols[TABLE3_NUMERIC[7]] = np.mod(base_dir, 360.0)
        cols[TABLE3_NUMERIC[8]] = 10.0 + cycle(6.0, 2.0) + _ar1(rng, n_rows, 0.97, 0.2)
        cols[TABLE3_NUMERIC[9]] = 1010.0 + cycle(1.0, 4.0) + _ar1(rng, n_rows, 0.99, 0.1)
        cols[TABLE3_NUMERIC[10]] = np.clip(45.0 + cycle(12.0, 5.0) + _ar1(rng, n_rows, 0.95, 1.0), 0.0, 100.0)
        cols[POWER_COLUMN] = power
        return SeriesFrame(ts, cols)

    cols = {"hub_wind_speed": hub}
    for j in range(1, V - 1):
        cols[f"covariate_{j:02d}"] = cycle(rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.0)) + _ar1(rng, n_rows, 0.9, 0.3)
    cols[POWER_COLUMN] = power
    return SeriesFrame(ts, cols)


def synth_schema(frame: SeriesFrame) -> Schema:
    """Schema matching a frame produced by :func:`synth_wind`."""
    if frame.names == TABLE3_NUMERIC:
        return DEFAULT_SCHEMA
    return Schema.generic([n for n in frame.names if n != POWER_COLUMN])


# ---------------------------------------------------------------------------
# end-to-end preparation
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    normalizer: Normalizer
    channels: list[str]
    target: str
    report: Optional[CleaningReport] = None

    @property
    def n_channels(self) -> int:
        return len(self.channels)


def prepare(
    frame: SeriesFrame,
    T: int,
    P: int,
    schema: Schema = DEFAULT_SCHEMA,
    stride: int = 1,
    encode_directions: bool = True,
    include_power: bool = True,
    normalizer: Optional[Normalizer] = None,
    cleaned: bool = False,
) -> Dataset:
    """Clean, encode, split 7:1:2, standardise on train statistics, window.

    Passing a fitted ``normalizer`` reuses it instead of fitting (prediction
    from a checkpoint).
    """
    if not cleaned:
        frame = clean(frame, schema)
    report = frame.report
    feats = encode_features(frame, schema, encode_directions, include_power)
    train, val, test = split_7_1_2(feats, min_rows=T + P + 10)
    if normalizer is None:
        normalizer = Normalizer().fit(train)
    parts = [normalizer.transform(p) for p in (train, val, test)]
    channels = input_channels(feats, schema)
    try:
        windows = [make_windows(p, T, P, stride, schema.power, channels) for p in parts]
    except DataError as exc:
        raise DataError(f"a 7:1:2 split is too short for T={T}, P={P}: {exc}") from None
    log.info("windows train/val/test = %d/%d/%d", *(len(w) for w in windows))
    return Dataset(*windows, normalizer, channels, schema.power, report)
