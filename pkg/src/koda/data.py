"""Series ingestion, chronological splits, windowing and synthetic trajectories."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd


class DataError(ValueError):
    pass


@dataclass
class Series:
    values: np.ndarray  # (T, C)
    channel_names: list = field(default_factory=list)
    dt: float = 1.0
    split_tag: str = "full"
    state: np.ndarray | None = None  # noise-free state for simulated data

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if not self.channel_names:
            self.channel_names = [f"x{i}" for i in range(self.values.shape[1])]
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError("channel_names length does not match the channel count")
        if not np.isfinite(self.values).all():
            raise DataError("series contains missing or non-finite values")

    def __len__(self):
        return len(self.values)

    @property
    def channels(self):
        return self.values.shape[1]

    def slice(self, start, stop, tag=None):
        st = None if self.state is None else self.state[start:stop]
        return Series(self.values[start:stop], list(self.channel_names), self.dt,
                      tag or self.split_tag, st)


def _to_float(text):
    # float() round-trips repr() output exactly, unlike pandas' fast parser
    try:
        v = float(text)
    except ValueError:
        return np.nan
    return v if np.isfinite(v) else np.nan


def ingest_csv(path, columns=None, date_column=0, forward_fill=False, dt=1.0):
    """Read an ETT-style CSV: a timestamp column followed by numeric channels.

    ``date_column`` is the index or name of the column to drop (``None`` keeps
    every column).  Unparseable cells raise :class:`DataError` naming the
    1-based data row and the column.  Missing cells are rejected unless
    ``forward_fill`` is set.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{path} is empty") from exc
    if frame.empty:
        raise DataError(f"{path} has no data rows")
    if date_column is not None:
        name = frame.columns[date_column] if isinstance(date_column, int) else date_column
        frame = frame.drop(columns=[name])
    if columns is not None:
        frame = frame[list(columns)]
    out = np.empty(frame.shape, dtype=float)
    for j, col in enumerate(frame.columns):
        raw = frame[col].str.strip()
        missing = raw == ""
        parsed = pd.Series([_to_float(v) for v in raw], index=raw.index, dtype=float)
        bad = parsed.isna() & ~missing
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
            raise DataError(
                f"{path}: non-numeric value {frame[col].iloc[row - 1]!r} at row {row}, column {col!r}"
            )
        if missing.any():
            if not forward_fill:
                row = int(np.flatnonzero(missing.to_numpy())[0]) + 1
                raise DataError(f"{path}: missing value at row {row}, column {col!r}")
            parsed = parsed.ffill().bfill()
        out[:, j] = parsed.to_numpy()
    return Series(out, [str(c) for c in frame.columns], dt)


def to_csv(series, path):
    """Write a series in the same timestamp-first layout ``ingest_csv`` reads."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *series.channel_names])
        for i, row in enumerate(series.values):
            w.writerow([repr(i * series.dt), *(repr(float(v)) for v in row)])


ETT_RATIOS = (0.6, 0.2, 0.2)
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


def split(series, ratios=DEFAULT_RATIOS, min_length=None):
    """Contiguous chronological train/val/test split."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or sum(ratios) > 1 + 1e-12:
        raise DataError(f"ratios must be three positive numbers summing to <= 1, got {ratios}")
    n = len(series)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_test = min(int(round(n * ratios[2])), n - n_train - n_val)
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_train + n_val + n_test)]
    parts = []
    for tag, (a, b) in zip(("train", "val", "test"), bounds):
        if min_length is not None and b - a < min_length:
            raise DataError(f"{tag} split has {b - a} samples, at least {min_length} (T_L + H) required")
        parts.append(series.slice(a, b, tag))
    return tuple(parts)


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values):
        values = np.asarray(values, dtype=float)
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values) * self.std + self.mean

    def apply(self, series):
        st = None if series.state is None else self.transform(series.state)
        return replace(series, values=self.transform(series.values), state=st)


def make_windows(values, lookback, horizon, stride=1):
    """Sliding (lookback, target) pairs as two stacked arrays.

    Returns arrays of shape (n, lookback, C) and (n, horizon, C) with
    ``n = (len - lookback - horizon) // stride + 1``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    need = lookback + horizon
    if len(values) < need:
        raise DataError(f"series of length {len(values)} is too short for lookback + horizon = {need}")
    n = (len(values) - need) // stride + 1
    starts = np.arange(n) * stride
    idx = starts[:, None] + np.arange(need)[None, :]
    pairs = values[idx]
    return pairs[:, :lookback], pairs[:, lookback:]


# synthetic nonlinear dynamical systems ---------------------------------------

def _pendulum(x, p):
    theta, omega = x[..., 0], x[..., 1]
    return np.stack([omega, -p["g_over_l"] * np.sin(theta)], axis=-1)


def _duffing(x, p):
    pos, vel = x[..., 0], x[..., 1]
    return np.stack([vel, -p["delta"] * vel - p["alpha"] * pos - p["beta"] * pos ** 3], axis=-1)


def _lotka_volterra(x, p):
    u, v = x[..., 0], x[..., 1]
    return np.stack([p["a"] * u - p["b"] * u * v, p["c"] * u * v - p["e"] * v], axis=-1)


def _lorenz63(x, p):
    a, b, c = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([p["sigma"] * (b - a), a * (p["rho"] - c) - b, a * b - p["beta"] * c], axis=-1)


VECTOR_FIELDS = {
    "pendulum": _pendulum,
    "duffing": _duffing,
    "lotka_volterra": _lotka_volterra,
    "lorenz63": _lorenz63,
}

CHANNELS = {
    "pendulum": ["theta", "omega"],
    "duffing": ["x", "v"],
    "lotka_volterra": ["prey", "predator"],
    "lorenz63": ["x", "y", "z"],
}


@dataclass(frozen=True)
class NldsSpec:
    system: str
    parameters: dict
    initial_box: tuple  # ((lo, hi), ...) per state dimension
    dt: float
    steps: int
    process_noise_std: float = 0.0
    measurement_noise_std: float = 0.0
    burn_in: int = 0

    def __post_init__(self):
        if self.system not in VECTOR_FIELDS:
            raise ValueError(f"unknown system {self.system!r}")
        if self.dt <= 0 or self.steps < 1 or self.burn_in < 0:
            raise ValueError("dt must be positive, steps >= 1, burn_in >= 0")
        if self.process_noise_std < 0 or self.measurement_noise_std < 0:
            raise ValueError("noise standard deviations must be nonnegative")
        if len(self.initial_box) != len(CHANNELS[self.system]):
            raise ValueError("initial_box needs one (lo, hi) pair per state dimension")

    def to_dict(self):
        return {
            "system": self.system, "parameters": dict(self.parameters),
            "initial_box": [list(b) for b in self.initial_box], "dt": self.dt,
            "steps": self.steps, "process_noise_std": self.process_noise_std,
            "measurement_noise_std": self.measurement_noise_std, "burn_in": self.burn_in,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["initial_box"] = tuple(tuple(b) for b in d["initial_box"])
        return cls(**d)


def default_spec(system, steps=1500, **overrides):
    """Textbook parameter settings for the four benchmark systems."""
    presets = {
        "pendulum": dict(parameters={"g_over_l": 1.0}, initial_box=((-1.0, 1.0), (-0.5, 0.5)),
                         dt=0.01, measurement_noise_std=0.01),
        "duffing": dict(parameters={"delta": 0.5, "alpha": -1.0, "beta": 1.0},
                        initial_box=((-2.0, 2.0), (-1.0, 1.0)), dt=0.05, measurement_noise_std=0.01),
        "lotka_volterra": dict(parameters={"a": 1.1, "b": 0.4, "c": 0.1, "e": 0.4},
                               initial_box=((2.0, 6.0), (1.5, 4.0)), dt=0.05,
                               measurement_noise_std=0.02),
        "lorenz63": dict(parameters={"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
                         initial_box=((-15.0, 15.0), (-20.0, 20.0), (5.0, 40.0)), dt=0.01,
                         measurement_noise_std=0.05, burn_in=500),
    }
    kw = dict(presets[system])
    kw.update(overrides)
    return NldsSpec(system=system, steps=steps, **kw)


def rk4_step(f, x, dt, p):
    k1 = f(x, p)
    k2 = f(x + 0.5 * dt * k1, p)
    k3 = f(x + 0.5 * dt * k2, p)
    k4 = f(x + dt * k3, p)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(spec, x0, steps=None, dt=None, noise=None):
    """RK4 trajectories from a batch of initial states, shape (steps, n, dim).

    ``noise`` (optional, same shape as the output) is added to the state after
    each step.  The initial state is the first row.
    """
    f = VECTOR_FIELDS[spec.system]
    steps = spec.steps if steps is None else steps
    dt = spec.dt if dt is None else dt
    x = np.array(x0, dtype=float)
    out = np.empty((steps,) + x.shape)
    out[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, steps):
            x = rk4_step(f, x, dt, spec.parameters)
            if noise is not None:
                x = x + noise[t]
            out[t] = x
    return out


class SimulationError(RuntimeError):
    pass


def simulate(spec, trajectory_count, seed):
    """Noisy measured trajectories of an NLDS, one Series per trajectory.

    Each trajectory draws its initial state, process noise and measurement
    noise from its own child of ``SeedSequence(seed)``.  The noise-free
    state is attached as ``Series.state``.  Trajectories that blow up are
    dropped with a warning.
    """
    children = np.random.SeedSequence(seed).spawn(trajectory_count)
    dim = len(spec.initial_box)
    lo = np.array([b[0] for b in spec.initial_box])
    hi = np.array([b[1] for b in spec.initial_box])
    total = spec.steps + spec.burn_in
    x0 = np.empty((trajectory_count, dim))
    proc = np.zeros((total, trajectory_count, dim))
    meas = np.empty((spec.steps, trajectory_count, dim))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        x0[i] = rng.uniform(lo, hi)
        if spec.process_noise_std > 0:
            proc[:, i] = spec.process_noise_std * rng.standard_normal((total, dim))
        meas[:, i] = spec.measurement_noise_std * rng.standard_normal((spec.steps, dim))
    traj = integrate(spec, x0, steps=total, noise=proc if spec.process_noise_std > 0 else None)
    traj = traj[spec.burn_in:]
    out = []
    failed = []
    for i in range(trajectory_count):
        state = traj[:, i]
        if not np.isfinite(state).all():
            failed.append(i)
            continue
        out.append(Series(state + meas[:, i], list(CHANNELS[spec.system]), spec.dt,
                          "full", state.copy()))
    if failed:
        warnings.warn(f"{spec.system}: trajectories {failed} diverged and were dropped", stacklevel=2)
    if not out:
        raise SimulationError(f"{spec.system}: every trajectory diverged")
    return out


def lotka_volterra_invariant(x, p):
    u, v = x[..., 0], x[..., 1]
    return p["c"] * u + p["b"] * v - p["e"] * np.log(u) - p["a"] * np.log(v)

