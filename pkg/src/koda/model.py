"""Segment encoders, Koopman propagator, recurrent residual branch and decoder.

Windows are carried internally as ``(N, C, tau)`` arrays.  A window is cut
into ``s`` segments of width ``w``; in channel-independent mode each channel
is its own unit (``U = C`` units with ``w`` features per segment), in joint
mode the channels of a segment are flattened together (``U = 1`` unit with
``w * C`` features).  Latents are ``(N, U, s, d)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T

CHECKPOINT_FORMAT = "koda-checkpoint/1"

VARIANTS = ("full", "global_only", "residual_only", "no_correction", "no_gating")


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    tau: int
    segments: int
    latent_dim: int

    def __post_init__(self):
        if self.segments < 1 or self.tau % self.segments:
            raise ValueError(f"tau={self.tau} is not divisible by segments={self.segments}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")

    @property
    def segment_width(self):
        return self.tau // self.segments


@dataclass(frozen=True)
class ModelConfig:
    window: WindowConfig
    channels: int
    channel_mode: str = "independent"  # or "joint"
    hidden: int = 0  # encoder/decoder width, 0 means 4 * latent_dim
    use_global: bool = True
    use_residual: bool = True
    use_filter: bool = True
    correction: str = "gated"  # "gated", "bias" or "none"
    reencode_every: int = 1  # 0 never re-encodes (vanilla Koopman autoencoder)
    instance_norm: bool = True

    def __post_init__(self):
        if self.channel_mode not in ("independent", "joint"):
            raise ValueError(f"unknown channel_mode {self.channel_mode!r}")
        if self.correction not in ("gated", "bias", "none"):
            raise ValueError(f"unknown correction {self.correction!r}")
        if not (self.use_global or self.use_residual):
            raise ValueError("at least one branch must be enabled")

    @property
    def width(self):
        return self.hidden or 4 * self.window.latent_dim

    @property
    def units(self):
        return self.channels if self.channel_mode == "independent" else 1

    @property
    def features(self):
        w = self.window.segment_width
        return w if self.channel_mode == "independent" else w * self.channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["window"] = WindowConfig(**d["window"])
        return cls(**d)


def variant_config(cfg, variant):
    """Switch settings for the ablation rows; every variant uses the same code."""
    if variant == "full":
        return replace(cfg, use_global=True, use_residual=True, use_filter=True, correction="gated")
    if variant == "global_only":
        return replace(cfg, use_global=True, use_residual=False, use_filter=False, correction="gated")
    if variant == "residual_only":
        return replace(cfg, use_global=False, use_residual=True, use_filter=False, correction="gated")
    if variant == "no_correction":
        return replace(cfg, use_global=True, use_residual=True, use_filter=True, correction="none")
    if variant == "no_gating":
        return replace(cfg, use_global=True, use_residual=True, use_filter=True, correction="bias")
    if variant == "kae":
        return replace(cfg, use_global=True, use_residual=False, use_filter=False,
                       correction="none", reencode_every=0)
    raise ValueError(f"unknown variant {variant!r}")


# parameters -----------------------------------------------------------------

def _mlp_shapes(prefix, sizes):
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}.W{i}"] = (a, b)
        out[f"{prefix}.b{i}"] = (b,)
    return out


def param_shapes(cfg):
    d, f, h = cfg.window.latent_dim, cfg.features, cfg.width
    shapes = {}
    shapes.update(_mlp_shapes("phi_g", [f, h, h, d]))
    shapes.update(_mlp_shapes("phi_r", [f, h, h, d]))
    shapes.update(_mlp_shapes("psi", [d, h, h, f]))
    shapes["K"] = (d, d)
    shapes.update({"gru.wx": (d, 3 * d), "gru.wh": (d, 3 * d), "gru.bx": (3 * d,), "gru.bh": (3 * d,)})
    for net in ("zz", "yg", "zr", "yr"):
        shapes.update({f"gain.{net}.A": (d, d), f"gain.{net}.c": (d,), f"gain.{net}.V": (d, d)})
    shapes["gain.b_g"] = (d,)
    shapes["gain.b_r"] = (d,)
    return shapes


GAIN_PREFIX = "gain."


class ModelParams:
    """Named parameter arrays plus the config they were built for."""

    def __init__(self, config, arrays, norm=None):
        self.config = config
        self.arrays = dict(arrays)
        self.norm = norm  # optional dict with "mean" and "std" arrays
        shapes = param_shapes(config)
        if set(shapes) != set(self.arrays):
            raise ValueError("parameter names do not match the config")
        for k, s in shapes.items():
            if self.arrays[k].shape != s:
                raise ValueError(f"{k}: shape {self.arrays[k].shape}, expected {s}")

    @classmethod
    def init(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        arrays = {}
        d = config.window.latent_dim
        for name, shape in param_shapes(config).items():
            if name == "K":
                arrays[name] = np.eye(d)
            elif name.startswith(GAIN_PREFIX) and not name.endswith(".A"):
                # zero output layer: every gain starts at tanh(0) = 0; zero hidden
                # biases keep the gate ReLUs alive for small latents
                arrays[name] = np.zeros(shape)
            elif name.startswith("gru."):
                bound = 1.0 / np.sqrt(d)
                arrays[name] = rng.uniform(-bound, bound, shape)
            else:
                fan_in = shape[0] if len(shape) == 2 else _fan_in(name, config)
                bound = 1.0 / np.sqrt(fan_in)
                arrays[name] = rng.uniform(-bound, bound, shape)
        return cls(config, arrays)

    def copy(self):
        norm = None if self.norm is None else {k: v.copy() for k, v in self.norm.items()}
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, norm)

    def constants(self):
        return {k: T.Tensor(v) for k, v in self.arrays.items()}

    def with_arrays(self, arrays):
        return ModelParams(self.config, arrays, self.norm)

    def save(self, path):
        meta = {"format": CHECKPOINT_FORMAT, "config": self.config.to_dict()}
        payload = {f"p:{k}": v for k, v in self.arrays.items()}
        if self.norm is not None:
            payload.update({f"n:{k}": np.asarray(v) for k, v in self.norm.items()})
        payload["meta"] = np.array(json.dumps(meta))
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path):
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
            arrays = {k[2:]: z[k] for k in z.files if k.startswith("p:")}
            norm = {k[2:]: z[k] for k in z.files if k.startswith("n:")} or None
        return cls(ModelConfig.from_dict(meta["config"]), arrays, norm)


def _fan_in(name, config):
    prefix, leaf = name.rsplit(".", 1)
    if prefix.startswith("gain."):
        return config.window.latent_dim
    layer = int(leaf[1:])
    return param_shapes(config)[f"{prefix}.W{layer}"][0]


# building blocks ------------------------------------------------------------

def mlp(p, prefix, x):
    h = T.relu(T.linear(x, p[f"{prefix}.W0"], p[f"{prefix}.b0"]))
    h = T.relu(T.linear(h, p[f"{prefix}.W1"], p[f"{prefix}.b1"]))
    return T.linear(h, p[f"{prefix}.W2"], p[f"{prefix}.b2"])


def gru(p, x, h):
    return T.gru_cell(x, h, p["gru.wx"], p["gru.wh"], p["gru.bx"], p["gru.bh"])


def to_segments(x, cfg):
    """(N, C, tau) -> (N, U, s, F)."""
    n = x.shape[0]
    c, s, w = cfg.channels, cfg.window.segments, cfg.window.segment_width
    seg = T.reshape(x, (n, c, s, w))
    if cfg.channel_mode == "independent":
        return seg
    return T.reshape(T.transpose(seg, (0, 2, 1, 3)), (n, 1, s, c * w))


def from_segments(seg, cfg):
    """(N, U, s, F) -> (N, C, tau)."""
    n = seg.shape[0]
    c, s, w = cfg.channels, cfg.window.segments, cfg.window.segment_width
    if cfg.channel_mode == "joint":
        seg = T.transpose(T.reshape(seg, (n, s, c, w)), (0, 2, 1, 3))
    return T.reshape(seg, (n, c, cfg.window.tau))


def filter_matrix(filt, cfg):
    """Constant right-multiplier applying the dominant-band projection."""
    if filt is None:
        raise ValueError("this config splits windows with a spectral filter, but none was given")
    p = filt.projection
    if p.shape[0] not in (1, cfg.channels):
        raise ValueError(f"filter has {p.shape[0]} channels, model expects {cfg.channels}")
    if filt.window_length != cfg.window.tau:
        raise ValueError(f"filter window {filt.window_length} != tau {cfg.window.tau}")
    return T.Tensor(np.swapaxes(p, -1, -2)[0] if p.shape[0] == 1 else np.swapaxes(p, -1, -2))


def apply_filter(x, fmat):
    if fmat.ndim == 2:
        return T.matmul(x, fmat)
    n, c, tau = x.shape
    return T.reshape(T.matmul(T.reshape(x, (n, c, 1, tau)), fmat), (n, c, tau))


@dataclass
class LatentState:
    """Physical latents Z, residual latents R (each (N, U, s, d) or None) and the carry."""
    Z: T.Tensor | None
    R: T.Tensor | None
    carry: T.Tensor | None

    def full(self):
        if self.Z is None:
            return self.R
        if self.R is None:
            return self.Z
        return self.Z + self.R


def _split_inputs(x, cfg, fmat):
    xg = xr = x
    if cfg.use_filter:
        dom = apply_filter(x, fmat)
        xg, xr = dom, x - dom
    return xg, xr


def encode(p, cfg, fmat, x, carry):
    """Encode a (N, C, tau) window; the recurrent carry consumes every R segment."""
    xg, xr = _split_inputs(x, cfg, fmat)
    Z = mlp(p, "phi_g", to_segments(xg, cfg)) if cfg.use_global else None
    R = None
    if cfg.use_residual:
        R = mlp(p, "phi_r", to_segments(xr, cfg))
        for i in range(cfg.window.segments):
            carry = gru(p, R[:, :, i, :], carry)
    return LatentState(Z, R, carry)


def decode(p, cfg, h):
    return from_segments(mlp(p, "psi", h), cfg)


def koopman_chain(p, z0, steps, kt=None):
    """Apply K repeatedly to (N, U, d) latents, returning (N, U, steps, d)."""
    kt = T.transpose(p["K"]) if kt is None else kt
    zs = []
    z = z0
    for i in range(steps):
        try:
            z = T.matmul(z, kt)
        except T.NonFiniteError as exc:
            raise RolloutError(f"non-finite physical latent at segment {i}") from exc
        zs.append(z)
    return T.stack(zs, axis=2)


def residual_chain(p, r0, carry, steps):
    rs = []
    r, h = r0, carry
    for i in range(steps):
        try:
            h = gru(p, r, h)
        except T.NonFiniteError as exc:
            raise RolloutError(f"non-finite residual latent at segment {i}") from exc
        r = h
        rs.append(h)
    return T.stack(rs, axis=2), h


def predict(p, cfg, state, kt=None):
    """One window ahead: returns the predicted latent state and decoded window."""
    s = cfg.window.segments
    Zh = koopman_chain(p, state.Z[:, :, s - 1, :], s, kt) if cfg.use_global else None
    Rh, carry = (None, None)
    if cfg.use_residual:
        Rh, carry = residual_chain(p, state.R[:, :, s - 1, :], state.carry, s)
    pred = LatentState(Zh, Rh, carry)
    return pred, decode(p, cfg, pred.full())


def refresh_carry(p, cfg, R, carry):
    for i in range(cfg.window.segments):
        carry = gru(p, R[:, :, i, :], carry)
    return carry


# rollout --------------------------------------------------------------------

@dataclass
class Trace:
    forecast: T.Tensor  # (N, C, H) in the normalized input space of the model
    recon: list  # (reconstruction, source) pairs for lookback windows
    align: list  # (koopman prediction, encoding) pairs for consecutive lookback windows
    gains: dict  # horizon window index -> (L_g, L_r)


def instance_stats(lookback):
    """Per-sample, per-channel mean and std over time of an (N, T, C) array."""
    mu = lookback.mean(axis=1, keepdims=True)
    sd = lookback.std(axis=1, keepdims=True)
    return mu, np.where(sd > 1e-8, sd, 1.0)


def run(p, cfg, filt, lookback, horizon_windows, corrector=None, measurements=None,
        track_losses=False):
    """Encode the lookback window by window, then predict ``horizon_windows`` windows.

    ``lookback`` is an (N, T_L, C) array already in model input space (after
    any instance normalization).  ``measurements`` maps a horizon window index
    to an (N, C, tau) array in the same space; ``corrector`` is called as
    ``corrector(p, cfg, fmat, pred, window, measured, carry_before, index)`` and
    returns ``(corrected_state, corrected_window, gains)``.
    """
    tau = cfg.window.tau
    n, t_l, c = lookback.shape
    if t_l % tau:
        raise ValueError(f"lookback length {t_l} is not divisible by tau={tau}")
    if horizon_windows < 1:
        raise ValueError("horizon_windows must be >= 1")
    if c != cfg.channels:
        raise ValueError(f"lookback has {c} channels, model expects {cfg.channels}")
    fmat = filter_matrix(filt, cfg) if cfg.use_filter else None
    kt = T.transpose(p["K"])
    x = np.ascontiguousarray(lookback.transpose(0, 2, 1))
    d = cfg.window.latent_dim
    s = cfg.window.segments
    carry = T.Tensor(np.zeros((n, cfg.units, d))) if cfg.use_residual else None
    recon, align = [], []
    state = None
    for k in range(t_l // tau):
        xk = T.Tensor(x[:, :, k * tau:(k + 1) * tau])
        new = encode(p, cfg, fmat, xk, carry)
        if track_losses:
            recon.append((decode(p, cfg, new.full()), xk))
            if state is not None and cfg.use_global:
                align.append((koopman_chain(p, state.Z[:, :, s - 1, :], s, kt), new.Z))
        state = new
        carry = new.carry
    outputs = []
    gains = {}
    for j in range(horizon_windows):
        carry_before = state.carry
        pred, window = predict(p, cfg, state, kt)
        if measurements is not None and j in measurements and corrector is not None:
            pred, window, gains[j] = corrector(p, cfg, fmat, pred, window, measurements[j],
                                               carry_before, j)
        outputs.append(window)
        every = cfg.reencode_every
        if every and (j + 1) % every == 0:
            state = encode(p, cfg, fmat, window, carry_before)
        else:
            state = pred
    forecast = outputs[0] if len(outputs) == 1 else T.concat(outputs, axis=2)
    return Trace(forecast, recon, align, gains)


def _as_batch(values):
    values = np.asarray(values, dtype=float)
    single = values.ndim == 2
    return (values[None] if single else values), single


def forecast(params, filt, lookback, horizon_windows, corrector=None, measurements=None):
    """Forecast ``horizon_windows * tau`` steps from a (T_L, C) or (N, T_L, C) lookback.

    Handles instance normalization when the config asks for it; measured
    windows are given as (N, tau, C) arrays in the lookback's units.
    """
    cfg = params.config
    lb, single = _as_batch(lookback)
    if cfg.instance_norm:
        mu, sd = instance_stats(lb)
    else:
        mu, sd = np.zeros((lb.shape[0], 1, lb.shape[2])), np.ones((lb.shape[0], 1, lb.shape[2]))
    meas = None
    if measurements:
        meas = {j: np.ascontiguousarray(((np.asarray(m).reshape(lb.shape[0], cfg.window.tau, -1)
                                          - mu) / sd).transpose(0, 2, 1))
                for j, m in measurements.items()}
    tr = run(params.constants(), cfg, filt, (lb - mu) / sd, horizon_windows, corrector, meas)
    out = tr.forecast.data.transpose(0, 2, 1) * sd + mu
    return out[0] if single else out


def rollout(lookback, horizon_windows, params, filt=None, cfg=None):
    """Open-loop forecast with periodic re-encoding (no assimilation)."""
    if cfg is not None and cfg != params.config:
        raise ValueError("cfg does not match the params' config")
    return forecast(params, filt, lookback, horizon_windows)


# single-window operations on plain arrays ----------------------------------

def encode_window(window, params, filt, carry=None):
    """Encode one (tau, C) window or a (N, tau, C) batch into a LatentState."""
    cfg = params.config
    w, single = _as_batch(window)
    if w.shape[1] != cfg.window.tau:
        raise ValueError(f"window length {w.shape[1]} != tau {cfg.window.tau}")
    p = params.constants()
    fmat = filter_matrix(filt, cfg) if cfg.use_filter else None
    if carry is None and cfg.use_residual:
        carry = T.Tensor(np.zeros((w.shape[0], cfg.units, cfg.window.latent_dim)))
    return encode(p, cfg, fmat, T.Tensor(w.transpose(0, 2, 1)), carry)


def predict_window(state, params):
    """Predict the next window; returns (predicted LatentState, (N, tau, C) array)."""
    pred, window = predict(params.constants(), params.config, state)
    return pred, window.data.transpose(0, 2, 1)


def koopman_step(z, params):
    return np.asarray(z) @ params.arrays["K"].T


def residual_step(r, hidden, params):
    p = params.constants()
    out = gru(p, T.Tensor(r), T.Tensor(hidden)).data
    return out, out
