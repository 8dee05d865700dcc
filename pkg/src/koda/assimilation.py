"""Prediction-correction with learned gains.

When a measured window is available, the innovation (predicted minus
measured window) is pulled back to latent space through the transpose of the
decoder Jacobian, scaled elementwise by tanh-bounded gains and added to the
predicted physical and residual latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T


class ScheduleError(ValueError):
    pass


@dataclass
class AssimilationSchedule:
    """Which forecast windows come with a measured block, and the blocks."""
    horizon_windows: int
    measurements: dict  # window index -> (tau, C) or (N, tau, C) array

    def __post_init__(self):
        bad = [k for k in self.measurements if not 0 <= k < self.horizon_windows]
        if bad:
            raise ScheduleError(f"window indices {bad} fall outside the horizon of {self.horizon_windows}")

    @property
    def available(self):
        mask = np.zeros(self.horizon_windows, dtype=bool)
        mask[list(self.measurements)] = True
        return mask

    @property
    def fraction(self):
        return len(self.measurements) / self.horizon_windows

    def step_mask(self, tau):
        """Boolean per forecast step, True where the step belongs to a measured window."""
        return np.repeat(self.available, tau)

    @staticmethod
    def uniform_indices(horizon_windows, alpha):
        m = int(round(alpha * horizon_windows))
        if m == 0:
            return []
        return sorted({int((j + 0.5) * horizon_windows / m) for j in range(m)})

    @staticmethod
    def random_indices(horizon_windows, alpha, seed):
        m = int(round(alpha * horizon_windows))
        rng = np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(horizon_windows, size=m, replace=False))

    @classmethod
    def from_truth(cls, truth, tau, indices, noise_std=0.0, seed=0):
        """Measured blocks cut from a truth array (H, C) or (N, H, C) plus Gaussian noise."""
        truth = np.asarray(truth, dtype=float)
        hw = truth.shape[-2] // tau
        rng = np.random.default_rng(seed)
        meas = {}
        for k in indices:
            block = truth[..., k * tau:(k + 1) * tau, :]
            meas[k] = block + noise_std * rng.standard_normal(block.shape) if noise_std else block.copy()
        return cls(hw, meas)

    @classmethod
    def build(cls, truth, tau, alpha, placement="uniform", noise_std=0.0, seed=0):
        hw = np.asarray(truth).shape[-2] // tau
        if placement == "uniform":
            idx = cls.uniform_indices(hw, alpha)
        elif placement == "random":
            idx = cls.random_indices(hw, alpha, seed)
        else:
            raise ScheduleError(f"unknown placement {placement!r} (use uniform, random or a file)")
        return cls.from_truth(truth, tau, idx, noise_std, seed)

    @classmethod
    def from_file(cls, path, horizon_windows, tau, truth=None, noise_std=0.0, seed=0):
        """Parse ``index, source`` lines; ``source`` is ``inline`` or a CSV path.

        ``inline`` blocks are cut from ``truth`` (plus noise); a CSV path holds
        a tau x C block of comma-separated numbers.  ``#`` starts a comment.
        """
        meas = {}
        rng = np.random.default_rng(seed)
        for lineno, line in enumerate(open(path), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                idx_s, src = (part.strip() for part in line.split(",", 1))
                idx = int(idx_s)
            except ValueError as exc:
                raise ScheduleError(f"{path}:{lineno}: expected 'window_index, inline|path'") from exc
            if src == "inline":
                if truth is None:
                    raise ScheduleError(f"{path}:{lineno}: inline block needs a truth series")
                block = np.asarray(truth, dtype=float)[..., idx * tau:(idx + 1) * tau, :]
                if noise_std:
                    block = block + noise_std * rng.standard_normal(block.shape)
            else:
                block = np.loadtxt(src, delimiter=",", ndmin=2)
                if block.shape[0] != tau:
                    raise ScheduleError(f"{path}:{lineno}: block in {src} has {block.shape[0]} rows, tau={tau}")
            meas[idx] = block
        return cls(horizon_windows, meas)


@dataclass
class Innovation:
    residual_signal: np.ndarray  # (N, C, tau) predicted minus measured
    latent_pullback: np.ndarray  # (N, U, s, d)


def _decoder_constants(p):
    return {k: T.Tensor(v.data) for k, v in p.items() if k.startswith("psi.")}


def pullback(p, cfg, pred, window, measured):
    """Innovation for internal (N, C, tau) arrays; the pullback is a constant."""
    resid = window.data - measured
    cot = M.to_segments(T.Tensor(resid), cfg).data
    dec = _decoder_constants(p)
    h = pred.full().data
    lat = T.vjp(lambda hh: M.mlp(dec, "psi", hh), h, cot)
    return Innovation(resid, lat)


def _gate(p, net, x):
    return T.linear(T.relu(T.linear(x, p[f"gain.{net}.A"], p[f"gain.{net}.c"])), p[f"gain.{net}.V"])


def gains(p, cfg, fmat, pred, measured):
    """(L_g, L_r) for a predicted state and a measured (N, C, tau) window."""
    if cfg.correction == "bias":
        lg = T.tanh(p["gain.b_g"]) if cfg.use_global else None
        lr = T.tanh(p["gain.b_r"]) if cfg.use_residual else None
        return lg, lr
    xg, xr = M._split_inputs(measured, cfg, fmat)
    lg = lr = None
    if cfg.use_global:
        eg = M.mlp(p, "phi_g", M.to_segments(xg, cfg))
        lg = T.tanh(_gate(p, "zz", pred.Z) + _gate(p, "yg", eg) + p["gain.b_g"])
    if cfg.use_residual:
        er = M.mlp(p, "phi_r", M.to_segments(xr, cfg))
        lr = T.tanh(_gate(p, "zr", pred.R) + _gate(p, "yr", er) + p["gain.b_r"])
    return lg, lr


def apply_correction(p, cfg, pred, latent_pullback, lg, lr, carry_before=None):
    pb = T.Tensor(latent_pullback)
    z = pred.Z if lg is None else pred.Z + lg * pb
    r = pred.R if lr is None else pred.R + lr * pb
    carry = pred.carry
    if r is not None and carry_before is not None:
        carry = M.refresh_carry(p, cfg, r, carry_before)
    return M.LatentState(z, r, carry)


class Corrector:
    """Callable plugged into ``model.run``.

    ``masks`` optionally maps a window index to an (N,) availability vector,
    letting a batch mix corrected and uncorrected samples (gain times zero).
    """

    def __init__(self, masks=None):
        self.masks = masks

    def __call__(self, p, cfg, fmat, pred, window, measured, carry_before, index):
        if cfg.correction == "none":
            return pred, window, (None, None)
        meas = T.Tensor(measured)
        innov = pullback(p, cfg, pred, window, measured)
        lg, lr = gains(p, cfg, fmat, pred, meas)
        if self.masks is not None:
            m = T.Tensor(self.masks[index].reshape(-1, 1, 1, 1) * np.ones(innov.latent_pullback.shape))
            lg = None if lg is None else lg * m
            lr = None if lr is None else lr * m
        corrected = apply_correction(p, cfg, pred, innov.latent_pullback, lg, lr, carry_before)
        return corrected, M.decode(p, cfg, corrected.full()), (lg, lr)


# array-level operations -----------------------------------------------------

def _to_internal(window):
    w = np.asarray(window, dtype=float)
    w = w[None] if w.ndim == 2 else w
    return np.ascontiguousarray(w.transpose(0, 2, 1))


def pullback_innovation(predicted_latent, predicted_window, measured_window, params):
    """J_psi^T (predicted - measured) per segment, windows given as (tau, C) or (N, tau, C)."""
    pw, mw = _to_internal(predicted_window), _to_internal(measured_window)
    if pw.shape != mw.shape:
        raise ValueError(f"predicted window {pw.shape} and measured window {mw.shape} differ")
    return pullback(params.constants(), params.config, predicted_latent, T.Tensor(pw), mw)


def compute_gains(predicted, measured_window, filt, params):
    if measured_window is None:
        raise ScheduleError("gains need a measured window; consult the schedule first")
    cfg = params.config
    fmat = M.filter_matrix(filt, cfg) if cfg.use_filter else None
    lg, lr = gains(params.constants(), cfg, fmat, predicted, T.Tensor(_to_internal(measured_window)))
    return (None if lg is None else lg.data), (None if lr is None else lr.data)


def correct(predicted, innovation, gain_pair, params=None, carry_before=None):
    """Z' = Z + L_g * pullback, R' = R + L_r * pullback; carry refreshed if params given."""
    lg, lr = (None if g is None else T.Tensor(g) for g in gain_pair)
    if predicted.Z is None:
        lg = None
    if predicted.R is None:
        lr = None
    p = params.constants() if params is not None else None
    cfg = params.config if params is not None else None
    cb = carry_before if p is not None else None
    return apply_correction(p, cfg, predicted, innovation.latent_pullback, lg, lr, cb)


def assimilating_rollout(lookback, schedule, params, filt):
    """Forecast with correction at every window the schedule marks available."""
    cfg = params.config
    lb = np.asarray(lookback, dtype=float)
    meas = {}
    for k, block in schedule.measurements.items():
        b = np.asarray(block, dtype=float)
        if lb.ndim == 3 and b.ndim == 2:
            b = np.broadcast_to(b, (lb.shape[0],) + b.shape)
        meas[k] = b
    return M.forecast(params, filt, lb, schedule.horizon_windows, Corrector(), meas or None)
