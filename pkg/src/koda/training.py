"""Losses, Adam, and the two-stage training schedule."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .assimilation import Corrector

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 5
    learning_rate: float = 1e-3
    lambda_pred: float = 1.0
    lambda_align: float = 1.0
    batch_size: int = 32
    seed: int = 0
    stage2_mask_rate: float = 0.3
    stage2_noise_std: float = 0.0
    steps_per_epoch: int = 0  # 0 means one full pass over the training pairs
    clip_norm: float = 5.0
    val_samples: int = 256
    halve_on_plateau: int = 0  # epochs without improvement before halving lr; 0 disables
    early_stop: int = 0  # epochs without improvement before stopping; 0 disables

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be positive and batch_size >= 1")
        if self.lambda_pred < 0 or self.lambda_align < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.stage2_mask_rate <= 1.0:
            raise ValueError("stage2_mask_rate must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    recon: float
    pred: float
    align: float
    total: float
    stage: int


@dataclass
class WindowData:
    """Stacked (lookback, target) pairs, (n, T_L, C) and (n, H, C), in normalized units."""
    lookback: np.ndarray
    target: np.ndarray

    def __len__(self):
        return len(self.lookback)

    def take(self, idx):
        return WindowData(self.lookback[idx], self.target[idx])

    def subsample(self, count, seed=0):
        if len(self) <= count:
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), count, replace=False))
        return self.take(idx)


def _mse(a, b):
    return T.mean(T.square(a - b))


def losses(p, cfg, filt, lookback, target, stage=1, tc=None, measurements=None, masks=None):
    """Loss terms on one batch; returns (total Tensor, LossReport).

    ``lookback`` (N, T_L, C) and ``target`` (N, H, C) are in normalized
    units.  Prediction error is measured in those units after undoing the
    per-window instance normalization; reconstruction in the model's input
    space.  ``measurements`` (stage 2) maps window index to (N, tau, C).
    """
    tc = tc or TrainConfig()
    tau = cfg.window.tau
    n, h, c = target.shape
    if lookback.shape[1] % tau or h % tau:
        raise ValueError(f"lookback {lookback.shape[1]} and horizon {h} must be divisible by tau={tau}")
    if cfg.instance_norm:
        mu, sd = M.instance_stats(lookback)
    else:
        mu, sd = np.zeros((n, 1, c)), np.ones((n, 1, c))
    meas = None
    corrector = None
    if measurements:
        meas = {j: np.ascontiguousarray(((m - mu) / sd).transpose(0, 2, 1)) for j, m in measurements.items()}
        corrector = Corrector(masks)
    trace = M.run(p, cfg, filt, (lookback - mu) / sd, h // tau, corrector, meas,
                  track_losses=(stage == 1))
    scale = np.ascontiguousarray(np.broadcast_to(sd.transpose(0, 2, 1), (n, c, h)))
    shift = np.ascontiguousarray(np.broadcast_to(mu.transpose(0, 2, 1), (n, c, h)))
    fc = trace.forecast * scale + shift
    pred = _mse(fc, np.ascontiguousarray(target.transpose(0, 2, 1)))
    if stage == 2:
        v = float(pred.data)
        return pred, LossReport(0.0, v, 0.0, v, 2)
    recon = sum((_mse(a, b) for a, b in trace.recon), T.Tensor(0.0))
    recon = recon * (1.0 / len(trace.recon))
    total = recon + pred * tc.lambda_pred
    align_v = 0.0
    if trace.align:
        align = sum((_mse(a, b) for a, b in trace.align), T.Tensor(0.0)) * (1.0 / len(trace.align))
        total = total + align * tc.lambda_align
        align_v = float(align.data)
    return total, LossReport(float(recon.data), float(pred.data), align_v, float(total.data), 1)


class Adam:
    """Adaptive moment estimation on a dict of arrays (new arrays every step)."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        out = dict(params)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1.0 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1.0 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def clip_by_global_norm(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads, norm


def _trainable(params, stage):
    if stage == 1:
        return [k for k in params.arrays if not k.startswith(M.GAIN_PREFIX)]
    return list(params.arrays)


def _stage2_measurements(target, tau, rate, noise_std, rng):
    """Bernoulli availability per (sample, window) and noisy target blocks."""
    n, h, c = target.shape
    avail = rng.random((n, h // tau)) < rate
    meas, masks = {}, {}
    for j in range(h // tau):
        if not avail[:, j].any():
            continue
        block = target[:, j * tau:(j + 1) * tau]
        if noise_std:
            block = block + noise_std * rng.standard_normal(block.shape)
        meas[j] = block
        masks[j] = avail[:, j].astype(float)
    return meas, masks


def evaluate(params, filt, data, stage=1, tc=None, seed=0):
    """LossReport on a dataset without recording a tape."""
    tc = tc or TrainConfig()
    p = params.constants()
    meas = masks = None
    if stage == 2 and tc.stage2_mask_rate > 0:
        rng = np.random.default_rng(seed)
        meas, masks = _stage2_measurements(data.target, params.config.window.tau,
                                           tc.stage2_mask_rate, tc.stage2_noise_std, rng)
    _, rep = losses(p, params.config, filt, data.lookback, data.target, stage, tc, meas, masks)
    return rep


def _fit(params, filt, train, val, tc, stage, epochs, curve):
    cfg = params.config
    names = _trainable(params, stage)
    rng = np.random.default_rng(tc.seed + 1000 * stage)
    opt = Adam(tc.learning_rate)
    arrays = dict(params.arrays)
    val_small = val.subsample(tc.val_samples, tc.seed) if val is not None else None
    best = (np.inf, params.copy())
    stale = 0
    order, pos = rng.permutation(len(train)), 0
    bs = min(tc.batch_size, len(train))
    for epoch in range(epochs):
        nb = tc.steps_per_epoch or max(1, len(train) // bs)
        sums = np.zeros(3)
        for b in range(nb):
            if pos + bs > len(order):
                order, pos = rng.permutation(len(train)), 0
            idx = order[pos:pos + bs]
            pos += bs
            batch = train.take(idx)
            meas = masks = None
            if stage == 2 and tc.stage2_mask_rate > 0:
                meas, masks = _stage2_measurements(batch.target, cfg.window.tau,
                                                   tc.stage2_mask_rate, tc.stage2_noise_std, rng)
            with T.Tape() as tape:
                leaves = {k: (tape.watch(T.Tensor(v)) if k in names else T.Tensor(v))
                          for k, v in arrays.items()}
                try:
                    total, rep = losses(leaves, cfg, filt, batch.lookback, batch.target, stage, tc,
                                        meas, masks)
                except (T.NonFiniteError, M.RolloutError) as exc:
                    raise TrainingError(f"stage {stage}: diverged at epoch {epoch}, step {b}: {exc}") from exc
                grads = tape.backward(total, wrt={k: leaves[k] for k in names})
            if not np.isfinite(rep.total):
                raise TrainingError(f"stage {stage}: non-finite loss at epoch {epoch}, step {b}")
            grads, _ = clip_by_global_norm(grads, tc.clip_norm)
            arrays = opt.step(arrays, grads)
            sums += (rep.recon, rep.pred, rep.align)
        sums /= nb
        row = {"stage": stage, "epoch": epoch, "recon": sums[0], "pred": sums[1], "align": sums[2]}
        candidate = params.with_arrays(arrays)
        if val_small is not None:
            row["val_pred"] = evaluate(candidate, filt, val_small, stage, tc, seed=tc.seed).pred
        else:
            row["val_pred"] = row["pred"]
        curve.append(row)
        log.info("stage %d epoch %d: %s", stage, epoch, row)
        if row["val_pred"] < best[0]:
            best = (row["val_pred"], candidate.copy())
            stale = 0
        else:
            stale += 1
            if tc.halve_on_plateau and stale % tc.halve_on_plateau == 0:
                opt.lr *= 0.5
            if tc.early_stop and stale >= tc.early_stop:
                break
    return best[1]


def train_stage1(params, filt, train, val=None, tc=None, curve=None):
    """Minimize recon + lambda_pred * pred + lambda_align * align; gains stay untouched.

    Returns the parameters with the lowest validation prediction loss.
    """
    tc = tc or TrainConfig()
    curve = [] if curve is None else curve
    return _fit(params, filt, train, val, tc, 1, tc.stage1_epochs, curve)


def train_stage2(params, filt, train, val=None, tc=None, curve=None):
    """Train every parameter on the prediction loss with synthetic measured windows."""
    tc = tc or TrainConfig()
    curve = [] if curve is None else curve
    return _fit(params, filt, train, val, tc, 2, tc.stage2_epochs, curve)


def write_curve(curve, path):
    fields = ["stage", "epoch", "recon", "pred", "align", "val_pred"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in curve:
            w.writerow({k: row.get(k, "") for k in fields})
