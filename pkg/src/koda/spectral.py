"""Corpus-level Fourier filter and the exact dominant/residual window split."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FILTER_FORMAT = "koda-filter/1"


def fft(signal):
    """Discrete Fourier transform of a length-n real or complex signal."""
    return np.fft.fft(np.asarray(signal), axis=0)


def ifft(spectrum):
    return np.fft.ifft(np.asarray(spectrum), axis=0)


def n_bins(window_length):
    return window_length // 2 + 1


@dataclass(frozen=True)
class SpectralFilter:
    window_length: int
    keep_mask: np.ndarray  # (channel_count, n_bins) bool
    dominance_fraction: float = 0.5
    per_channel: bool = True
    degenerate: bool = False
    _proj: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        mask = np.asarray(self.keep_mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        if mask.shape[1] != n_bins(self.window_length):
            raise ValueError(
                f"mask has {mask.shape[1]} bins, window length {self.window_length} "
                f"needs {n_bins(self.window_length)}"
            )
        mask.setflags(write=False)
        object.__setattr__(self, "keep_mask", mask)
        object.__setattr__(self, "_proj", _projection(mask, self.window_length))

    @property
    def channel_count(self):
        return self.keep_mask.shape[0]

    @property
    def complement_mask(self):
        return ~self.keep_mask

    @property
    def projection(self):
        """(C, tau, tau) real matrices with ``dominant = P[c] @ x[:, c]``."""
        return self._proj

    def full_mask(self, keep=True):
        """Two-sided mask of length tau, mirrored so the spectrum stays Hermitian."""
        tau = self.window_length
        idx = np.minimum(np.arange(tau), tau - np.arange(tau))
        m = self.keep_mask if keep else self.complement_mask
        return m[:, idx]

    def to_dict(self):
        return {
            "format": FILTER_FORMAT,
            "window_length": self.window_length,
            "channel_count": self.channel_count,
            "dominance_fraction": self.dominance_fraction,
            "per_channel": self.per_channel,
            "degenerate": self.degenerate,
            "masks": self.keep_mask.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FILTER_FORMAT:
            raise ValueError(f"unsupported filter format {d.get('format')!r}")
        masks = np.asarray(d["masks"], dtype=bool)
        if masks.shape[0] != d["channel_count"]:
            raise ValueError("channel_count does not match stored masks")
        return cls(d["window_length"], masks, d["dominance_fraction"],
                   d["per_channel"], d.get("degenerate", False))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def passthrough(cls, window_length, channel_count=1):
        """All bins dominant (residual is identically zero)."""
        mask = np.ones((channel_count, n_bins(window_length)), dtype=bool)
        return cls(window_length, mask, 1.0)


def _projection(mask, tau):
    eye = np.eye(tau)
    spec = np.fft.rfft(eye, axis=0)  # (bins, tau)
    return np.stack([np.fft.irfft(spec * m[:, None], n=tau, axis=0) for m in mask])


def mean_amplitude(values, window_length, chunk=4096):
    """Mean one-sided amplitude spectrum over every sliding window, per channel."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    windows = np.lib.stride_tricks.sliding_window_view(values, window_length, axis=0)
    total = np.zeros((values.shape[1], n_bins(window_length)))
    for start in range(0, len(windows), chunk):
        total += np.abs(np.fft.rfft(windows[start:start + chunk], axis=-1)).sum(axis=0)
    return total / len(windows)


def fit_filter(values, window_length, dominance_fraction=0.5, per_channel=True):
    """Keep the ``ceil(fraction * bins)`` highest-amplitude bins (DC always kept).

    ``values`` is a (T, C) training array; amplitudes are averaged over every
    length-``window_length`` sliding window.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if not 0.0 < dominance_fraction < 1.0:
        raise ValueError(f"dominance_fraction must lie in (0, 1), got {dominance_fraction}")
    if len(values) < window_length:
        raise ValueError(f"series of length {len(values)} is shorter than the window {window_length}")
    amp = mean_amplitude(values, window_length)
    bins = amp.shape[1]
    k = math.ceil(dominance_fraction * bins)
    degenerate = not np.any(values)
    if degenerate:
        warnings.warn("all-zero training series: filter keeps only the DC bin", stacklevel=2)
        mask = np.zeros_like(amp, dtype=bool)
        mask[:, 0] = True
        return SpectralFilter(window_length, mask, dominance_fraction, per_channel, True)
    if not per_channel:
        amp = np.repeat(amp.mean(axis=0, keepdims=True), amp.shape[0], axis=0)
    mask = np.zeros_like(amp, dtype=bool)
    mask[:, 0] = True
    # stable sort keeps ties in bin order, so the choice is deterministic
    order = np.argsort(-amp[:, 1:], axis=1, kind="stable") + 1
    for c in range(amp.shape[0]):
        mask[c, order[c, :k - 1]] = True
    return SpectralFilter(window_length, mask, dominance_fraction, per_channel)


@dataclass(frozen=True)
class DisentangledWindow:
    dominant: np.ndarray
    residual: np.ndarray
    source: np.ndarray


def disentangle(window, filt):
    """Split a (tau, C) window into dominant and residual parts through the FFT."""
    window = np.asarray(window, dtype=float)
    if window.ndim == 1:
        window = window[:, None]
    tau, c = window.shape
    if tau != filt.window_length:
        raise ValueError(f"window length {tau} does not match filter length {filt.window_length}")
    if c != filt.channel_count:
        if filt.channel_count != 1:
            raise ValueError(f"window has {c} channels, filter has {filt.channel_count}")
    spec = fft(window)
    keep = filt.full_mask(True).T
    drop = filt.full_mask(False).T
    dominant = ifft(spec * keep).real
    residual = ifft(spec * drop).real
    return DisentangledWindow(dominant, residual, window)


def split_batch(x, filt):
    """Dominant part of a (..., C, tau) array via the precomputed projections."""
    p = filt.projection
    if p.shape[0] == 1:
        return x @ p[0].T
    return (x[..., None, :] @ np.swapaxes(p, -1, -2))[..., 0, :]
