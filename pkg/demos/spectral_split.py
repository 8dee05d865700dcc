"""Split a noisy two-tone signal into a dominant part and a residual.

The filter keeps the frequency bins with the largest mean amplitude over
sliding windows of the training data.  Whatever it keeps goes to the linear
(Koopman) branch of the model; the rest goes to the recurrent branch.
"""
import numpy as np

from koda import spectral

rng = np.random.default_rng(0)
t = np.arange(2000)
slow = np.sin(2 * np.pi * t / 48)
fast = 0.3 * np.sin(2 * np.pi * t / 6 + 1.0)
noise = 0.1 * rng.standard_normal(len(t))
x = (slow + fast + noise)[:, None]

tau = 48
filt = spectral.fit_filter(x, tau, dominance_fraction=0.08)
print("kept bins:", np.flatnonzero(filt.keep_mask[0]).tolist(), "of", spectral.n_bins(tau))

window = x[:tau]
parts = spectral.disentangle(window, filt)

# the two parts add back up to the window, to rounding
print("max reconstruction error:", np.abs(parts.dominant + parts.residual - window).max())

# the dominant part tracks the slow tone; the residual holds the rest
print("dominant vs slow tone, rms:", np.sqrt(np.mean((parts.dominant[:, 0] - slow[:tau]) ** 2)))
print("residual rms:", np.sqrt(np.mean(parts.residual ** 2)))
