"""Reference computations the tests check the package against.

Nothing here imports the code under test's differentiation or FFT paths.
"""

import numpy as np


def naive_dft(x):
    x = np.asarray(x, dtype=complex)
    n = len(x)
    k = np.arange(n)
    w = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return w @ x


def naive_idft(spec):
    spec = np.asarray(spec, dtype=complex)
    n = len(spec)
    k = np.arange(n)
    w = np.exp(2j * np.pi * np.outer(k, k) / n)
    return (w @ spec) / n


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / (np.linalg.norm(a) + 1e-8))


def central_diff(f, x, eps=1e-5):
    """Per-coordinate central differences of scalar f at array x.

    Also returns a flag that is True when one-sided differences disagree
    badly somewhere, i.e. a kink of a piecewise-linear map lies within eps.
    """
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    f0 = f(x)
    kink = False
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        if abs(fwd - bwd) > 1e-3 * (abs(g[i]) + 1.0):
            kink = True
    return g, kink


def directional_diff(f, x, v, eps=1e-5):
    f0 = f(x)
    fp, fm = f(x + eps * v), f(x - eps * v)
    d = (fp - fm) / (2 * eps)
    kink = abs((fp - f0) - (f0 - fm)) / eps > 1e-3 * (abs(d) + 1.0)
    return d, kink


def forward_diff_jacobian(f, x, eps=1e-6):
    """Jacobian of vector map f, one column per forward difference."""
    x = np.array(x, dtype=float).ravel()
    y0 = np.asarray(f(x), dtype=float).ravel()
    jac = np.zeros((y0.size, x.size))
    for j in range(x.size):
        xp = x.copy()
        xp[j] += eps
        jac[:, j] = (np.asarray(f(xp), dtype=float).ravel() - y0) / eps
    return jac


def gru_reference(x, h, wx, wh, bx, bh):
    """Plain-float GRU update for a 1-dimensional cell."""
    import math

    def sig(a):
        return 1.0 / (1.0 + math.exp(-a))

    r = sig(x * wx[0] + bx[0] + h * wh[0] + bh[0])
    u = sig(x * wx[1] + bx[1] + h * wh[1] + bh[1])
    n = math.tanh(x * wx[2] + bx[2] + r * (h * wh[2] + bh[2]))
    return (1 - u) * n + u * h


def spectral_radius(k, iters=500, seed=0):
    """Power iteration on K^T K to bound growth, plus eigenvalue magnitude."""
    return max(abs(np.linalg.eigvals(k)))


def check_gradients(fn, arrays, rng, eps=1e-5, coords=None):
    """Compare tape gradients of scalar ``fn(dict of Tensors)`` with central differences.

    Returns the worst relative error over all arrays, or None when the point
    sits within eps of a ReLU kink (the caller should redraw).  ``coords``
    limits the per-array check to that many random coordinates.
    """
    from koda import tensor as T

    _, grads = T.value_and_grad(fn, arrays)

    worst = 0.0
    for name, arr in arrays.items():
        def f(a, name=name):
            vals = {k: T.Tensor(a if k == name else v) for k, v in arrays.items()}
            return float(fn(vals).data)

        if coords is None or arr.size <= coords:
            fd, kink = central_diff(f, arr, eps)
            if kink:
                return None
            worst = max(worst, rel_err(grads[name], fd))
        else:
            flat = rng.choice(arr.size, coords, replace=False)
            got, want = [], []
            for i in flat:
                e = np.zeros(arr.size)
                e[i] = 1.0
                d, kink = directional_diff(f, arr, e.reshape(arr.shape), eps)
                if kink:
                    return None
                got.append(grads[name].ravel()[i])
                want.append(d)
            worst = max(worst, rel_err(got, want))
    return worst


def check_directional(fn, arrays, rng, eps=1e-5):
    """Tape gradient against a central difference along one random direction.

    Cheap enough for blocks with many parameters; returns the relative error
    or None near a kink.
    """
    from koda import tensor as T

    _, grads = T.value_and_grad(fn, arrays)
    direction = {k: rng.normal(size=np.shape(v)) for k, v in arrays.items()}
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
    direction = {k: d / norm for k, d in direction.items()}

    def f(t):
        return float(fn({k: T.Tensor(v + t * direction[k]) for k, v in arrays.items()}).data)

    want, kink = directional_diff(f, 0.0, 1.0, eps)
    if kink:
        return None
    got = sum(float(np.sum(grads[k] * direction[k])) for k in arrays)
    return abs(got - want) / (abs(want) + 1e-8)
