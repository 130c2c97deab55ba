"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested loops, two-pass statistics)
and shares no code with the package under test.
"""

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Direct sliding-window convolution, quadruple loop."""
    n, c, h, wd = x.shape
    o, ci, k, _ = w.shape
    assert ci == c
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    patch = xp[ni, :, yi * stride:yi * stride + k,
                               xi * stride:xi * stride + k]
                    out[ni, oi, yi, xi] = np.sum(patch * w[oi])
            if b is not None:
                out[ni, oi] += b[oi]
    return out


def naive_conv_transpose2d(y, w, b=None, stride=1, padding=0, out_hw=None):
    """Scatter-based transposed convolution (adjoint of naive_conv2d)."""
    n, o, h, wd = y.shape
    ow_, ci, k, _ = w.shape
    assert ow_ == o
    if out_hw is None:
        out_hw = ((h - 1) * stride - 2 * padding + k,
                  (wd - 1) * stride - 2 * padding + k)
    oh, ow = out_hw
    xp = np.zeros((n, ci, oh + 2 * padding, ow + 2 * padding), dtype=y.dtype)
    for ni in range(n):
        for oi in range(o):
            for yi in range(h):
                for xi in range(wd):
                    xp[ni, :, yi * stride:yi * stride + k,
                       xi * stride:xi * stride + k] += y[ni, oi, yi, xi] * w[oi]
    out = xp[:, :, padding:padding + oh, padding:padding + ow]
    if b is not None:
        out = out + b.reshape(1, ci, 1, 1)
    return out


def naive_matmul(a, b):
    """Triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def two_pass_instance_norm(x, scale, shift, eps=1e-5):
    """Explicit per-(sample, channel) mean/variance normalization."""
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for ni in range(n):
        for ci in range(c):
            plane = x[ni, ci]
            mu = plane.mean()
            var = ((plane - mu) ** 2).mean()
            out[ni, ci] = (plane - mu) / np.sqrt(var + eps) * scale[ci] + shift[ci]
    return out


def scalar_bce_sum(probs, labels, eps=1e-7):
    """Per-term scalar-loop BCE, summed over attributes, mean over batch."""
    n, c = probs.shape
    total = 0.0
    for i in range(n):
        for j in range(c):
            p = min(max(float(probs[i, j]), eps), 1.0 - eps)
            y = float(labels[i, j])
            total += -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return total / n


def scalar_adam(x0, grad_fn, lr, beta1, beta2, eps, steps):
    """Reference scalar ADAM trajectory with bias correction."""
    x, m, v = float(x0), 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        trace.append(x)
    return np.array(trace)


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function over array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def psnr_255(a, b, cap=99.0):
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse <= 255.0 ** 2 * 10 ** (-cap / 10.0):
        return cap
    return 10.0 * np.log10(255.0 ** 2 / mse)
