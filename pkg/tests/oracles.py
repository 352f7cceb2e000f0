"""Reference implementations the package is checked against.

Written directly from the definitions, with loops and the math module, and
frozen: nothing here imports from adtransfer.
"""
import math

import numpy as np

# sigmoid(1), and 2 * log(1/2): the weighted objective with C = 1/2 and w = 1 everywhere
SIGMOID_ONE = 0.7310585786300049
LOG_HALF_TWICE = -1.3862943611198906


def sigmoid(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def weight(loss: float, eta: float, beta: float) -> float:
    return sigmoid(eta * loss + beta)


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def pairwise_auc(scores, labels) -> float:
    """Mann-Whitney probability P(s+ > s-) + 1/2 P(s+ == s-), by double loop."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def conv2d(x, w, stride, padding):
    """Direct cross-correlation, x [N,C,H,W], w [O,C,k,k]."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, oc, i, j] = np.sum(patch * w[oc])
    return out


def deconv2d(x, w, stride, padding, output_padding=0):
    """Transposed convolution by scattering every input pixel, w [Cin,Cout,k,k]."""
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    canvas = np.zeros((n, o, ho + 2 * padding + k, wo + 2 * padding + k))
    for b in range(n):
        for ic in range(c):
            for i in range(h):
                for j in range(wd):
                    canvas[b, :, i * stride:i * stride + k, j * stride:j * stride + k] += x[b, ic, i, j] * w[ic]
    return canvas[:, :, padding:padding + ho, padding:padding + wo]
