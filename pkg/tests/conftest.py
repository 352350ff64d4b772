"""Shared test utilities: finite-difference gradients and reference oracles.

The finite-difference helper perturbs raw parameter entries and re-runs the
forward function, so it is independent of every backward rule it checks.
The naive convolution oracle is a plain scalar loop accumulating in the
same dtype as the production code, which lets tests assert bit-identical
agreement in deterministic mode.
"""

from __future__ import annotations

import numpy as np
import pytest

from dnet.tensor import Tensor


def fd_grad_entries(loss_fn, t: Tensor, entries, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of loss_fn() w.r.t. selected entries of t."""
    out = np.empty(len(entries), dtype=np.float64)
    flat = t.data.reshape(-1)
    for row, idx in enumerate(entries):
        original = flat[idx]
        flat[idx] = original + eps
        lp = loss_fn()
        flat[idx] = original - eps
        lm = loss_fn()
        flat[idx] = original
        out[row] = (lp - lm) / (2.0 * eps)
    return out


def fd_full_grad(loss_fn, t: Tensor, eps: float = 1e-4) -> np.ndarray:
    grad = fd_grad_entries(loss_fn, t, range(t.data.size), eps)
    return grad.reshape(t.shape)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float((np.abs(a - f) / denom).max())


def conv2d_naive(x, w, bias, stride, dilation, pads):
    """Direct sliding-window convolution with scalar tap-ordered accumulation.

    Operates on raw arrays; every multiply and add happens one tap at a time
    in (kernel row, kernel col, input channel) order and in the input dtype,
    mirroring the arithmetic order of the deterministic production path.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    n, h, width, cin = x.shape
    kh, kw, cin2, cout = w.shape
    assert cin == cin2
    pt, pb, pl, pr = pads
    kdh = kh + (kh - 1) * (dilation - 1)
    kdw = kw + (kw - 1) * (dilation - 1)
    hp, wp = h + pt + pb, width + pl + pr
    ho = (hp - kdh) // stride + 1
    wo = (wp - kdw) // stride + 1
    out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    zero = x.dtype.type(0)
    for nn in range(n):
        for i in range(ho):
            for j in range(wo):
                for c in range(cout):
                    acc = bias[0, 0, 0, c] if bias is not None else zero
                    for a in range(kh):
                        for b in range(kw):
                            for m in range(cin):
                                ii = i * stride + a * dilation - pt
                                jj = j * stride + b * dilation - pl
                                if 0 <= ii < h and 0 <= jj < width:
                                    acc = acc + x[nn, ii, jj, m] * w[a, b, m, c]
                                else:
                                    acc = acc + zero * w[a, b, m, c]
                    out[nn, i, j, c] = acc
    return out


def zero_insert_kernel(w: np.ndarray, dilation: int) -> np.ndarray:
    """Insert dilation-1 zeros between kernel taps along both spatial axes."""
    kh, kw, cin, cout = w.shape
    kdh = kh + (kh - 1) * (dilation - 1)
    kdw = kw + (kw - 1) * (dilation - 1)
    out = np.zeros((kdh, kdw, cin, cout), dtype=w.dtype)
    out[::dilation, ::dilation] = w
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
