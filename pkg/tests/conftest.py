"""Shared test oracles: direct nested-loop convolution implementations and
a central-difference helper, deliberately independent of the library's
im2col/scatter code paths."""

import numpy as np
import pytest


def naive_conv2d(x, k, b, stride=1, dilation=1, padding="same"):
    """Direct-summation 2-D convolution oracle (cross-correlation)."""
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    keh = (kh - 1) * dilation + 1
    kew = (kw - 1) * dilation + 1
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        ph = max((ho - 1) * stride + keh - h, 0)
        pw = max((wo - 1) * stride + kew - w, 0)
        pt, pl = ph // 2, pw // 2
    elif padding == "valid":
        ho = (h - keh) // stride + 1
        wo = (w - kew) // stride + 1
        pt = pl = 0
    else:
        raise ValueError(padding)
    out = np.zeros((ho, wo, cout), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            for co in range(cout):
                acc = 0.0
                for u in range(kh):
                    for v in range(kw):
                        yy = i * stride + u * dilation - pt
                        xx = j * stride + v * dilation - pl
                        if 0 <= yy < h and 0 <= xx < w:
                            for ci in range(cin):
                                acc += float(x[yy, xx, ci]) * float(k[u, v, ci, co])
                out[i, j, co] = acc + float(b[co])
    return out.astype(x.dtype)


def naive_conv2d_transpose(x, k, b, stride):
    """Scatter-summation transposed-convolution oracle."""
    h, w, cin = x.shape
    kh, kw, cout, _ = k.shape
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    out = np.zeros((ho, wo, cout), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for u in range(kh):
                for v in range(kw):
                    for co in range(cout):
                        for ci in range(cin):
                            out[i * stride + u, j * stride + v, co] += \
                                float(x[i, j, ci]) * float(k[u, v, co, ci])
    out += np.asarray(b, dtype=np.float64)
    return out.astype(x.dtype)


def central_diff(f, arr, coords, eps=1e-5):
    """Central finite differences of scalar f() w.r.t. arr at flat coords."""
    flat = arr.reshape(-1)
    out = {}
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[int(i)] = (fp - fm) / (2.0 * eps)
    return out


def rel_err(analytic, numeric):
    return abs(analytic - numeric) / max(1e-3, abs(analytic), abs(numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
