"""2-D convolution, transposed convolution, and global pooling operators.

All operators follow the cross-correlation convention (no kernel flip) and
HWC layout with an optional leading batch axis. ``same`` padding is
symmetric zero padding; when the required total is odd, the extra row or
column goes to the bottom/right. Convolutions are evaluated as an im2col
patch extraction followed by one matrix multiply, which keeps the
per-output-scalar reduction order fixed and runs deterministic at a fixed
BLAS thread count.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, accumulate_grad, make_node, _trace_indices


def _with_batch(data: np.ndarray):
    """Return (batched view, had_batch flag); 3-D input gets batch size 1."""
    if data.ndim == 3:
        return data[None], False
    if data.ndim == 4:
        return data, True
    raise ValueError(f"expected 3-D (H,W,C) or 4-D (N,H,W,C) input, got shape {data.shape}")


def _same_padding(extent: int, k_eff: int, stride: int):
    out = -(-extent // stride)  # ceil division
    total = max((out - 1) * stride + k_eff - extent, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h, w, kh, kw, stride, dilation, padding):
    ke_h = (kh - 1) * dilation + 1
    ke_w = (kw - 1) * dilation + 1
    if padding == "same":
        ho, pt, pb = _same_padding(h, ke_h, stride)
        wo, pl, pr = _same_padding(w, ke_w, stride)
    elif padding == "valid":
        if h < ke_h or w < ke_w:
            raise ValueError(f"input {h}x{w} smaller than effective kernel {ke_h}x{ke_w}")
        ho = (h - ke_h) // stride + 1
        wo = (w - ke_w) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return ho, wo, ke_h, ke_w, pt, pb, pl, pr


def _im2col(xb: np.ndarray, kh, kw, stride, dilation, geom):
    """Extract patches with axes ordered (N, Ho, Wo, kh, kw, Cin)."""
    ho, wo, ke_h, ke_w, pt, pb, pl, pr = geom
    xp = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (ke_h, ke_w), axis=(1, 2))
    win = win[:, ::stride, ::stride, :, ::dilation, ::dilation]
    win = win[:, :ho, :wo]
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return patches, xp.shape


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           dilation: int = 1, padding: str = "same") -> Tensor:
    """Strided, dilated 2-D convolution.

    x: (H, W, Cin) or (N, H, W, Cin); kernel: (kH, kW, Cin, Cout);
    bias: (Cout,). With ``same`` padding and stride 1 the spatial dims are
    preserved regardless of dilation; with stride s they become ceil(H/s).
    """
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    if not isinstance(dilation, int) or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation!r}")
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be 4-D (kH,kW,Cin,Cout), got shape {kernel.shape}")
    xb, batched = _with_batch(x.data)
    n, h, w, cin = xb.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")

    geom = _conv_geometry(h, w, kh, kw, stride, dilation, padding)
    ho, wo = geom[0], geom[1]
    patches, padded_shape = _im2col(xb, kh, kw, stride, dilation, geom)
    pmat = patches.reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = pmat @ kmat + bias.data
    out = out.reshape(n, ho, wo, cout)
    if not batched:
        out = out[0]

    node = make_node(out, (x, kernel, bias), "conv2d")
    if node.requires_grad:
        pt, pl = geom[4], geom[6]

        def _bw(g):
            gb = g if batched else g[None]
            gmat = gb.reshape(n * ho * wo, cout)
            if kernel.requires_grad:
                accumulate_grad(kernel, (pmat.T @ gmat).reshape(kernel.shape))
            if bias.requires_grad:
                accumulate_grad(bias, gmat.sum(axis=0))
            if x.requires_grad:
                dpatch = (gmat @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
                dxp = np.zeros(padded_shape, dtype=g.dtype)
                for u in range(kh):
                    for v in range(kw):
                        dxp[:, u * dilation: u * dilation + (ho - 1) * stride + 1: stride,
                            v * dilation: v * dilation + (wo - 1) * stride + 1: stride, :] \
                            += dpatch[:, :, :, u, v, :]
                dx = dxp[:, pt:pt + h, pl:pl + w, :]
                accumulate_grad(x, dx if batched else dx[0])
        node._backward = _bw
    return node


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution: the adjoint of a stride-s valid convolution.

    x: (H, W, Cin) or (N, H, W, Cin); kernel: (kH, kW, Cout, Cin);
    bias: (Cout,). Output spatial dims are ((H-1)*s + kH, (W-1)*s + kW),
    which equals (H*s, W*s) for kernel size equal to stride. With the
    channel-transposed kernel layout, ``<conv2d(x,k,valid,s), y> ==
    <x, conv2d_transpose(y,k,s)>`` holds for the same kernel array.
    """
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be 4-D (kH,kW,Cout,Cin), got shape {kernel.shape}")
    xb, batched = _with_batch(x.data)
    n, h, w, cin = xb.shape
    kh, kw, cout, kcin = kernel.shape
    if kcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} != ({cout},)")

    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    out = np.zeros((n, ho, wo, cout), dtype=xb.dtype)
    kd = kernel.data
    for u in range(kh):
        for v in range(kw):
            # scatter: out[i*s+u, j*s+v, co] += sum_ci x[i, j, ci] * k[u, v, co, ci]
            out[:, u: u + (h - 1) * stride + 1: stride,
                v: v + (w - 1) * stride + 1: stride, :] += xb @ kd[u, v].T
    out += bias.data
    if not batched:
        out = out[0]

    node = make_node(out, (x, kernel, bias), "conv2d_transpose")
    if node.requires_grad:
        def _bw(g):
            gb = g if batched else g[None]
            if bias.requires_grad:
                accumulate_grad(bias, gb.sum(axis=(0, 1, 2)))
            if kernel.requires_grad:
                dk = np.empty_like(kd)
                for u in range(kh):
                    for v in range(kw):
                        slab = gb[:, u: u + (h - 1) * stride + 1: stride,
                                  v: v + (w - 1) * stride + 1: stride, :]
                        dk[u, v] = np.tensordot(slab, xb, axes=([0, 1, 2], [0, 1, 2]))
                accumulate_grad(kernel, dk)
            if x.requires_grad:
                dx = np.zeros_like(xb)
                for u in range(kh):
                    for v in range(kw):
                        slab = gb[:, u: u + (h - 1) * stride + 1: stride,
                                  v: v + (w - 1) * stride + 1: stride, :]
                        dx += slab @ kd[u, v]
                accumulate_grad(x, dx if batched else dx[0])
        node._backward = _bw
    return node


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (H,W,C) -> (C,) or (N,H,W,C) -> (N,C).

    Accumulates in float64 over a canonical contiguous layout so the result
    is independent of the input's memory order and exactly equivariant
    under channel and spatial permutations of float32 maps.
    """
    xb, batched = _with_batch(x.data)
    n, h, w, c = xb.shape
    if h < 1 or w < 1:
        raise ValueError("empty spatial extent")
    out = np.ascontiguousarray(xb).mean(axis=(1, 2), dtype=np.float64)
    out = out.astype(xb.dtype, copy=False)
    if not batched:
        out = out[0]
    node = make_node(out, (x,), "global_avg_pool")
    if node.requires_grad:
        def _bw(g):
            gb = g if batched else g[None]
            dx = np.broadcast_to(gb[:, None, None, :] / (h * w), xb.shape)
            accumulate_grad(x, dx if batched else dx[0])
        node._backward = _bw
    return node


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max; gradient routes to the first max position."""
    xb, batched = _with_batch(x.data)
    n, h, w, c = xb.shape
    if h < 1 or w < 1:
        raise ValueError("empty spatial extent")
    flat = np.ascontiguousarray(xb).reshape(n, h * w, c)
    idx = flat.argmax(axis=1)
    _trace_indices(idx)
    out = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
    if not batched:
        out = out[0]
    node = make_node(out, (x,), "global_max_pool")
    if node.requires_grad:
        def _bw(g):
            gb = g if batched else g[None]
            dflat = np.zeros((n, h * w, c), dtype=gb.dtype)
            np.put_along_axis(dflat, idx[:, None, :], gb[:, None, :], axis=1)
            dx = dflat.reshape(xb.shape)
            accumulate_grad(x, dx if batched else dx[0])
        node._backward = _bw
    return node
