"""Dense float64 tensor kernels.

All tensors are plain C-contiguous ``numpy`` arrays of float64; the canonical
activation layout is (batch, channel, depth, height, width).  Every function
here is a pure, deterministic map from inputs to a freshly allocated output,
so results are bit-identical across repeated calls and safe to share between
threads.  The autodiff layer wraps these kernels with adjoint rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when tensor shapes or convolution geometry are inconsistent."""


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


def as_f64(x):
    """Return ``x`` as a C-contiguous float64 array (no copy when already one).

    Unlike ``np.ascontiguousarray`` this preserves 0-d scalars.
    """
    a = np.asarray(x, dtype=np.float64)
    if not a.flags.c_contiguous:
        a = np.ascontiguousarray(a)
    return a


def _triple(v):
    if isinstance(v, (tuple, list)):
        _require(len(v) == 3, f"expected 3 per-axis values, got {v!r}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3D cross-correlation: kernel extents, per-axis stride and
    zero padding, and group count (1 = dense, = channels for depthwise)."""

    kernel: tuple
    stride: tuple = (1, 1, 1)
    pad: tuple = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "pad", _triple(self.pad))
        _require(all(k >= 1 for k in self.kernel), f"kernel extents must be >= 1, got {self.kernel}")
        _require(all(s >= 1 for s in self.stride), f"strides must be >= 1, got {self.stride}")
        _require(all(p >= 0 for p in self.pad), f"padding must be >= 0, got {self.pad}")
        _require(self.groups >= 1, f"group count must be >= 1, got {self.groups}")

    def out_shape(self, spatial):
        """Output spatial extents: floor((n + 2*pad - k)/stride) + 1 per axis."""
        out = []
        for ax, (n, k, s, p) in enumerate(zip(spatial, self.kernel, self.stride, self.pad)):
            o = (n + 2 * p - k) // s + 1
            if o < 1:
                raise ShapeError(
                    f"zero-sized conv output on spatial axis {ax}: "
                    f"extent {n}, kernel {k}, stride {s}, pad {p}"
                )
            out.append(o)
        return tuple(out)


def _check_conv_args(x, w, b, spec):
    _require(x.ndim == 5, f"conv3d input must be 5-D (B,C,D,H,W), got rank {x.ndim}")
    _require(w.ndim == 5, f"conv3d weights must be 5-D (Cout,Cin/g,kd,kh,kw), got rank {w.ndim}")
    cin = x.shape[1]
    cout = w.shape[0]
    g = spec.groups
    _require(cin % g == 0, f"groups {g} does not divide input channels {cin}")
    _require(cout % g == 0, f"groups {g} does not divide output channels {cout}")
    _require(
        w.shape[1] == cin // g,
        f"weight channel extent {w.shape[1]} != Cin/groups = {cin}//{g}",
    )
    _require(
        tuple(w.shape[2:]) == spec.kernel,
        f"weight kernel extents {tuple(w.shape[2:])} != spec kernel {spec.kernel}",
    )
    _require(b.shape == (cout,), f"bias shape {b.shape} != ({cout},)")


def _pad_input(x, pad):
    if any(pad):
        pd, ph, pw = pad
        return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    return x


def _window_view(xp, kernel, stride, out_sp):
    """Strided view (B,C,Do,Ho,Wo,kd,kh,kw) over the padded input; no copy."""
    bb, cc, _, _, _ = xp.shape
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_sp
    st = xp.strides
    return as_strided(
        xp,
        shape=(bb, cc, do, ho, wo, kd, kh, kw),
        strides=(st[0], st[1], st[2] * sd, st[3] * sh, st[4] * sw, st[2], st[3], st[4]),
        writeable=False,
    )


def conv3d(x, w, b, spec: ConvSpec):
    """3D cross-correlation over zero-padded input.

    x: (B,Cin,D,H,W), w: (Cout,Cin/groups,kd,kh,kw), b: (Cout,).
    Returns (B,Cout,D',H',W') with the primed extents given by
    ``spec.out_shape``.  Grouped convolution splits channels into
    ``spec.groups`` independent blocks; groups == Cin == Cout is depthwise.
    """
    x = as_f64(x)
    w = as_f64(w)
    b = as_f64(b)
    _check_conv_args(x, w, b, spec)
    bsz, cin = x.shape[0], x.shape[1]
    cout = w.shape[0]
    out_sp = spec.out_shape(x.shape[2:])
    xp = _pad_input(x, spec.pad)
    out = np.empty((bsz, cout) + out_sp)

    g = spec.groups
    if g == cin and cout == cin:
        # depthwise fast path: one filter per channel, accumulated over offsets
        _depthwise_forward(xp, w, spec, out_sp, out)
    elif spec.stride == (1, 1, 1):
        _unit_stride_forward(xp, w, spec, out_sp, out)
    else:
        cig = cin // g
        cog = cout // g
        view = _window_view(xp, spec.kernel, spec.stride, out_sp)
        n = bsz * int(np.prod(out_sp))
        kvol = int(np.prod(spec.kernel))
        for gi in range(g):
            cols = view[:, gi * cig:(gi + 1) * cig]
            cols = cols.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n, cig * kvol)
            wmat = w[gi * cog:(gi + 1) * cog].reshape(cog, cig * kvol)
            og = cols @ wmat.T
            out[:, gi * cog:(gi + 1) * cog] = og.reshape(
                (bsz,) + out_sp + (cog,)
            ).transpose(0, 4, 1, 2, 3)
    out += b[None, :, None, None, None]
    return np.ascontiguousarray(out)


def _unit_stride_forward(xp, w, spec, out_sp, out):
    """Stride-1 path: one GEMM over the whole padded volume per kernel-depth
    slice, then shifted-view accumulation.  Avoids the im2col gather, which
    costs more than the GEMM itself for desk-scale volumes."""
    bsz, cin = xp.shape[0], xp.shape[1]
    cout = w.shape[0]
    grp = spec.groups
    cig, cog = cin // grp, cout // grp
    kd_, kh_, kw_ = spec.kernel
    do, ho, wo = out_sp
    np_flat = xp.shape[2] * xp.shape[3] * xp.shape[4]
    psp = xp.shape[2:]
    out[...] = 0.0
    for bi in range(bsz):
        xb = xp[bi].reshape(cin, np_flat)
        for gi in range(grp):
            xg = xb[gi * cig:(gi + 1) * cig]
            wg = w[gi * cog:(gi + 1) * cog]
            og = out[bi, gi * cog:(gi + 1) * cog]
            for a in range(kd_):
                # (cog*kh*kw, cig) @ (cig, Np) in one shot for this depth slice
                wslice = wg[:, :, a].transpose(0, 2, 3, 1).reshape(cog * kh_ * kw_, cig)
                full = (wslice @ xg).reshape((cog, kh_, kw_) + psp)
                for bb in range(kh_):
                    for cc in range(kw_):
                        og += full[:, bb, cc, a:a + do, bb:bb + ho, cc:cc + wo]


def _depthwise_forward(xp, w, spec, out_sp, out):
    sd, sh, sw = spec.stride
    do, ho, wo = out_sp
    out[...] = 0.0
    for kd in range(spec.kernel[0]):
        for kh in range(spec.kernel[1]):
            for kw in range(spec.kernel[2]):
                v = xp[:, :, kd:kd + sd * do:sd, kh:kh + sh * ho:sh, kw:kw + sw * wo:sw]
                out += w[None, :, 0, kd, kh, kw, None, None, None] * v


def conv3d_backward(x, w, spec: ConvSpec, grad_out, need=(True, True, True)):
    """Adjoints of ``conv3d`` w.r.t. (input, weights, bias).

    ``need`` selects which of the three gradients to compute; unneeded ones
    come back as None.  ``grad_out`` has the forward output's shape.
    """
    x = as_f64(x)
    w = as_f64(w)
    g_out = as_f64(grad_out)
    bsz, cin = x.shape[0], x.shape[1]
    cout = w.shape[0]
    out_sp = spec.out_shape(x.shape[2:])
    _require(
        g_out.shape == (bsz, cout) + out_sp,
        f"grad shape {g_out.shape} != conv output shape {(bsz, cout) + out_sp}",
    )
    need_x, need_w, need_b = need
    gb = g_out.sum(axis=(0, 2, 3, 4)) if need_b else None

    gx_p = None
    gw = np.zeros_like(w) if need_w else None
    pd, ph, pw = spec.pad
    padded_sp = (x.shape[2] + 2 * pd, x.shape[3] + 2 * ph, x.shape[4] + 2 * pw)
    if need_x:
        gx_p = np.zeros((bsz, cin) + padded_sp)

    grp = spec.groups
    if grp == cin and cout == cin and (need_x or need_w):
        xp = _pad_input(x, spec.pad)
        _depthwise_backward(xp, w, spec, out_sp, g_out, gx_p, gw)
    elif spec.stride == (1, 1, 1) and (need_x or need_w):
        xp = _pad_input(x, spec.pad)
        _unit_stride_backward(xp, w, spec, out_sp, g_out, gx_p, gw)
    elif need_x or need_w:
        xp = _pad_input(x, spec.pad)
        view = _window_view(xp, spec.kernel, spec.stride, out_sp)
        cig = cin // grp
        cog = cout // grp
        n = bsz * int(np.prod(out_sp))
        kvol = int(np.prod(spec.kernel))
        sd, sh, sw = spec.stride
        do, ho, wo = out_sp
        for gi in range(grp):
            g2 = g_out[:, gi * cog:(gi + 1) * cog]
            g2 = g2.transpose(0, 2, 3, 4, 1).reshape(n, cog)
            wmat = w[gi * cog:(gi + 1) * cog].reshape(cog, cig * kvol)
            if need_w:
                cols = view[:, gi * cig:(gi + 1) * cig]
                cols = cols.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n, cig * kvol)
                gw[gi * cog:(gi + 1) * cog] = (g2.T @ cols).reshape(
                    (cog, cig) + spec.kernel
                )
            if need_x:
                gcols = (g2 @ wmat).reshape(
                    (bsz,) + out_sp + (cig,) + spec.kernel
                ).transpose(0, 4, 1, 2, 3, 5, 6, 7)
                tgt = gx_p[:, gi * cig:(gi + 1) * cig]
                for kd in range(spec.kernel[0]):
                    for kh in range(spec.kernel[1]):
                        for kw in range(spec.kernel[2]):
                            tgt[:, :, kd:kd + sd * do:sd, kh:kh + sh * ho:sh,
                                kw:kw + sw * wo:sw] += gcols[..., kd, kh, kw]

    gx = None
    if need_x:
        gx = np.ascontiguousarray(
            gx_p[:, :, pd:pd + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]]
        )
    return gx, gw, gb


def _unit_stride_backward(xp, w, spec, out_sp, g_out, gx_p, gw):
    """Stride-1 adjoints via the same whole-volume GEMM trick: scatter the
    output adjoint into a padded buffer per depth slice, then two GEMMs."""
    bsz, cin = xp.shape[0], xp.shape[1]
    cout = w.shape[0]
    grp = spec.groups
    cig, cog = cin // grp, cout // grp
    kd_, kh_, kw_ = spec.kernel
    do, ho, wo = out_sp
    psp = xp.shape[2:]
    np_flat = psp[0] * psp[1] * psp[2]
    buf = np.empty((cog, kh_, kw_) + psp)
    for bi in range(bsz):
        xb = xp[bi].reshape(cin, np_flat)
        for gi in range(grp):
            xg = xb[gi * cig:(gi + 1) * cig]
            wg = w[gi * cog:(gi + 1) * cog]
            gb_out = g_out[bi, gi * cog:(gi + 1) * cog]
            for a in range(kd_):
                buf[...] = 0.0
                for bb in range(kh_):
                    for cc in range(kw_):
                        buf[:, bb, cc, a:a + do, bb:bb + ho, cc:cc + wo] = gb_out
                bflat = buf.reshape(cog * kh_ * kw_, np_flat)
                if gw is not None:
                    gws = (bflat @ xg.T).reshape(cog, kh_, kw_, cig)
                    gw[gi * cog:(gi + 1) * cog, :, a] += gws.transpose(0, 3, 1, 2)
                if gx_p is not None:
                    wslice = wg[:, :, a].transpose(0, 2, 3, 1).reshape(
                        cog * kh_ * kw_, cig)
                    gx_p[bi, gi * cig:(gi + 1) * cig] += (
                        wslice.T @ bflat).reshape((cig,) + psp)


def _depthwise_backward(xp, w, spec, out_sp, g_out, gx_p, gw):
    sd, sh, sw = spec.stride
    do, ho, wo = out_sp
    for kd in range(spec.kernel[0]):
        for kh in range(spec.kernel[1]):
            for kw in range(spec.kernel[2]):
                sl = (
                    slice(None), slice(None),
                    slice(kd, kd + sd * do, sd),
                    slice(kh, kh + sh * ho, sh),
                    slice(kw, kw + sw * wo, sw),
                )
                if gw is not None:
                    gw[:, 0, kd, kh, kw] = (g_out * xp[sl]).sum(axis=(0, 2, 3, 4))
                if gx_p is not None:
                    gx_p[sl] += w[None, :, 0, kd, kh, kw, None, None, None] * g_out


def upsample_nearest3d(x, factors):
    """Replicate each voxel ``factors`` times along (D,H,W)."""
    x = as_f64(x)
    _require(x.ndim == 5, f"upsample input must be 5-D, got rank {x.ndim}")
    fd, fh, fw = _triple(factors)
    _require(fd >= 1 and fh >= 1 and fw >= 1, f"factors must be >= 1, got {factors}")
    out = x
    if fd > 1:
        out = out.repeat(fd, axis=2)
    if fh > 1:
        out = out.repeat(fh, axis=3)
    if fw > 1:
        out = out.repeat(fw, axis=4)
    return np.ascontiguousarray(out)


def upsample_nearest3d_backward(grad_out, factors):
    """Adjoint of nearest upsampling: sum gradients over each replication block."""
    g = as_f64(grad_out)
    fd, fh, fw = _triple(factors)
    b, c, d, h, w = g.shape
    _require(d % fd == 0 and h % fh == 0 and w % fw == 0,
             "grad extents not divisible by upsampling factors")
    g = g.reshape(b, c, d // fd, fd, h // fh, fh, w // fw, fw)
    return np.ascontiguousarray(g.sum(axis=(3, 5, 7)))


def reduce(x, axes, kind, keepdims=False):
    """Reduce over ``axes`` with kind in {sum, mean, max}.

    An empty ``axes`` set is the identity (a copy).  Reduced axes are removed
    unless ``keepdims`` keeps them with extent 1.
    """
    x = as_f64(x)
    axes = tuple(sorted(set(int(a) for a in axes)))
    for a in axes:
        _require(0 <= a < x.ndim, f"reduction axis {a} out of range for rank {x.ndim}")
    if not axes:
        return x.copy()
    if kind == "sum":
        return x.sum(axis=axes, keepdims=keepdims)
    if kind == "mean":
        return x.mean(axis=axes, keepdims=keepdims)
    if kind == "max":
        return x.max(axis=axes, keepdims=keepdims)
    raise ValueError(f"unknown reduction kind {kind!r}")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    # log(1 + e^x) without overflow for large |x|
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_UNARY = {
    "neg": lambda x: -x,
    "abs": np.abs,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "softplus": softplus,
}


def map_unary(x, fn, slope=0.01):
    """Elementwise map; fn in {neg, abs, exp, log, sqrt, sigmoid, tanh,
    softplus, leaky_relu}.  ``slope`` applies to leaky_relu only."""
    x = as_f64(x)
    if fn == "log":
        _require(bool(np.all(x > 0)), "log requires strictly positive input")
        return np.log(x)
    if fn == "leaky_relu":
        return np.where(x >= 0, x, slope * x)
    if fn == "sqrt":
        _require(bool(np.all(x >= 0)), "sqrt requires non-negative input")
        return np.sqrt(x)
    if fn in _UNARY:
        return _UNARY[fn](x)
    raise ValueError(f"unknown unary fn {fn!r}")


def broadcastable(sa, sb):
    """True when shapes have equal rank and agree per axis up to extent 1.

    A 0-d scalar is allowed against anything; ranks >= 1 are never promoted.
    """
    if len(sa) == 0 or len(sb) == 0:
        return True
    if len(sa) != len(sb):
        return False
    return all(a == b or a == 1 or b == 1 for a, b in zip(sa, sb))


def zip_binary(a, b, fn):
    """Elementwise binary op; fn in {add, sub, mul, div}.

    Shapes must match exactly or broadcast where one operand has extent 1 on
    an axis; rank promotion is not implied.  div raises on any zero
    denominator (callers needing guarded division handle it explicitly).
    """
    a = as_f64(a)
    b = as_f64(b)
    _require(
        broadcastable(a.shape, b.shape),
        f"shapes {a.shape} and {b.shape} are not broadcast-compatible "
        "(equal rank, per-axis equality or extent 1)",
    )
    if fn == "add":
        return a + b
    if fn == "sub":
        return a - b
    if fn == "mul":
        return a * b
    if fn == "div":
        _require(bool(np.all(b != 0)), "division by zero; use a guarded formulation")
        return a / b
    raise ValueError(f"unknown binary fn {fn!r}")


def pad_nd(x, pads):
    """Zero-pad with per-axis (before, after) amounts; rank must match."""
    x = as_f64(x)
    _require(len(pads) == x.ndim,
             f"pads has {len(pads)} entries for rank-{x.ndim} input")
    for ax, (lo, hi) in enumerate(pads):
        _require(lo >= 0 and hi >= 0, f"negative padding on axis {ax}")
    return np.pad(x, pads)


def slice_nd(x, starts, stops):
    """Contiguous copy of x[starts[0]:stops[0], ...] with bounds checking."""
    x = as_f64(x)
    _require(len(starts) == x.ndim and len(stops) == x.ndim,
             f"starts/stops must have {x.ndim} entries")
    idx = []
    for ax, (lo, hi, n) in enumerate(zip(starts, stops, x.shape)):
        _require(0 <= lo < hi <= n,
                 f"slice bounds [{lo},{hi}) out of range for axis {ax} extent {n}")
        idx.append(slice(lo, hi))
    return np.ascontiguousarray(x[tuple(idx)])


def concat_channels(*parts):
    """Stack along the channel axis (axis 1) in argument order."""
    _require(len(parts) >= 1, "concat of zero parts")
    parts = [as_f64(p) for p in parts]
    first = parts[0]
    for i, p in enumerate(parts[1:], start=1):
        _require(p.ndim == first.ndim, f"concat rank mismatch at part {i}")
        _require(
            p.shape[:1] + p.shape[2:] == first.shape[:1] + first.shape[2:],
            f"concat parts disagree off the channel axis: {first.shape} vs {p.shape}",
        )
    return np.ascontiguousarray(np.concatenate(parts, axis=1))
