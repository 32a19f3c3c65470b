"""Dense tensor helpers: 3D im2col, GEMM, a direct convolution oracle and SVD.

Arrays follow the ``(n, c, d, h, w)`` axis order, i.e. ``w`` varies fastest in
memory. Kernel, stride and padding triples on :class:`ConvSpec` are written
``(w, h, d)`` to match the usual ``N x C x W x H x D`` naming of 3D weights.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, ShapeError

__all__ = [
    "ConvSpec",
    "conv3d_direct",
    "conv3d_gemm",
    "col2im3d_batch",
    "im2col3d",
    "im2col3d_batch",
    "matmul",
    "svd_components",
]


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ShapeError(f"expected a (w, h, d) triple, got {v!r}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_filters: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.in_channels < 1 or self.out_filters < 1:
            raise ShapeError("in_channels and out_filters must be >= 1")
        if min(self.kernel) < 1:
            raise ShapeError(f"kernel dims must be >= 1, got {self.kernel}")
        if min(self.stride) < 1:
            raise ShapeError(f"stride dims must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    @property
    def kernel_dhw(self):
        kw, kh, kd = self.kernel
        return kd, kh, kw

    @property
    def kernel_volume(self):
        kw, kh, kd = self.kernel
        return kw * kh * kd

    @property
    def rows(self):
        """Rows of the im2col matrix, ``c * kw * kh * kd``."""
        return self.in_channels * self.kernel_volume

    @property
    def weight_shape(self):
        return (self.out_filters, self.in_channels) + self.kernel_dhw

    def output_dhw(self, d, h, w):
        """Output spatial dims for an input of depth/height/width ``(d, h, w)``."""
        out = []
        for size, k, s, p in zip((d, h, w), self.kernel_dhw, self.stride[::-1], self.padding[::-1]):
            o = (size + 2 * p - k) // s + 1
            if o < 1:
                raise ShapeError(
                    f"kernel {self.kernel} does not fit input (d, h, w)={(d, h, w)} "
                    f"with padding {self.padding}"
                )
            out.append(o)
        return tuple(out)

    def output_positions(self, d, h, w):
        do, ho, wo = self.output_dhw(d, h, w)
        return do * ho * wo

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "out_filters": self.out_filters,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["in_channels"], d["out_filters"], tuple(d["kernel"]),
                   tuple(d["stride"]), tuple(d["padding"]))


def _pad(x, spec):
    pw, ph, pd = spec.padding
    if pw == ph == pd == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def im2col3d_batch(x, spec):
    """Batched im2col. ``x`` is ``(B, C, D, H, W)``; returns ``(B, K, P)``.

    Row ``((ci * kd + di) * kh + hi) * kw + wi`` of each matrix holds the input
    values seen by kernel tap ``(ci, di, hi, wi)`` at every output position.
    Output positions are ordered ``(od, oh, ow)`` with ``ow`` fastest.
    """
    x = np.asarray(x)
    if x.ndim != 5:
        raise ShapeError(f"expected a 5-D batch, got shape {x.shape}")
    b, c, d, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    do, ho, wo = spec.output_dhw(d, h, w)
    kd, kh, kw = spec.kernel_dhw
    sw, sh, sd = spec.stride
    win = sliding_window_view(_pad(x, spec), (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw][:, :, :do, :ho, :wo]
    # (B, C, Do, Ho, Wo, kd, kh, kw) -> (B, C, kd, kh, kw, Do, Ho, Wo)
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return cols.reshape(b, c * kd * kh * kw, do * ho * wo)


def im2col3d(x, spec):
    """im2col for one sample ``(c, d, h, w)``; returns a ``(c*kw*kh*kd, P)`` matrix."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected a single (c, d, h, w) sample, got shape {x.shape}")
    return im2col3d_batch(x[None], spec)[0]


def col2im3d_batch(cols, spec, input_dhw):
    """Adjoint of :func:`im2col3d_batch`: scatter-add columns back to ``(B, C, D, H, W)``."""
    b = cols.shape[0]
    d, h, w = input_dhw
    do, ho, wo = spec.output_dhw(d, h, w)
    kd, kh, kw = spec.kernel_dhw
    sw, sh, sd = spec.stride
    pw, ph, pd = spec.padding
    c = spec.in_channels
    out = np.zeros((b, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols = cols.reshape(b, c, kd, kh, kw, do, ho, wo)
    for di in range(kd):
        for hi in range(kh):
            for wi in range(kw):
                out[:, :, di:di + sd * do:sd, hi:hi + sh * ho:sh, wi:wi + sw * wo:sw] += cols[:, :, di, hi, wi]
    return out[:, :, pd:pd + d, ph:ph + h, pw:pw + w]


def matmul(a, b):
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def conv3d_gemm(x, weights, spec, bias=None):
    """Convolution through im2col + GEMM. Returns ``(B, N, Do, Ho, Wo)``."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weights {weights.shape} do not match spec {spec.weight_shape}")
    cols = im2col3d_batch(x, spec)
    out = np.matmul(weights.reshape(spec.out_filters, -1), cols)
    if bias is not None:
        out += np.asarray(bias)[:, None]
    do, ho, wo = spec.output_dhw(*x.shape[2:])
    return out.reshape(x.shape[0], spec.out_filters, do, ho, wo)


def conv3d_direct(x, weights, spec):
    """Reference convolution by plain nested loops (zero padding, no bias).

    Slow by design; it exists to check the GEMM path.
    """
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.ndim != 5:
        raise ShapeError(f"expected a 5-D batch, got shape {x.shape}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weights {weights.shape} do not match spec {spec.weight_shape}")
    bsz, c, d, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    do, ho, wo = spec.output_dhw(d, h, w)
    kd, kh, kw = spec.kernel_dhw
    sw, sh, sd = spec.stride
    pw, ph, pd = spec.padding
    out = np.zeros((bsz, spec.out_filters, do, ho, wo))
    xl = x.tolist()
    wl = weights.tolist()
    for b in range(bsz):
        for n in range(spec.out_filters):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for ci in range(c):
                            for di in range(kd):
                                zd = od * sd + di - pd
                                if zd < 0 or zd >= d:
                                    continue
                                for hi in range(kh):
                                    zh = oh * sh + hi - ph
                                    if zh < 0 or zh >= h:
                                        continue
                                    for wi in range(kw):
                                        zw = ow * sw + wi - pw
                                        if zw < 0 or zw >= w:
                                            continue
                                        acc += xl[b][ci][zd][zh][zw] * wl[n][ci][di][hi][wi]
                        out[b, n, od, oh, ow] = acc
    return out


def svd_components(m):
    """Singular values (descending) and right singular vectors (as rows) of ``m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError("svd_components: matrix has non-finite entries")
    _, s, vt = np.linalg.svd(m, full_matrices=False)
    return s, vt
