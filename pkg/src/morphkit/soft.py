"""Differentiable (log-sum-exp) dilation and erosion, the hard oracle, smooth signs.

Every soft kernel has the shape ``Y = g * lse(B)`` where ``g`` is the
operation gain (+1 dilation, -1 erosion, or a smooth sign of a trainable
scalar in the adaptive layer) and ``B`` the per-tap exponent:

=====================  ==================  ============
form / mode            B_i                 g
=====================  ==================  ============
product                g * W_i * X_i        +1 / -1
additive, dilate       X_i + W_i            +1
additive, erode        W_i - X_i            -1
additive, erode (v)    X_i - W_i            -1
=====================  ==================  ============

The additive erosion row is the soft minimum of ``X_i - W_i``, which is the
classical grayscale erosion.  Row (v), ``ErosionVariant.VERBATIM``, swaps the
operands and approximates ``min(W_i - X_i)`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

from .grid import DomainError, WindowShape, WindowView, as_image, gather_taps, scatter_taps, tap_mask


class MorphMode(str, Enum):
    DILATE = "dilate"
    ERODE = "erode"

    @property
    def gain(self) -> float:
        return 1.0 if self is MorphMode.DILATE else -1.0


class Form(str, Enum):
    PRODUCT = "product"  # binary SE, exponent W*X
    ADDITIVE = "additive"  # non-flat SE, exponent W+X


class Kind(str, Enum):
    FLAT = "flat"
    NONFLAT = "nonflat"


class SmoothSign(str, Enum):
    SOFTSIGN = "softsign"
    TANH = "tanh"


class ErosionVariant(str, Enum):
    CORRECTED = "corrected"
    VERBATIM = "verbatim"


@dataclass
class StructuringElement:
    weights: np.ndarray
    form: Form = Form.PRODUCT
    kind: Kind = Kind.FLAT

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 1:
            w = w.reshape(1, -1)
        if w.ndim != 2 or w.size == 0:
            raise DomainError(f"SE weights must be a non-empty 2-D grid, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise DomainError("SE weights must be finite")
        self.weights = w
        self.form = Form(self.form)
        self.kind = Kind(self.kind)

    @property
    def shape(self) -> WindowShape:
        return WindowShape(*self.weights.shape)


@dataclass
class TapGradients:
    dW: np.ndarray
    dX: np.ndarray
    taps: np.ndarray = field(default=None)  # SE tap indices the entries refer to


# -- smooth sign ------------------------------------------------------------

def smooth_sign(a, kind: SmoothSign | str):
    kind = SmoothSign(kind)
    if kind is SmoothSign.SOFTSIGN:
        return a / (1.0 + np.abs(a))
    return np.tanh(a)


def smooth_sign_deriv(a, kind: SmoothSign | str):
    kind = SmoothSign(kind)
    if kind is SmoothSign.SOFTSIGN:
        return 1.0 / (1.0 + np.abs(a)) ** 2
    return 1.0 - np.tanh(a) ** 2


# -- per-window kernel ------------------------------------------------------

def _exponents(w, x, gain: float, form: Form, variant: ErosionVariant):
    if form is Form.PRODUCT:
        return gain * w * x
    if gain < 0 and variant is ErosionVariant.VERBATIM:
        return x - w
    return gain * x + w


def _window_terms(win: WindowView, se: StructuringElement):
    if win.shape != se.shape:
        raise DomainError(f"window {win.shape} does not match SE {se.shape}")
    idx, x = win.inbounds()
    if idx.size == 0:
        raise DomainError(f"no in-bounds taps at {win.center}")
    return idx, x, se.weights.ravel()[idx]


def soft_morph(win: WindowView, se: StructuringElement, mode: MorphMode | str,
               variant: ErosionVariant | str = ErosionVariant.CORRECTED) -> float:
    """Soft dilation/erosion value of one window (in-bounds taps only)."""
    mode, variant = MorphMode(mode), ErosionVariant(variant)
    _, x, w = _window_terms(win, se)
    g = mode.gain
    b = _exponents(w, x, g, se.form, variant)
    m = b.max()
    return float(g * (m + np.log(np.sum(np.exp(b - m)))))


def soft_morph_grad(win: WindowView, se: StructuringElement, mode: MorphMode | str,
                    variant: ErosionVariant | str = ErosionVariant.CORRECTED) -> TapGradients:
    mode, variant = MorphMode(mode), ErosionVariant(variant)
    idx, x, w = _window_terms(win, se)
    g = mode.gain
    b = _exponents(w, x, g, se.form, variant)
    e = np.exp(b - b.max())
    p = e / e.sum()
    if se.form is Form.PRODUCT:
        dw, dx = g * g * p * x, g * g * p * w
    elif g < 0 and variant is ErosionVariant.VERBATIM:
        dw, dx = -g * p, g * p
    else:
        dw, dx = g * p, g * g * p
    return TapGradients(dW=dw, dX=dx, taps=idx)


# -- batched kernel ---------------------------------------------------------

@lru_cache(maxsize=64)
def _neg_mask(image_shape: tuple[int, int], shape: WindowShape) -> np.ndarray:
    """0 on in-bounds taps, -inf elsewhere, ``(n, H, W)``."""
    out = np.where(tap_mask(image_shape, shape), 0.0, -np.inf)
    out.flags.writeable = False
    return out


@dataclass
class KernelCache:
    taps: np.ndarray  # (N, C, n, H, W)
    prob: np.ndarray  # (N, m, n, H, W)
    lse: np.ndarray  # (N, m, H, W)
    gain: np.ndarray  # (m,)
    channels: int


def _verbatim(g: np.ndarray, form: Form, variant: ErosionVariant) -> bool:
    return form is Form.ADDITIVE and ErosionVariant(variant) is ErosionVariant.VERBATIM and bool(np.all(g < 0))


def _tap_sum(a: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """``sum_{N,H,W} a * taps`` -> ``(m, n)`` with taps broadcast over filters."""
    if taps.shape[1] == 1:
        return np.einsum("imkhw,ikhw->mk", a, taps[:, 0], optimize=True)
    return np.einsum("imkhw,imkhw->mk", a, taps, optimize=True)


# Tap arrays are processed a few images at a time; blocks of this many
# float64 entries stay cache-resident, which roughly halves the kernel time.
_BLOCK_ENTRIES = 1 << 17


def _blocks(n_items: int, per_item: int):
    step = max(1, _BLOCK_ENTRIES // max(per_item, 1))
    for k in range(0, n_items, step):
        yield slice(k, min(k + step, n_items))


def soft_morph_maps(x: np.ndarray, weights: np.ndarray, gain, form: Form,
                    variant: ErosionVariant = ErosionVariant.CORRECTED):
    """Apply ``m`` soft kernels to a batch.

    ``x`` is ``(N, C, H, W)`` with ``C`` either 1 (every filter sees the same
    map) or ``m`` (filter ``s`` sees channel ``s``).  ``weights`` is
    ``(m, kh, kw)`` and ``gain`` broadcasts to ``(m,)``.
    Returns ``(Y, cache)`` with ``Y`` of shape ``(N, m, H, W)``.
    """
    form = Form(form)
    m, kh, kw = weights.shape
    n_img, chans, rows, cols = x.shape
    if chans not in (1, m):
        raise DomainError(f"{chans} input channels cannot feed {m} filters")
    shape = WindowShape(kh, kw)
    taps = gather_taps(x, shape)
    g = np.broadcast_to(np.asarray(gain, dtype=np.float64), (m,))
    gb = g[:, None, None, None]
    w = weights.reshape(m, shape.n, 1, 1)
    verbatim = _verbatim(g, form, variant)
    neg = _neg_mask((rows, cols), shape)
    prob = np.empty((n_img, m, shape.n, rows, cols))
    lse = np.empty((n_img, m, rows, cols))
    for blk in _blocks(n_img, m * shape.n * rows * cols):
        t, b = taps[blk], prob[blk]
        if form is Form.PRODUCT:
            np.multiply(t, gb * w, out=b)
        elif verbatim:
            np.subtract(t, w, out=b)
        else:
            np.multiply(t, gb, out=b)
            b += w
        b += neg
        top = b.max(axis=2, keepdims=True)
        b -= top
        np.exp(b, out=b)
        total = b.sum(axis=2, keepdims=True)
        b /= total
        lse[blk] = (top + np.log(total))[:, :, 0]
    y = g[:, None, None] * lse
    return y, KernelCache(taps, prob, lse, g, chans)


def soft_morph_maps_backward(upstream: np.ndarray, weights: np.ndarray, cache: KernelCache,
                             form: Form, variant: ErosionVariant = ErosionVariant.CORRECTED,
                             gain_grad: bool = True):
    """Return ``(dW, dX, dgain)`` for upstream gradient ``(N, m, H, W)``.

    ``dgain`` is ``None`` when ``gain_grad`` is false (fixed-operation layers).
    """
    form = Form(form)
    m, kh, kw = weights.shape
    shape = WindowShape(kh, kw)
    g = cache.gain
    gb = g[:, None, None, None]
    w = weights.reshape(m, shape.n, 1, 1)
    verbatim = _verbatim(g, form, variant)
    taps, prob = cache.taps, cache.prob
    n_img, _, _, rows, cols = prob.shape
    scaled = upstream * g[:, None, None]
    dw = np.zeros((m, shape.n))
    dx = np.empty((n_img, cache.channels, rows, cols))
    dg_inner = np.zeros_like(cache.lse) if gain_grad else None
    for blk in _blocks(n_img, m * shape.n * rows * cols):
        t, p = taps[blk], prob[blk]
        coef = p * scaled[blk][:, :, None]  # dJ/dB
        if form is Form.PRODUCT:
            dw += g[:, None] * _tap_sum(coef, t)
            coef *= gb * w
            if gain_grad:
                dg_inner[blk] = (p * w * t).sum(axis=2)
        elif verbatim:
            dw -= coef.sum(axis=(0, 3, 4))
        else:
            dw += coef.sum(axis=(0, 3, 4))
            coef *= gb
            if gain_grad:
                dg_inner[blk] = (p * t).sum(axis=2)
        if cache.channels == 1 and m > 1:
            coef = coef.sum(axis=1, keepdims=True)
        dx[blk] = scatter_taps(coef, shape)
    dgain = None
    if gain_grad:
        dgain = (upstream * (cache.lse + g[:, None, None] * dg_inner)).sum(axis=(0, 2, 3))
    return dw.reshape(m, kh, kw), dx, dgain


# -- hard oracle ------------------------------------------------------------

def hard_morph(img, se: StructuringElement, mode: MorphMode | str) -> np.ndarray:
    """Classical max/min morphology with the shrinking-window border policy.

    Flat SEs use the support ``W != 0`` and ignore weight values; pixels whose
    support is entirely outside the image get 0.  Non-flat SEs use every tap,
    ``max(X + W)`` for dilation and ``min(X - W)`` for erosion.
    """
    img = as_image(img)
    mode = MorphMode(mode)
    shape = se.shape
    mask = tap_mask(img.shape, shape)
    taps = gather_taps(img, shape)
    w = se.weights.reshape(-1, 1, 1)
    if se.kind is Kind.FLAT:
        support = mask & (w != 0)
        vals = taps
        fill = 0.0
    else:
        support = mask
        vals = taps + w if mode is MorphMode.DILATE else taps - w
        fill = 0.0
    if mode is MorphMode.DILATE:
        out = np.where(support, vals, -np.inf).max(axis=0)
    else:
        out = np.where(support, vals, np.inf).min(axis=0)
    return np.where(np.isfinite(out), out, fill)


def hard_morph_batch(images: np.ndarray, se: StructuringElement, mode: MorphMode | str) -> np.ndarray:
    return np.stack([hard_morph(im, se, mode) for im in images])
