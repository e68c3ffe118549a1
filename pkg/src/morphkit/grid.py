"""Dense 2-D grids: windowed access, border handling and distances.

Images are plain ``numpy`` float64 arrays.  A single image is ``(H, W)``;
batched feature maps used by the layers are ``(N, C, H, W)``.

Border policy: taps that fall outside the image are excluded, so windows
shrink at the border and every output grid has the input's size.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when an operation gets inputs outside its domain."""


def as_image(img, name: str = "image") -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DomainError(f"{name} must be a non-empty 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class WindowShape:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DomainError(f"window dims must be positive, got {self.height}x{self.width}")

    @property
    def n(self) -> int:
        return self.height * self.width

    @property
    def anchor(self) -> tuple[int, int]:
        return self.height // 2, self.width // 2

    def offsets(self) -> list[tuple[int, int]]:
        """Row-major (drow, dcol) offsets of every tap relative to the anchor."""
        ar, ac = self.anchor
        return [(u - ar, v - ac) for u in range(self.height) for v in range(self.width)]


@dataclass(frozen=True)
class Tap:
    offset: tuple[int, int]
    value: float | None
    in_bounds: bool


@dataclass(frozen=True)
class WindowView:
    center: tuple[int, int]
    shape: WindowShape
    taps: tuple[Tap, ...]

    def inbounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (tap indices, values) of the in-bounds taps."""
        idx = [i for i, t in enumerate(self.taps) if t.in_bounds]
        vals = [self.taps[i].value for i in idx]
        return np.asarray(idx, dtype=np.intp), np.asarray(vals, dtype=np.float64)


def window_at(img, center: tuple[int, int], shape: WindowShape) -> WindowView:
    img = as_image(img)
    r, c = center
    rows, cols = img.shape
    if not (0 <= r < rows and 0 <= c < cols):
        raise DomainError(f"center {center} outside {rows}x{cols} image")
    taps = []
    for dr, dc in shape.offsets():
        rr, cc = r + dr, c + dc
        if 0 <= rr < rows and 0 <= cc < cols:
            taps.append(Tap((dr, dc), float(img[rr, cc]), True))
        else:
            taps.append(Tap((dr, dc), None, False))
    return WindowView((r, c), shape, tuple(taps))


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    return float(np.mean((a - b) ** 2))


def taxicab(a, b) -> float:
    """Sum of absolute elementwise differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    return float(np.sum(np.abs(a - b)))


def stable_lse(values: Sequence[float]) -> float:
    """``ln(sum(exp(v)))`` with a max shift so nothing overflows."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("stable_lse of an empty list")
    m = v.max()
    return float(m + np.log(np.sum(np.exp(v - m))))


# -- batched window machinery used by the layers ---------------------------
# Taps sit on a leading axis, ``(..., n, H, W)``: reductions over taps then run
# as elementwise passes over contiguous maps, which beats short inner-axis reductions.

@lru_cache(maxsize=64)
def tap_mask(image_shape: tuple[int, int], shape: WindowShape) -> np.ndarray:
    """Read-only boolean ``(n, H, W)``: tap ``i`` of the window centred on each pixel is in bounds."""
    rows, cols = image_shape
    r = np.arange(rows)[:, None]
    c = np.arange(cols)[None, :]
    out = np.empty((shape.n, rows, cols), dtype=bool)
    for i, (dr, dc) in enumerate(shape.offsets()):
        out[i] = (r + dr >= 0) & (r + dr < rows) & (c + dc >= 0) & (c + dc < cols)
    out.flags.writeable = False
    return out


def _pads(shape: WindowShape) -> tuple[int, int, int, int]:
    ar, ac = shape.anchor
    return ar, shape.height - 1 - ar, ac, shape.width - 1 - ac


def gather_taps(x: np.ndarray, shape: WindowShape) -> np.ndarray:
    """Stack the window taps of every pixel: ``(..., H, W) -> (..., n, H, W)``.

    Out-of-bounds taps hold 0; callers combine this with :func:`tap_mask`.
    """
    top, bot, left, right = _pads(shape)
    rows, cols = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(top, bot), (left, right)]
    xp = np.pad(x, pad)
    return np.stack([xp[..., u:u + rows, v:v + cols]
                     for u in range(shape.height) for v in range(shape.width)], axis=-3)


def scatter_taps(t: np.ndarray, shape: WindowShape) -> np.ndarray:
    """Adjoint of :func:`gather_taps`: ``(..., n, H, W) -> (..., H, W)``."""
    top, bot, left, right = _pads(shape)
    rows, cols = t.shape[-2:]
    out = np.zeros(t.shape[:-3] + (rows + top + bot, cols + left + right))
    ar, ac = shape.anchor
    for i, (dr, dc) in enumerate(shape.offsets()):
        out[..., ar + dr:ar + dr + rows, ac + dc:ac + dc + cols] += t[..., i, :, :]
    return out[..., top:top + rows, left:left + cols]
