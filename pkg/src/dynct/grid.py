"""Square rasters, flow fields and the finite-difference operators.

Conventions used throughout the package:

* An ``n x n`` image is indexed ``values[i, j]`` with row ``i`` along ``y``
  and column ``j`` along ``x``.  ``y`` grows with the row index.
* Pixel centres sit at ``x_j = j + 0.5 - n/2`` and ``y_i = i + 0.5 - n/2``
  (pixel units), so the object domain is ``[-n/2, n/2]^2``.
* ``vec(img)`` is the C-order flattening, i.e. index ``i * n + j`` with the
  ``x`` index running fastest.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class ImageGrid:
    values: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"image must be square 2D, got shape {v.shape}")
        if v.shape[0] < 2:
            raise ValueError("image side must be >= 2")
        if not np.all(np.isfinite(v)):
            raise ValueError("image contains non-finite values")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def vec(self) -> np.ndarray:
        return self.values.ravel()

    def with_values(self, values) -> "ImageGrid":
        return ImageGrid(values, self.pixel_size)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement in pixels per scan duration."""

    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        vx = np.ascontiguousarray(self.vx, dtype=np.float64)
        vy = np.ascontiguousarray(self.vy, dtype=np.float64)
        if vx.shape != vy.shape or vx.ndim != 2 or vx.shape[0] != vx.shape[1]:
            raise ValueError("vx and vy must be equal square 2D arrays")
        if not (np.all(np.isfinite(vx)) and np.all(np.isfinite(vy))):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "vx", vx)
        object.__setattr__(self, "vy", vy)

    @property
    def n(self) -> int:
        return self.vx.shape[0]

    @classmethod
    def zeros(cls, n: int) -> "FlowField":
        return cls(np.zeros((n, n)), np.zeros((n, n)))

    def vec(self) -> np.ndarray:
        """Stacked ``[vec(vx); vec(vy)]``."""
        return np.concatenate([self.vx.ravel(), self.vy.ravel()])

    @classmethod
    def from_vec(cls, v: np.ndarray, n: int) -> "FlowField":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[: n * n].reshape(n, n), v[n * n :].reshape(n, n))

    def scaled(self, factor: float) -> "FlowField":
        return FlowField(self.vx * factor, self.vy * factor)

    def is_zero(self) -> bool:
        return not (np.any(self.vx) or np.any(self.vy))


def pixel_centers(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.float64) + 0.5 - n / 2.0


def center_mesh(n: int) -> tuple[np.ndarray, np.ndarray]:
    """``(X, Y)`` coordinate arrays of the pixel centres, shaped like images."""
    c = pixel_centers(n)
    return np.meshgrid(c, c, indexing="xy")


# ---------------------------------------------------------------------------
# finite differences (Neumann: ghost cell repeats the edge value)


def _ddx(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, ((0, 0), (1, 1)), mode="edge")
    return (p[:, 2:] - p[:, :-2]) / 2.0


def _ddy(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, ((1, 1), (0, 0)), mode="edge")
    return (p[2:, :] - p[:-2, :]) / 2.0


def _lap(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, 1, mode="edge")
    return (
        p[1:-1, 2:] + p[1:-1, :-2] + p[2:, 1:-1] + p[:-2, 1:-1] - 4.0 * p[1:-1, 1:-1]
    )


def spatial_derivative(img: ImageGrid, axis: str) -> ImageGrid:
    """Second-order central difference along ``'x'`` or ``'y'`` (value per pixel)."""
    if axis == "x":
        return img.with_values(_ddx(img.values))
    if axis == "y":
        return img.with_values(_ddy(img.values))
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def laplacian(img: ImageGrid) -> ImageGrid:
    return img.with_values(_lap(img.values))


@dataclass(frozen=True)
class DiffOperators:
    """Sparse ``n^2 x n^2`` matrices acting on ``vec(img)``."""

    n: int
    dx: sp.csr_matrix
    dy: sp.csr_matrix
    dxx_plus_dyy: sp.csr_matrix


def _first_diff_1d(n: int) -> sp.csr_matrix:
    d = sp.lil_matrix((n, n))
    for k in range(n):
        d[k, max(k - 1, 0)] -= 0.5
        d[k, min(k + 1, n - 1)] += 0.5
    return d.tocsr()


def _second_diff_1d(n: int) -> sp.csr_matrix:
    d = sp.lil_matrix((n, n))
    for k in range(n):
        d[k, max(k - 1, 0)] += 1.0
        d[k, min(k + 1, n - 1)] += 1.0
        d[k, k] -= 2.0
    return d.tocsr()


@lru_cache(maxsize=8)
def diff_operators(n: int) -> DiffOperators:
    eye = sp.identity(n, format="csr")
    d1 = _first_diff_1d(n)
    d2 = _second_diff_1d(n)
    dx = sp.kron(eye, d1, format="csr")
    dy = sp.kron(d1, eye, format="csr")
    lap = (sp.kron(eye, d2) + sp.kron(d2, eye)).tocsr()
    for m in (dx, dy, lap):
        m.eliminate_zeros()
    return DiffOperators(n, dx, dy, lap)


# ---------------------------------------------------------------------------
# bilinear interpolation kernels
#
# Positions are passed as fractional *array indices* (column, row); the
# public helpers convert from physical coordinates.

CLAMP, ZERO, EXTRAPOLATE = 0, 1, 2


@numba.njit(cache=True, inline="always")
def _bilinear_one(values, cx, cy, mode):
    n0, n1 = values.shape
    if mode == ZERO:
        # zero outside the domain edge, clamp in the outer half-pixel
        if cx < -0.5 or cx > n1 - 0.5 or cy < -0.5 or cy > n0 - 0.5:
            return 0.0
    if mode != EXTRAPOLATE:
        cx = min(max(cx, 0.0), n1 - 1.0)
        cy = min(max(cy, 0.0), n0 - 1.0)
    j0 = min(max(int(np.floor(cx)), 0), n1 - 2)
    i0 = min(max(int(np.floor(cy)), 0), n0 - 2)
    tx = cx - j0
    ty = cy - i0
    v00 = values[i0, j0]
    v01 = values[i0, j0 + 1]
    v10 = values[i0 + 1, j0]
    v11 = values[i0 + 1, j0 + 1]
    return (v00 * (1.0 - tx) + v01 * tx) * (1.0 - ty) + (v10 * (1.0 - tx) + v11 * tx) * ty


@numba.njit(cache=True)
def _bilinear_many(values, cx, cy, mode):
    out = np.empty(cx.shape[0])
    for k in range(cx.shape[0]):
        out[k] = _bilinear_one(values, cx[k], cy[k], mode)
    return out


def sample(values: np.ndarray, x, y, mode: int = CLAMP) -> np.ndarray:
    """Bilinear samples of an ``n x n`` array at physical points ``(x, y)``."""
    n = values.shape[0]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    shape = np.broadcast(x, y).shape
    cx = np.ascontiguousarray(np.broadcast_to(x, shape).ravel()) + (n / 2.0 - 0.5)
    cy = np.ascontiguousarray(np.broadcast_to(y, shape).ravel()) + (n / 2.0 - 0.5)
    return _bilinear_many(np.ascontiguousarray(values, dtype=np.float64), cx, cy, mode).reshape(shape)


def bilinear_sample(img: ImageGrid, x: float, y: float) -> float:
    """Bilinear interpolation of the four surrounding centres; clamps outside."""
    return float(sample(img.values, x, y, CLAMP))


def warp_backward(img: ImageGrid, flow: FlowField, s: float) -> ImageGrid:
    """``out(x) = img(x - s * v(x))`` evaluated at every pixel centre."""
    if flow.n != img.n:
        raise ValueError("flow and image sizes differ")
    if s == 0 or flow.is_zero():
        return img.with_values(img.values.copy())
    X, Y = center_mesh(img.n)
    return img.with_values(sample(img.values, X - s * flow.vx, Y - s * flow.vy))


def _power_of_two_ratio(a: int, b: int) -> int:
    big, small = max(a, b), min(a, b)
    k = big // small
    if big % small or k & (k - 1):
        raise ValueError(f"cannot resample {a} -> {b}: ratio is not a power of two")
    return k


def _resample_values(values: np.ndarray, new_n: int) -> np.ndarray:
    n = values.shape[0]
    if new_n < 2:
        raise ValueError("new_n must be >= 2")
    k = _power_of_two_ratio(n, new_n)
    if new_n == n:
        return values.copy()
    if new_n < n:
        return values.reshape(new_n, k, new_n, k).mean(axis=(1, 3))
    # upsampling: map new centres into old index space
    c = (np.arange(new_n) + 0.5) / k - 0.5
    cx, cy = np.meshgrid(c, c, indexing="xy")
    return _bilinear_many(values, cx.ravel(), cy.ravel(), CLAMP).reshape(new_n, new_n)


def resample(img, new_n: int):
    """Block-average down or bilinearly up by a power-of-two factor.

    Flow fields are rescaled by ``new_n / n`` so displacements stay in
    pixels of the target grid.
    """
    if isinstance(img, FlowField):
        r = new_n / img.n
        return FlowField(
            _resample_values(img.vx, new_n) * r, _resample_values(img.vy, new_n) * r
        )
    return ImageGrid(_resample_values(img.values, new_n), img.pixel_size * img.n / new_n)


# ---------------------------------------------------------------------------
# transport of an image along a time-independent per-scan motion


@numba.njit(cache=True)
def _invert_step(vx, vy, cx, cy, s, iters):
    """Solve ``z + s * v(z) = c`` for every point by fixed-point iteration.

    Works in index coordinates; the flow is bilinearly extrapolated so that
    affine motion fields stay exact outside the grid hull.
    """
    m = cx.shape[0]
    zx = cx.copy()
    zy = cy.copy()
    for k in range(m):
        ax = cx[k]
        ay = cy[k]
        for _ in range(iters):
            ux = _bilinear_one(vx, ax, ay, EXTRAPOLATE)
            uy = _bilinear_one(vy, ax, ay, EXTRAPOLATE)
            bx = cx[k] - s * ux
            by = cy[k] - s * uy
            done = abs(bx - ax) + abs(by - ay) < 1e-12
            ax = bx
            ay = by
            if done:
                break
        zx[k] = ax
        zy[k] = ay
    return zx, zy


class Transport:
    """Images of an object moved by a per-scan motion ``x -> x + v(x)``.

    The position of a material point after ``k`` whole scans is the
    ``k``-fold composition of the per-scan map; within a scan it moves
    linearly, ``y + s * v(y)``.  Images at arbitrary times are resampled once
    from the initial image through the inverse map, so repeated warping does
    not accumulate blur.
    """

    def __init__(self, img: ImageGrid, flow: FlowField, fixed_point_iters: int = 50):
        if flow.n != img.n:
            raise ValueError("flow and image sizes differ")
        self.img = img
        self.flow = flow
        self.iters = fixed_point_iters
        n = img.n
        c = np.arange(n, dtype=np.float64)
        cx, cy = np.meshgrid(c, c, indexing="xy")
        self._cx = cx.ravel()
        self._cy = cy.ravel()
        # backward maps (index coordinates) for whole scans: _maps[k] gives,
        # for each pixel centre at time k, its source position at time 0
        self._maps = [(self._cx.copy(), self._cy.copy())]

    def _map(self, k: int):
        n = self.img.n
        while len(self._maps) <= k:
            px, py = self._maps[-1]
            zx, zy = _invert_step(self.flow.vx, self.flow.vy, self._cx, self._cy, 1.0, self.iters)
            mx = _bilinear_many(px.reshape(n, n), zx, zy, EXTRAPOLATE)
            my = _bilinear_many(py.reshape(n, n), zx, zy, EXTRAPOLATE)
            self._maps.append((mx, my))
        return self._maps[k]

    def backward(self, cx, cy, t: float):
        """Index-space positions at time 0 of points ``(cx, cy)`` seen at time ``t``."""
        if t < 0:
            raise ValueError("time must be non-negative")
        k = int(np.floor(t))
        s = t - k
        n = self.img.n
        cx = np.ascontiguousarray(cx, dtype=np.float64)
        cy = np.ascontiguousarray(cy, dtype=np.float64)
        if s > 0.0:
            cx, cy = _invert_step(self.flow.vx, self.flow.vy, cx, cy, s, self.iters)
        if k == 0:
            return cx, cy
        px, py = self._map(k)
        return (
            _bilinear_many(px.reshape(n, n), cx, cy, EXTRAPOLATE),
            _bilinear_many(py.reshape(n, n), cx, cy, EXTRAPOLATE),
        )

    def source_positions(self, t: float):
        """Index-space source positions at time 0 of all pixel centres at time ``t``."""
        return self.backward(self._cx, self._cy, t)

    def scan_map(self, k: int):
        """Whole-scan backward map after ``k`` scans as two ``n x n`` index arrays."""
        n = self.img.n
        px, py = self._map(k)
        return px.reshape(n, n), py.reshape(n, n)

    def at(self, t: float) -> ImageGrid:
        """Image at time ``t`` measured in scan durations (bilinear resampling)."""
        if t == 0.0 or self.flow.is_zero():
            return self.img.with_values(self.img.values.copy())
        n = self.img.n
        px, py = self.source_positions(t)
        return self.img.with_values(_bilinear_many(self.img.values, px, py, CLAMP).reshape(n, n))

    def cell_average(self, t: float, sub: int = 8) -> ImageGrid:
        """Pixel means at time ``t`` of the moved piecewise-constant object.

        The initial image is read as constant on each pixel; each output
        pixel averages ``sub x sub`` points traced back to time 0.
        """
        n = self.img.n
        if t == 0.0 or self.flow.is_zero():
            return self.img.with_values(self.img.values.copy())
        off = (np.arange(sub) + 0.5) / sub - 0.5
        c = (np.arange(n)[:, None] + off[None, :]).ravel()
        cx, cy = np.meshgrid(c, c, indexing="xy")
        zx, zy = self.backward(cx.ravel(), cy.ravel(), t)
        vals = _cell_lookup(self.img.values, zx, zy)
        return self.img.with_values(vals.reshape(n, sub, n, sub).mean(axis=(1, 3)))


@numba.njit(cache=True)
def _cell_lookup(values, cx, cy):
    """Piecewise-constant read at index positions; zero outside the grid."""
    n0, n1 = values.shape
    out = np.empty(cx.shape[0])
    for k in range(cx.shape[0]):
        j = int(np.floor(cx[k] + 0.5))
        i = int(np.floor(cy[k] + 0.5))
        out[k] = values[i, j] if 0 <= i < n0 and 0 <= j < n1 else 0.0
    return out
