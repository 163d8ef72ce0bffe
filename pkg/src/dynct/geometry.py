"""Scan protocol, angle/time bookkeeping and exact ray-lattice tracing.

All lengths are in pixel units.  A ray is the line
``L(alpha, u) = {(x, y) : x cos(alpha) + y sin(alpha) = u}`` and is
parametrised as ``u * (cos, sin) + w * (-sin, cos)``; ``w`` is arc length.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

# coincident lattice hits closer than this (pixel units) are merged
DEDUP_TOL = 1e-12
# |cos| or |sin| below this is snapped to exactly zero
_TRIG_SNAP = 1e-15


def default_n_det(n: int) -> int:
    """Smallest odd detector count whose unit-pitch bundle spans the diagonal."""
    k = math.ceil(n * math.sqrt(2.0))
    return k if k % 2 else k + 1


@dataclass(frozen=True)
class ScanProtocol:
    m: int = 1
    angles_per_scan: int = 180
    dt: float = 1.0
    n_det: int = 363
    det_spacing: float = 1.0
    border: int = 8

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.angles_per_scan < 1 or self.n_det < 1:
            raise ValueError("angles_per_scan and n_det must be positive")
        if not (self.dt > 0 and self.det_spacing > 0):
            raise ValueError("dt and det_spacing must be positive")
        if self.border < 0:
            raise ValueError("border must be >= 0")

    @classmethod
    def for_grid(cls, n: int, **kw) -> "ScanProtocol":
        kw.setdefault("n_det", default_n_det(n))
        return cls(**kw)

    def covers(self, n: int) -> bool:
        return self.n_det * self.det_spacing >= n * math.sqrt(2.0)

    def local_angles(self) -> np.ndarray:
        """Angles of one scan, uniform over ``[0, pi)``."""
        return np.arange(self.angles_per_scan) * (math.pi / self.angles_per_scan)

    def angles(self, scan: int) -> np.ndarray:
        return scan * math.pi + self.local_angles()

    def detector_offsets(self) -> np.ndarray:
        return (np.arange(self.n_det) - (self.n_det - 1) / 2.0) * self.det_spacing

    def acquisition_times(self, scan: int) -> np.ndarray:
        return (scan + np.arange(self.angles_per_scan) / self.angles_per_scan) * self.dt


@dataclass(frozen=True)
class Ray:
    alpha: float
    u: float


@dataclass
class RayTrace:
    """Ordered lattice crossings of a ray inside the bordered domain.

    ``points[k]`` and ``points[k + 1]`` bound segment ``k``, which lies in
    pixel ``pixels[k]`` (flat index into the ``n x n`` grid, or -1 for the
    border) and has length ``lengths[k]``.
    """

    points: np.ndarray
    pixels: np.ndarray
    lengths: np.ndarray
    w: np.ndarray = field(repr=False)

    @property
    def total_length(self) -> float:
        return float(self.lengths.sum())

    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.points[1:] + self.points[:-1])


def trig(alpha: float) -> tuple[float, float]:
    c, s = math.cos(alpha), math.sin(alpha)
    if abs(c) < _TRIG_SNAP:
        c = 0.0
    if abs(s) < _TRIG_SNAP:
        s = 0.0
    return c, s


def time_of_angle(protocol: ScanProtocol, alpha: float) -> float:
    if not 0 <= alpha < protocol.m * math.pi:
        raise ValueError(f"angle {alpha} outside [0, m*pi)")
    return alpha / math.pi * protocol.dt


def motion_scale(protocol: ScanProtocol, alpha: float, reference: float = 0.5) -> float:
    """Signed fraction of the per-scan flow that maps a projection to the reference time.

    ``alpha`` is reduced to the local angle of its scan; ``reference`` is the
    reference time as a fraction of the scan (0.5 = mid-scan).
    """
    local = math.fmod(alpha, math.pi)
    if local < 0:
        local += math.pi
    t = local / math.pi * protocol.dt
    return -(t - reference * protocol.dt) / protocol.dt


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def clip_to_box(px, py, dx, dy, half, w_lo, w_hi):
    """Parameter interval of ``p + w d`` inside ``[-half, half]^2`` and ``[w_lo, w_hi]``."""
    if dx != 0.0:
        a = (-half - px) / dx
        b = (half - px) / dx
        if a > b:
            a, b = b, a
        w_lo = max(w_lo, a)
        w_hi = min(w_hi, b)
    elif px < -half or px > half:
        return 1.0, 0.0
    if dy != 0.0:
        a = (-half - py) / dy
        b = (half - py) / dy
        if a > b:
            a, b = b, a
        w_lo = max(w_lo, a)
        w_hi = min(w_hi, b)
    elif py < -half or py > half:
        return 1.0, 0.0
    return w_lo, w_hi


@numba.njit(cache=True)
def _axis_crossings(p, d, w_lo, w_hi, origin, buf):
    """Parameters of crossings of ``p + w d`` with lines ``origin + k``, ascending in w."""
    if d == 0.0:
        return 0
    a = p + w_lo * d
    b = p + w_hi * d
    lo = min(a, b) - origin
    hi = max(a, b) - origin
    k0 = int(math.ceil(lo))
    k1 = int(math.floor(hi))
    cnt = 0
    if d > 0:
        for k in range(k0, k1 + 1):
            buf[cnt] = (origin + k - p) / d
            cnt += 1
    else:
        for k in range(k1, k0 - 1, -1):
            buf[cnt] = (origin + k - p) / d
            cnt += 1
    return cnt


@numba.njit(cache=True)
def trace_capacity(half):
    return 2 * int(math.ceil(2 * half)) + 8


@numba.njit(cache=True)
def trace_w(px, py, dx, dy, w_lo, w_hi, origin, half, out):
    """Sorted, deduplicated lattice-crossing parameters of a clipped line.

    The lattice lines are ``x = origin + k`` and ``y = origin + k``; the
    clip box is ``[-half, half]^2``.  ``out`` receives the entry point, all
    interior crossings and the exit point.  Returns the count (0 if the
    line misses the box).
    """
    w_lo, w_hi = clip_to_box(px, py, dx, dy, half, w_lo, w_hi)
    if not w_hi - w_lo > DEDUP_TOL:
        return 0
    cap = out.shape[0]
    bx = np.empty(cap)
    by = np.empty(cap)
    nx = _axis_crossings(px, dx, w_lo, w_hi, origin, bx)
    ny = _axis_crossings(py, dy, w_lo, w_hi, origin, by)
    cnt = 0
    out[0] = w_lo
    cnt = 1
    ix = 0
    iy = 0
    while ix < nx or iy < ny:
        if iy >= ny or (ix < nx and bx[ix] <= by[iy]):
            w = bx[ix]
            ix += 1
        else:
            w = by[iy]
            iy += 1
        if w - out[cnt - 1] > DEDUP_TOL and w_hi - w > DEDUP_TOL:
            out[cnt] = w
            cnt += 1
    out[cnt] = w_hi
    cnt += 1
    return cnt


@numba.njit(cache=True, inline="always")
def pixel_of(x, y, n):
    j = int(math.floor(x + n / 2.0))
    i = int(math.floor(y + n / 2.0))
    if 0 <= i < n and 0 <= j < n:
        return i * n + j
    return -1


@numba.njit(cache=True)
def trace_line(c, s, u, n, border, out_w, out_pix):
    """Trace ``L(alpha, u)`` over the bordered domain; returns the point count."""
    half = n / 2.0 + border
    cnt = trace_w(u * c, u * s, -s, c, -np.inf, np.inf, -half, half, out_w)
    for k in range(cnt - 1):
        wm = 0.5 * (out_w[k] + out_w[k + 1])
        out_pix[k] = pixel_of(u * c - wm * s, u * s + wm * c, n)
    return cnt


def ray_grid_intersections(ray: Ray, n: int, border: int = 0) -> RayTrace:
    """All crossings of a ray with the pixel-edge lattice of the bordered domain."""
    c, s = trig(ray.alpha)
    half = n / 2.0 + border
    cap = trace_capacity(half)
    w = np.empty(cap)
    pix = np.empty(cap, dtype=np.int64)
    cnt = trace_line(c, s, float(ray.u), n, border, w, pix)
    w = w[:cnt].copy()
    pts = np.column_stack([ray.u * c - w * s, ray.u * s + w * c]) if cnt else np.empty((0, 2))
    return RayTrace(
        points=pts,
        pixels=pix[: max(cnt - 1, 0)].copy(),
        lengths=np.diff(w),
        w=w,
    )


def chord_length(ray: Ray, half: float) -> float:
    """Length of ``L(alpha, u)`` inside ``[-half, half]^2`` (closed form)."""
    c, s = abs(math.cos(ray.alpha)), abs(math.sin(ray.alpha))
    u = abs(ray.u)
    if c < s:
        c, s = s, c
    # now c >= s >= 0; the line is x c + y s = u with the square symmetric
    if s < _TRIG_SNAP:
        return 2.0 * half if u <= half * c else 0.0
    # the support function of the square along (c, s) is half * (c + s)
    if u >= half * (c + s):
        return 0.0
    if u <= half * (c - s):
        return 2.0 * half / c
    # line clips a corner: triangle leg lengths
    r = half * (c + s) - u
    return r / (c * s)
