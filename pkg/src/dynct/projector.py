"""Sparse projection operators, dynamic sinogram simulation and FBP.

Matrices are ``scipy.sparse.csr_matrix`` with one row per
``(angle, detector)`` pair of a single scan, ordered angle-major, acting on
``vec(img)``.  They are built for the local angles ``[0, pi)``; scan ``i``
sees the same lines at ``alpha + i*pi`` with the detector axis reversed
when ``i`` is odd (``L(alpha + pi, u) = L(alpha, -u)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numba
import numpy as np
import scipy.sparse as sp

from .geometry import ScanProtocol, clip_to_box, trace_capacity, trace_line, trig
from .grid import EXTRAPOLATE, FlowField, ImageGrid, Transport, _bilinear_one, center_mesh, resample

SCHEMES = ("length", "joseph")
METHODS = ("traced", "resampled")


@dataclass
class Sinogram:
    """One scan's projections, rows in acquisition order of the global angles."""

    protocol: ScanProtocol
    scan_index: int
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        shape = (self.protocol.angles_per_scan, self.protocol.n_det)
        if v.shape != shape:
            raise ValueError(f"sinogram shape {v.shape} != {shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("sinogram contains non-finite values")
        self.values = v

    @property
    def angles(self) -> np.ndarray:
        return self.protocol.angles(self.scan_index)

    @property
    def times(self) -> np.ndarray:
        return self.protocol.acquisition_times(self.scan_index)

    def local_values(self) -> np.ndarray:
        """Values re-indexed to the local angles of the first scan."""
        return self.values[:, ::-1] if self.scan_index % 2 else self.values

    @classmethod
    def from_local(cls, protocol, scan_index, local_values):
        v = np.asarray(local_values)
        return cls(protocol, scan_index, v[:, ::-1] if scan_index % 2 else v)


def _trig_arrays(protocol: ScanProtocol):
    cs = np.array([trig(a) for a in protocol.local_angles()])
    return np.ascontiguousarray(cs[:, 0]), np.ascontiguousarray(cs[:, 1])


# ---------------------------------------------------------------------------
# length (exact chord) scheme


@numba.njit(cache=True)
def _length_row(c, s, u, n, border, w, pix, cols, vals, write):
    cnt = trace_line(c, s, u, n, border, w, pix)
    k = 0
    for q in range(cnt - 1):
        if pix[q] >= 0:
            if write:
                cols[k] = pix[q]
                vals[k] = w[q + 1] - w[q]
            k += 1
    return k


@numba.njit(cache=True, parallel=True)
def _length_counts(cos_a, sin_a, us, n, border):
    na, nd = cos_a.shape[0], us.shape[0]
    counts = np.zeros(na * nd, dtype=np.int64)
    cap = trace_capacity(n / 2.0 + border)
    for r in numba.prange(na * nd):
        w = np.empty(cap)
        pix = np.empty(cap, dtype=np.int64)
        dummy_c = np.empty(0, dtype=np.int32)
        dummy_v = np.empty(0)
        a, d = r // nd, r % nd
        counts[r] = _length_row(cos_a[a], sin_a[a], us[d], n, border, w, pix, dummy_c, dummy_v, False)
    return counts


@numba.njit(cache=True, parallel=True)
def _length_fill(cos_a, sin_a, us, n, border, indptr, indices, data):
    na, nd = cos_a.shape[0], us.shape[0]
    cap = trace_capacity(n / 2.0 + border)
    for r in numba.prange(na * nd):
        w = np.empty(cap)
        pix = np.empty(cap, dtype=np.int64)
        a, d = r // nd, r % nd
        _length_row(
            cos_a[a], sin_a[a], us[d], n, border, w, pix,
            indices[indptr[r] : indptr[r + 1]], data[indptr[r] : indptr[r + 1]], True,
        )


# ---------------------------------------------------------------------------
# Joseph scheme: step along the dominant axis, linear split between the two
# nearest pixel centres, weight scaled by the step length


@numba.njit(cache=True)
def _joseph_row(c, s, u, n, cols, vals, write):
    k = 0
    h = n / 2.0 - 0.5
    if abs(c) >= abs(s):
        scale = 1.0 / abs(c)
        for i in range(n):
            y = i - h
            cx = (u - y * s) / c + h
            j0 = int(math.floor(cx))
            f = cx - j0
            if 0 <= j0 < n and f < 1.0:
                if write:
                    cols[k] = i * n + j0
                    vals[k] = (1.0 - f) * scale
                k += 1
            if 0 <= j0 + 1 < n and f > 0.0:
                if write:
                    cols[k] = i * n + j0 + 1
                    vals[k] = f * scale
                k += 1
    else:
        scale = 1.0 / abs(s)
        for j in range(n):
            x = j - h
            cy = (u - x * c) / s + h
            i0 = int(math.floor(cy))
            f = cy - i0
            if 0 <= i0 < n and f < 1.0:
                if write:
                    cols[k] = i0 * n + j
                    vals[k] = (1.0 - f) * scale
                k += 1
            if 0 <= i0 + 1 < n and f > 0.0:
                if write:
                    cols[k] = (i0 + 1) * n + j
                    vals[k] = f * scale
                k += 1
    return k


@numba.njit(cache=True, parallel=True)
def _joseph_counts(cos_a, sin_a, us, n):
    na, nd = cos_a.shape[0], us.shape[0]
    counts = np.zeros(na * nd, dtype=np.int64)
    for r in numba.prange(na * nd):
        a, d = r // nd, r % nd
        counts[r] = _joseph_row(
            cos_a[a], sin_a[a], us[d], n, np.empty(0, dtype=np.int32), np.empty(0), False
        )
    return counts


@numba.njit(cache=True, parallel=True)
def _joseph_fill(cos_a, sin_a, us, n, indptr, indices, data):
    na, nd = cos_a.shape[0], us.shape[0]
    for r in numba.prange(na * nd):
        a, d = r // nd, r % nd
        _joseph_row(
            cos_a[a], sin_a[a], us[d], n,
            indices[indptr[r] : indptr[r + 1]], data[indptr[r] : indptr[r + 1]], True,
        )


def _assemble(counts, fill, shape) -> sp.csr_matrix:
    indptr = np.zeros(counts.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    nnz = int(indptr[-1])
    indices = np.empty(nnz, dtype=np.int32)
    data = np.empty(nnz)
    fill(indptr, indices, data)
    if nnz < np.iinfo(np.int32).max:
        indptr = indptr.astype(np.int32)
    return sp.csr_matrix((data, indices, indptr), shape=shape)


def build_static_matrix(protocol: ScanProtocol, n: int, scheme: str = "length") -> sp.csr_matrix:
    """Projection matrix of one scan's local angles on the ``n x n`` grid."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    cos_a, sin_a = _trig_arrays(protocol)
    us = protocol.detector_offsets()
    shape = (protocol.angles_per_scan * protocol.n_det, n * n)
    if scheme == "length":
        counts = _length_counts(cos_a, sin_a, us, n, protocol.border)
        fill = lambda p, i, d: _length_fill(cos_a, sin_a, us, n, protocol.border, p, i, d)  # noqa: E731
    else:
        counts = _joseph_counts(cos_a, sin_a, us, n)
        fill = lambda p, i, d: _joseph_fill(cos_a, sin_a, us, n, p, i, d)  # noqa: E731
    return _assemble(counts, fill, shape)


@lru_cache(maxsize=4)
def cached_static_matrix(protocol: ScanProtocol, n: int, scheme: str = "length") -> sp.csr_matrix:
    return build_static_matrix(protocol, n, scheme)


# ---------------------------------------------------------------------------
# simulation


def forward_project(A: sp.csr_matrix, img: ImageGrid, protocol: ScanProtocol, scan_index: int = 0) -> Sinogram:
    """Projections of a static image as scan ``scan_index``."""
    local = (A @ img.vec()).reshape(protocol.angles_per_scan, protocol.n_det)
    return Sinogram.from_local(protocol, scan_index, local)


@numba.njit(cache=True)
def _segment_integral(ax, ay, bx, by, half, values):
    """Integral of a pixelwise-constant image along ``a -> b``, per unit of ``t``.

    Walks the lattice cells between ``t = 0`` and ``t = 1``; multiply by the
    segment length for the plain line integral.
    """
    n = values.shape[0]
    dx = bx - ax
    dy = by - ay
    t0, t1 = clip_to_box(ax, ay, dx, dy, half, 0.0, 1.0)
    if not t1 > t0:
        return 0.0
    gx = ax + half
    gy = ay + half
    inf = np.inf
    if dx > 0:
        nx, sx = (math.floor(gx + t0 * dx) + 1.0 - gx) / dx, 1.0 / dx
    elif dx < 0:
        nx, sx = (math.ceil(gx + t0 * dx) - 1.0 - gx) / dx, -1.0 / dx
    else:
        nx, sx = inf, inf
    if dy > 0:
        ny, sy = (math.floor(gy + t0 * dy) + 1.0 - gy) / dy, 1.0 / dy
    elif dy < 0:
        ny, sy = (math.ceil(gy + t0 * dy) - 1.0 - gy) / dy, -1.0 / dy
    else:
        ny, sy = inf, inf
    acc = 0.0
    t = t0
    while t < t1:
        tn = min(nx, ny, t1)
        if tn > t:
            tm = 0.5 * (t + tn)
            j = min(max(int(math.floor(gx + tm * dx)), 0), n - 1)
            i = min(max(int(math.floor(gy + tm * dy)), 0), n - 1)
            acc += (tn - t) * values[i, j]
        if tn == nx:
            nx += sx
        if tn == ny:
            ny += sy
        t = tn
    return acc


@numba.njit(cache=True, parallel=True)
def _traced_scan(cos_a, sin_a, us, fracs, values, vx, vy, mapx, mapy, use_map, step, iters, out):
    """Line integrals of the moved object for one scan.

    Each ray (in the frame of its acquisition time) is sampled every
    ``step`` pixels, the samples are traced back to time 0 (partial step
    ``fracs[a]`` inverted by fixed-point iteration, then the whole-scan map)
    and the traced polyline is integrated through the initial image.  The
    per-piece factor (original length / traced length) is the arc-length
    change of the map, so a piece contributes ``step * (mean value)``.
    """
    n = values.shape[0]
    half = n / 2.0
    shift = half - 0.5
    na, nd = cos_a.shape[0], us.shape[0]
    for r in numba.prange(na * nd):
        a, d = r // nd, r % nd
        c, s, u = cos_a[a], sin_a[a], us[d]
        frac = fracs[a]
        w_lo, w_hi = clip_to_box(u * c, u * s, -s, c, half, -np.inf, np.inf)
        if not w_hi > w_lo:
            out[a, d] = 0.0
            continue
        k = max(int(math.ceil((w_hi - w_lo) / step)), 1)
        h = (w_hi - w_lo) / k
        acc = 0.0
        px = 0.0
        py = 0.0
        for q in range(k + 1):
            w = w_lo + q * h
            # index coordinates of the sample at the acquisition time
            cx = u * c - w * s + shift
            cy = u * s + w * c + shift
            zx, zy = cx, cy
            if frac != 0.0:
                for _ in range(iters):
                    bx = cx - frac * _bilinear_one(vx, zx, zy, EXTRAPOLATE)
                    by = cy - frac * _bilinear_one(vy, zx, zy, EXTRAPOLATE)
                    done = abs(bx - zx) + abs(by - zy) < 1e-12
                    zx, zy = bx, by
                    if done:
                        break
            if use_map:
                zx, zy = (
                    _bilinear_one(mapx, zx, zy, EXTRAPOLATE),
                    _bilinear_one(mapy, zx, zy, EXTRAPOLATE),
                )
            x, y = zx - shift, zy - shift
            if q > 0:
                acc += _segment_integral(px, py, x, y, half, values)
            px, py = x, y
        out[a, d] = acc * h


def _traced_local(transport: Transport, protocol: ScanProtocol, scan: int, times, step: float) -> np.ndarray:
    """Local-angle sinogram rows of the object at per-angle ``times`` (one scan's maps)."""
    cos_a, sin_a = _trig_arrays(protocol)
    us = protocol.detector_offsets()
    fracs = np.ascontiguousarray(np.asarray(times, dtype=np.float64) - scan)
    if np.any(fracs < 0) or np.any(fracs > 1):
        raise ValueError("times must lie within the given scan")
    mapx, mapy = transport.scan_map(scan)
    out = np.empty((protocol.angles_per_scan, protocol.n_det))
    _traced_scan(
        cos_a, sin_a, us, fracs, transport.img.values, transport.flow.vx, transport.flow.vy,
        np.ascontiguousarray(mapx), np.ascontiguousarray(mapy), scan > 0, step, transport.iters, out,
    )
    return out


def _fine_model(phantom: ImageGrid, flow: FlowField, protocol: ScanProtocol, supersample: int):
    """Object, flow and protocol on the simulation grid, plus the unit rescale."""
    if flow.n != phantom.n:
        raise ValueError("phantom and flow sizes differ")
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    if supersample == 1:
        return phantom, flow, protocol, 1.0
    fine_n = phantom.n * supersample
    fine_protocol = replace(
        protocol, det_spacing=protocol.det_spacing * supersample, border=protocol.border * supersample
    )
    return resample(phantom, fine_n), resample(flow, fine_n), fine_protocol, 1.0 / supersample


def simulate_dynamic_sinogram(
    phantom: ImageGrid,
    flow: FlowField,
    protocol: ScanProtocol,
    scheme: str = "length",
    supersample: int = 1,
    method: str = "resampled",
    step: float = 0.5,
) -> list[Sinogram]:
    """Sinograms of ``protocol.m`` consecutive scans of a moving object.

    Every angle is recorded instantaneously at its acquisition time.

    ``method="resampled"`` (default) resamples the object on the grid at
    each acquisition time (:class:`~dynct.grid.Transport`) and applies the
    ``scheme`` matrix.  With ``supersample > 1`` the phantom is upsampled by
    that integer factor, moved and projected on the finer grid, and the
    projections are rescaled to coarse pixel units.

    ``method="traced"`` treats the phantom as constant on each pixel and
    integrates the continuously moving object along each line (polyline
    spacing ``step``); with zero flow it equals the length-scheme matrix
    applied to the phantom.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "traced":
        if flow.n != phantom.n:
            raise ValueError("phantom and flow sizes differ")
        if step <= 0:
            raise ValueError("step must be positive")
        if flow.is_zero():
            A = cached_static_matrix(protocol, phantom.n, "length")
            return [forward_project(A, phantom, protocol, k) for k in range(protocol.m)]
        transport = Transport(phantom, flow)
        out = []
        for scan in range(protocol.m):
            times = protocol.acquisition_times(scan) / protocol.dt
            out.append(Sinogram.from_local(protocol, scan, _traced_local(transport, protocol, scan, times, step)))
        return out

    obj, v, sim_protocol, unit = _fine_model(phantom, flow, protocol, supersample)
    A = cached_static_matrix(sim_protocol, obj.n, scheme)
    nd, na = protocol.n_det, protocol.angles_per_scan
    if v.is_zero():
        p = (A @ obj.vec()).reshape(na, nd) * unit
        return [Sinogram.from_local(protocol, k, p) for k in range(protocol.m)]
    transport = Transport(obj, v)
    blocks = [A[k * nd : (k + 1) * nd] for k in range(na)]
    out = []
    for scan in range(protocol.m):
        local = np.empty((na, nd))
        times = protocol.acquisition_times(scan) / protocol.dt
        for k in range(na):
            local[k] = blocks[k] @ transport.at(float(times[k])).vec()
        out.append(Sinogram.from_local(protocol, scan, local * unit))
    return out


def object_at(
    phantom: ImageGrid, flow: FlowField, t: float, supersample: int = 1, method: str = "resampled"
) -> ImageGrid:
    """The simulated object at time ``t`` on the reconstruction grid.

    This is the reference the reconstructions are scored against: the
    block mean of the moved fine-grid object (resampled) or the pixel means
    of the moved pixelwise-constant phantom (traced).
    """
    if method == "traced":
        return Transport(phantom, flow).cell_average(t)
    obj, v, _, _ = _fine_model(phantom, flow, ScanProtocol(), supersample)
    return resample(Transport(obj, v).at(t), phantom.n)


def simulate_frozen_sinogram(
    phantom: ImageGrid,
    flow: FlowField,
    protocol: ScanProtocol,
    t: float,
    scheme: str = "length",
    supersample: int = 1,
    method: str = "resampled",
    step: float = 0.5,
) -> Sinogram:
    """Scan-0 sinogram of the object held still in its state at time ``t``.

    Uses the same object model as :func:`simulate_dynamic_sinogram`.
    """
    if method == "traced":
        if flow.is_zero() or t == 0:
            return forward_project(cached_static_matrix(protocol, phantom.n, "length"), phantom, protocol, 0)
        transport = Transport(phantom, flow)
        scan = int(math.floor(t))
        local = _traced_local(transport, protocol, scan, np.full(protocol.angles_per_scan, t), step)
        return Sinogram.from_local(protocol, 0, local)
    obj, v, sim_protocol, unit = _fine_model(phantom, flow, protocol, supersample)
    A = cached_static_matrix(sim_protocol, obj.n, scheme)
    local = (A @ Transport(obj, v).at(t).vec()).reshape(protocol.angles_per_scan, protocol.n_det)
    return Sinogram.from_local(protocol, 0, local * unit)


# ---------------------------------------------------------------------------
# filtered backprojection


def ramp_filter(local_values: np.ndarray, det_spacing: float = 1.0) -> np.ndarray:
    """Filter each projection with ``|rho|`` in the frequency domain."""
    nd = local_values.shape[1]
    npad = 1 << int(math.ceil(math.log2(2 * nd)))
    freqs = np.fft.rfftfreq(npad, d=det_spacing)
    spec = np.fft.rfft(local_values, npad, axis=1) * np.abs(freqs)
    return np.fft.irfft(spec, npad, axis=1)[:, :nd]


def fbp_reconstruct(sino: Sinogram, n: int) -> ImageGrid:
    """Filtered backprojection of one scan; the image is labelled at mid-scan."""
    p = sino.protocol
    coverage = p.angles_per_scan * (math.pi / p.angles_per_scan)
    if not math.isclose(coverage, math.pi, rel_tol=1e-12):
        raise ValueError("sinogram angle coverage must be pi")
    q = ramp_filter(sino.local_values(), p.det_spacing)
    X, Y = center_mesh(n)
    X, Y = X.ravel(), Y.ravel()
    us = p.detector_offsets()
    out = np.zeros(n * n)
    for k, a in enumerate(p.local_angles()):
        c, s = trig(a)
        out += np.interp(X * c + Y * s, us, q[k], left=0.0, right=0.0)
    return ImageGrid((out * (math.pi / p.angles_per_scan)).reshape(n, n))
