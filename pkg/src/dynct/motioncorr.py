"""Projection along motion-deformed rays and the corrected reconstruction.

Each ray of a scan is traced through the bordered domain; the midpoints of
consecutive crossings are displaced by ``motion_scale(alpha) * v(midpoint)``
and joined by straight pieces.  The weights of a row are the lengths of
those pieces inside each pixel.  Solving ``A_moved x = b`` gives the object
at the reference time of the scan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .geometry import Ray, ScanProtocol, motion_scale, pixel_of, trace_capacity, trace_line, trace_w, trig
from .grid import ZERO, FlowField, ImageGrid, _bilinear_one
from .projector import Sinogram, _assemble, _trig_arrays
from .solvers import SolverConfig, lsqr


@dataclass
class MovedPath:
    vertices: np.ndarray
    ray: Ray
    scale: float
    params: np.ndarray | None = None  # arc-length positions of the sources on the ray

    @property
    def length(self) -> float:
        if len(self.vertices) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1).sum())


@numba.njit(cache=True)
def _displace(c, s, u, n, border, vx, vy, scale, refine, w, pix, out):
    cnt = trace_line(c, s, u, n, border, w, pix)
    k = 0
    shift = n / 2.0 - 0.5
    for q in range(cnt - 1):
        step = (w[q + 1] - w[q]) / (refine + 1)
        for r in range(refine + 1):
            wm = w[q] + (r + 0.5) * step
            x = u * c - wm * s
            y = u * s + wm * c
            if scale != 0.0:
                ux = _bilinear_one(vx, x + shift, y + shift, ZERO)
                uy = _bilinear_one(vy, x + shift, y + shift, ZERO)
                x = x + scale * ux
                y = y + scale * uy
            out[k, 0] = x
            out[k, 1] = y
            out[k, 2] = wm
            k += 1
    return k


@numba.njit(cache=True)
def _path_row(verts, nv, n, seg_w, cols, vals, write, arc=False):
    """Per-pixel lengths of a polyline inside the ``n x n`` domain.

    Consecutive pieces in the same pixel are merged into one entry, so a
    straight path yields exactly one entry per pixel.  With ``arc`` each
    piece is rescaled by (source spacing ``verts[:, 2]``) / (piece length),
    i.e. weights measure length along the undeformed ray.
    """
    half = n / 2.0
    k = 0
    last = -1
    for q in range(nv - 1):
        ax, ay = verts[q, 0], verts[q, 1]
        bx, by = verts[q + 1, 0], verts[q + 1, 1]
        L = math.hypot(bx - ax, by - ay)
        if L == 0.0:
            continue
        dx = (bx - ax) / L
        dy = (by - ay) / L
        f = (verts[q + 1, 2] - verts[q, 2]) / L if arc else 1.0
        cnt = trace_w(ax, ay, dx, dy, 0.0, L, -half, half, seg_w)
        for t in range(cnt - 1):
            wm = 0.5 * (seg_w[t] + seg_w[t + 1])
            p = pixel_of(ax + wm * dx, ay + wm * dy, n)
            if p < 0:
                last = -1
                continue
            length = (seg_w[t + 1] - seg_w[t]) * f
            if p == last:
                if write:
                    vals[k - 1] += length
            else:
                if write:
                    cols[k] = p
                    vals[k] = length
                k += 1
                last = p
    return k


@numba.njit(cache=True)
def _moved_row(c, s, u, n, border, vx, vy, scale, refine, arc, cols, vals, write):
    cap = trace_capacity(n / 2.0 + border)
    w = np.empty(cap)
    pix = np.empty(cap, dtype=np.int64)
    verts = np.empty((cap * (refine + 1), 3))
    nv = _displace(c, s, u, n, border, vx, vy, scale, refine, w, pix, verts)
    # a clipped piece crosses at most 2n lattice lines
    seg_w = np.empty(trace_capacity(n / 2.0))
    return _path_row(verts, nv, n, seg_w, cols, vals, write, arc)


@numba.njit(cache=True, parallel=True)
def _moved_counts(cos_a, sin_a, scales, us, n, border, vx, vy, refine, arc):
    na, nd = cos_a.shape[0], us.shape[0]
    counts = np.zeros(na * nd, dtype=np.int64)
    for r in numba.prange(na * nd):
        a, d = r // nd, r % nd
        counts[r] = _moved_row(
            cos_a[a], sin_a[a], us[d], n, border, vx, vy, scales[a], refine, arc,
            np.empty(0, dtype=np.int32), np.empty(0), False,
        )
    return counts


@numba.njit(cache=True, parallel=True)
def _moved_fill(cos_a, sin_a, scales, us, n, border, vx, vy, refine, arc, indptr, indices, data):
    na, nd = cos_a.shape[0], us.shape[0]
    for r in numba.prange(na * nd):
        a, d = r // nd, r % nd
        _moved_row(
            cos_a[a], sin_a[a], us[d], n, border, vx, vy, scales[a], refine, arc,
            indices[indptr[r] : indptr[r + 1]], data[indptr[r] : indptr[r + 1]], True,
        )


def _check_flow(flow: FlowField, n: int):
    if flow.n != n:
        raise ValueError(f"flow is {flow.n}x{flow.n}, grid is {n}x{n}")


def build_moved_path(
    ray: Ray, flow: FlowField, protocol: ScanProtocol, n: int, reference: float = 0.5, refine: int = 0
) -> MovedPath:
    """Displaced crossing midpoints of one ray (see module docstring)."""
    _check_flow(flow, n)
    c, s = trig(ray.alpha)
    scale = motion_scale(protocol, ray.alpha, reference)
    cap = trace_capacity(n / 2.0 + protocol.border)
    w = np.empty(cap)
    pix = np.empty(cap, dtype=np.int64)
    verts = np.empty((cap * (refine + 1), 3))
    nv = _displace(c, s, float(ray.u), n, protocol.border, flow.vx, flow.vy, scale, refine, w, pix, verts)
    return MovedPath(verts[:nv, :2].copy(), ray, scale, verts[:nv, 2].copy())


def path_weights(path: MovedPath, n: int, arc_length: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """``(pixel indices, lengths)`` of a moved path, duplicates summed."""
    nv = len(path.vertices)
    verts = np.zeros((nv, 3))
    verts[:, :2] = path.vertices
    if arc_length:
        if path.params is None:
            raise ValueError("path has no source parameters")
        verts[:, 2] = path.params
    seg_w = np.empty(max(trace_capacity(n / 2.0), 8))
    k = _path_row(verts, nv, n, seg_w, np.empty(0, dtype=np.int32), np.empty(0), False, arc_length)
    cols = np.empty(k, dtype=np.int32)
    vals = np.empty(k)
    _path_row(verts, nv, n, seg_w, cols, vals, True, arc_length)
    row = sp.csr_matrix((vals, cols, [0, k]), shape=(1, n * n))
    row.sum_duplicates()
    return row.indices.copy(), row.data.copy()


def build_moved_matrix(
    protocol: ScanProtocol,
    flow: FlowField,
    n: int,
    reference: float = 0.5,
    refine: int = 0,
    arc_length: bool = False,
) -> sp.csr_matrix:
    """``A_moved`` for one scan; rows ordered like :func:`build_static_matrix`.

    With ``arc_length`` the weight of each path piece is measured along the
    undeformed ray rather than along the moved path (they differ when the
    motion stretches the object).
    """
    _check_flow(flow, n)
    cos_a, sin_a = _trig_arrays(protocol)
    scales = np.array([motion_scale(protocol, a, reference) for a in protocol.local_angles()])
    us = protocol.detector_offsets()
    vx, vy = flow.vx, flow.vy
    b = protocol.border
    arc = bool(arc_length)
    counts = _moved_counts(cos_a, sin_a, scales, us, n, b, vx, vy, refine, arc)

    def fill(p, i, d):
        _moved_fill(cos_a, sin_a, scales, us, n, b, vx, vy, refine, arc, p, i, d)

    return _assemble(counts, fill, (protocol.angles_per_scan * protocol.n_det, n * n))


def reconstruct_corrected(
    sino: Sinogram,
    flow: FlowField,
    n: int,
    solver: SolverConfig | None = None,
    reference: float = 0.5,
    refine: int = 0,
    matrix: sp.csr_matrix | None = None,
    arc_length: bool = False,
) -> ImageGrid:
    """Least-squares reconstruction of one scan at its reference time.

    ``flow`` is the per-scan motion (zero flow gives the plain algebraic
    reconstruction).  A prebuilt ``matrix`` skips assembly.
    """
    solver = solver or SolverConfig.lsqr_default()
    A = matrix if matrix is not None else build_moved_matrix(sino.protocol, flow, n, reference, refine, arc_length)
    b = sino.local_values().ravel()
    result = lsqr(A, b, solver)
    return ImageGrid(result.x.reshape(n, n))
