import math

import numpy as np
import pytest

from dynct.geometry import Ray, ScanProtocol, motion_scale, ray_grid_intersections
from dynct.grid import ZERO, FlowField, ImageGrid, center_mesh, sample
from dynct.motioncorr import build_moved_matrix, build_moved_path, path_weights, reconstruct_corrected
from dynct.phantoms import gaussian_mixture
from dynct.projector import build_static_matrix, forward_project, object_at, simulate_dynamic_sinogram
from dynct.solvers import SolverConfig, lsqr


def rotation(n, degrees=3.0):
    X, Y = center_mesh(n)
    c, s = math.cos(math.radians(degrees)), math.sin(math.radians(degrees))
    return FlowField(c * X + s * Y - X, -s * X + c * Y - Y)


def static_row(alpha, u, n):
    tr = ray_grid_intersections(Ray(alpha, u), n)
    row = np.zeros(n * n)
    np.add.at(row, tr.pixels[tr.pixels >= 0], tr.lengths[tr.pixels >= 0])
    return row


def dense_row(path_fn, n, samples=200_000):
    """Per-pixel lengths of a densely sampled curve ``path_fn(w)``."""
    pts = path_fn(np.linspace(0.0, 1.0, samples))
    mid = 0.5 * (pts[1:] + pts[:-1])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    j = np.floor(mid[:, 0] + n / 2).astype(int)
    i = np.floor(mid[:, 1] + n / 2).astype(int)
    ok = (i >= 0) & (i < n) & (j >= 0) & (j < n)
    row = np.zeros(n * n)
    np.add.at(row, i[ok] * n + j[ok], seg[ok])
    return row


def as_dense(idx, vals, n):
    row = np.zeros(n * n)
    row[idx] = vals
    return row


def interior(n):
    """Flat indices of all pixels off the outer ring.

    Flow is zero outside the grid, so moved paths kink at the grid edge.
    """
    m = np.zeros((n, n), dtype=bool)
    m[1:-1, 1:-1] = True
    return m.ravel()


P = ScanProtocol(angles_per_scan=36, n_det=47, border=6)


def test_zero_flow_path_on_the_line():
    for alpha in (0.0, 0.4, 2.0):
        path = build_moved_path(Ray(alpha, 1.3), FlowField.zeros(32), P, 32)
        resid = path.vertices @ np.array([math.cos(alpha), math.sin(alpha)]) - 1.3
        assert np.abs(resid).max() < 1e-12


def test_reference_angle_path_on_the_line():
    alpha = math.pi / 2  # mid-scan: scale 0
    path = build_moved_path(Ray(alpha, -2.0), rotation(32, 10), P, 32)
    assert path.scale == 0.0
    assert np.abs(path.vertices[:, 1] + 2.0).max() < 1e-12


def test_constant_flow_shifts_every_vertex():
    n = 32
    flow = FlowField(np.full((n, n), 1.5), np.full((n, n), -0.75))
    ray = Ray(0.3, 2.0)
    base = build_moved_path(ray, FlowField.zeros(n), P, n)
    moved = build_moved_path(ray, flow, P, n)
    k = motion_scale(P, ray.alpha)
    inside = np.all(np.abs(base.vertices) < n / 2, axis=1)
    expected = np.broadcast_to(k * np.array([1.5, -0.75]), (inside.sum(), 2))
    np.testing.assert_allclose(moved.vertices[inside] - base.vertices[inside], expected, atol=1e-12)
    # border vertices outside the grid see zero flow
    outside = np.any(np.abs(base.vertices) > n / 2 + 0.5, axis=1)
    np.testing.assert_allclose(moved.vertices[outside], base.vertices[outside], atol=1e-12)


def test_empty_trace_gives_empty_path():
    path = build_moved_path(Ray(0.2, 500.0), FlowField.zeros(8), P, 8)
    assert len(path.vertices) == 0 and path.length == 0.0
    idx, vals = path_weights(path, 8)
    assert len(idx) == 0


def test_zero_flow_matrix_equals_static():
    n = 32
    A = build_static_matrix(P, n)
    M = build_moved_matrix(P, FlowField.zeros(n), n)
    assert M.shape == A.shape
    assert abs(M - A).max() < 1e-9


def test_mid_scan_rows_unchanged():
    n = 32
    A = build_static_matrix(P, n)
    M = build_moved_matrix(P, rotation(n, 8), n)
    k = 18  # local angle pi/2 -> motion scale 0
    assert motion_scale(P, P.local_angles()[k]) == 0.0
    block = slice(k * P.n_det, (k + 1) * P.n_det)
    assert abs(M[block] - A[block]).max() < 1e-12


def test_locality():
    n = 32
    vx = np.zeros((n, n))
    vx[:4, :4] = 2.0  # corner patch only
    M = build_moved_matrix(P, FlowField(vx, vx), n)
    A = build_static_matrix(P, n)
    d = P.n_det // 2  # u = 0 through the centre
    for k in (0, 9, 27):
        r = k * P.n_det + d
        if math.cos(P.local_angles()[k]) * math.sin(P.local_angles()[k]) <= 0:
            # rays through the centre at these angles stay far from the corner
            assert abs(M[r] - A[r]).max() < 1e-12


def test_constant_flow_row_is_shifted_line():
    n = 32
    c1, c2 = 1.0, 1.0
    flow = FlowField(np.full((n, n), c1), np.full((n, n), c2))
    for alpha, u in [(0.3, 2.0), (1.2, -5.0), (2.6, 0.5)]:
        path = build_moved_path(Ray(alpha, u), flow, P, n)
        idx, vals = path_weights(path, n)
        k = path.scale
        shifted = u + k * (c1 * math.cos(alpha) + c2 * math.sin(alpha))
        keep = interior(n)
        np.testing.assert_allclose(as_dense(idx, vals, n)[keep], static_row(alpha, shifted, n)[keep], atol=1e-9)


def test_rows_match_matrix():
    n = 24
    p = ScanProtocol(angles_per_scan=12, n_det=35, border=5)
    flow = rotation(n, 6)
    M = build_moved_matrix(p, flow, n)
    for k, d in [(0, 17), (3, 5), (7, 30), (11, 17)]:
        alpha, u = p.local_angles()[k], p.detector_offsets()[d]
        idx, vals = path_weights(build_moved_path(Ray(alpha, u), flow, p, n), n)
        np.testing.assert_allclose(M[k * p.n_det + d].toarray().ravel(), as_dense(idx, vals, n), atol=1e-12)


def test_assembly_is_deterministic():
    n = 24
    flow = rotation(n, 5)
    a = build_moved_matrix(P, flow, n)
    b = build_moved_matrix(P, flow, n)
    assert a.data.tobytes() == b.data.tobytes() and a.indices.tobytes() == b.indices.tobytes()


def test_weights_converge_linearly_as_flow_vanishes():
    n = 24
    # even detector count: offsets hit pixel centres, so no ray lies on an edge
    p = ScanProtocol(angles_per_scan=36, n_det=46, border=6)
    A = build_static_matrix(p, n)
    base = rotation(n, 20)
    d = []
    for eps in (1e-2, 1e-3):
        M = build_moved_matrix(p, base.scaled(eps), n)
        d.append(abs(M - A).max())
    assert d[1] < d[0]
    assert 5 < d[0] / d[1] < 20


def test_refinement_never_hurts():
    n = 16
    p = ScanProtocol(angles_per_scan=8, n_det=23, border=6)
    X, Y = center_mesh(n)
    window = np.clip(1 - (X**2 + Y**2) / 36, 0, None) ** 2  # smooth, zero near the edge
    r = rotation(n, 40)
    flow = FlowField(r.vx * window, r.vy * window)
    rng = np.random.default_rng(0)
    for _ in range(10):
        alpha, u = rng.uniform(0, math.pi), rng.uniform(-6, 6)
        k = motion_scale(p, alpha)
        c, s = math.cos(alpha), math.sin(alpha)
        half = n / 2 + p.border

        def curve(t):
            w = half * (3 * t - 1.5)
            x, y = u * c - w * s, u * s + w * c
            return np.column_stack([x + k * sample(flow.vx, x, y, ZERO), y + k * sample(flow.vy, x, y, ZERO)])

        ref = dense_row(curve, n)
        errs = []
        for refine in (0, 2, 8):  # nested point sets
            idx, vals = path_weights(build_moved_path(Ray(alpha, u), flow, p, n, refine=refine), n)
            errs.append(np.abs(as_dense(idx, vals, n) - ref).sum())
        # the dense oracle itself is good to about 1e-3
        assert errs[1] <= errs[0] + 1e-3 and errs[2] <= errs[1] + 1e-3


def test_arc_length_weights_for_rigid_shift_match_path_length():
    n = 24
    flow = FlowField(np.full((n, n), 0.8), np.full((n, n), -0.3))
    path = build_moved_path(Ray(0.7, 1.0), flow, P, n)
    a = as_dense(*path_weights(path, n), n)
    b = as_dense(*path_weights(path, n, arc_length=True), n)
    keep = interior(n)
    np.testing.assert_allclose(a[keep], b[keep], atol=1e-12)


def test_zero_flow_reconstruction_matches_plain_lsqr():
    n = 24
    p = ScanProtocol.for_grid(n, angles_per_scan=30)
    A = build_static_matrix(p, n)
    sino = forward_project(A, gaussian_mixture(n), p)
    cfg = SolverConfig(max_iter=50, tol=1e-10)
    rec = reconstruct_corrected(sino, FlowField.zeros(n), n, cfg)
    ref = lsqr(A, sino.local_values().ravel(), cfg).x
    # entries agree to rounding; LSQR amplifies that slightly over 50 steps
    assert np.linalg.norm(rec.vec() - ref) < 1e-3 * np.linalg.norm(ref)


def test_flow_size_checked():
    with pytest.raises(ValueError):
        build_moved_matrix(P, FlowField.zeros(8), 16)
    with pytest.raises(ValueError):
        build_moved_path(Ray(0.0, 0.0), FlowField.zeros(8), P, 16)


def test_corrected_reconstruction_beats_uncorrected():
    n = 64
    p = ScanProtocol.for_grid(n, m=1, angles_per_scan=90, border=8)
    f = gaussian_mixture(n)
    flow = rotation(n, 3)
    sino = simulate_dynamic_sinogram(f, flow, p)[0]
    truth = object_at(f, flow, 0.5)
    # few iterations: the model error is amplified as LSQR runs on
    cfg = SolverConfig(max_iter=30, tol=1e-8)
    good = reconstruct_corrected(sino, flow, n, cfg)
    bad = reconstruct_corrected(sino, FlowField.zeros(n), n, cfg)
    err = lambda img: np.linalg.norm(img.values - truth.values)  # noqa: E731
    assert err(good) < 0.6 * err(bad)
    assert isinstance(good, ImageGrid)
