"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The full-size runs (n = 256, ten scans, 180 angles) take a few minutes per
motion; the noise-free inputs of each motion are simulated once and shared
by the clean and the noisy run.
"""
import math
import shutil
import time

import numpy as np
import pytest
from click.testing import CliRunner
from conftest import VERDICTS
from oracles import supersampled_weights, traced_weights

from dynct.cli import main
from dynct.experiments import MOTIONS, ExperimentConfig, run_experiment, simulate_inputs
from dynct.geometry import ScanProtocol
from dynct.grid import FlowField, center_mesh, spatial_derivative
from dynct.motioncorr import build_moved_matrix
from dynct.phantoms import gaussian_mixture
from dynct.projector import build_static_matrix, fbp_reconstruct, simulate_dynamic_sinogram

SEED = 2024
SIGMA = 2.0

# reference flow RMSE values (d = 3, noise-free); the bound is twice these
REFERENCE_RMSE = {"shift": 0.6664, "rotation": 1.2257, "motion3": 0.4679}


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


class Runs:
    """Clean and noisy full-size experiments, computed on first use."""

    def __init__(self):
        self._cache = {}

    def get(self, motion: str) -> dict:
        if motion not in self._cache:
            clean_cfg = ExperimentConfig(motion=motion)
            t0 = time.perf_counter()
            data = simulate_inputs(clean_cfg)
            t_sim = time.perf_counter() - t0
            clean = run_experiment(clean_cfg, data)
            # simulation, reconstructions and both flow estimates
            t_clean = t_sim + sum(v for k, v in clean.timings.items() if k.startswith(("fbp", "active", "estimate")))
            noisy = run_experiment(ExperimentConfig(motion=motion, sigma=SIGMA, seed=SEED), data)
            self._cache[motion] = {"clean": clean, "noisy": noisy, "seconds": t_clean}
        return self._cache[motion]


@pytest.fixture(scope="session")
def runs():
    return Runs()


def test_criterion_01_zero_flow_equivalence():
    cfg = ExperimentConfig()
    p, n = cfg.protocol(), cfg.n
    t0 = time.perf_counter()
    M = build_moved_matrix(p, FlowField.zeros(n), n)
    seconds = time.perf_counter() - t0
    A = build_static_matrix(p, n, "length")
    assert M.shape == (180 * p.n_det, n * n)
    diff = abs(M - A).max()
    verdict(1, diff < 1e-9 and seconds < 30, f"max|A_moved(0) - A| = {diff:.2e}, assembly {seconds:.1f} s")


def test_criterion_02_geometry_oracle():
    rng = np.random.default_rng(2)
    n, worst = 8, 0.0
    for _ in range(100):
        alpha, u = rng.uniform(0, math.pi), rng.uniform(-6.0, 6.0)
        ref = supersampled_weights(alpha, u, n)
        got = traced_weights(alpha, u, n)
        for p in set(ref) | set(got):
            worst = max(worst, abs(ref.get(p, 0.0) - got.get(p, 0.0)))
    verdict(2, worst < 1e-6, f"worst per-pixel difference {worst:.2e} over 100 rays")


def test_criterion_03_lemma_identity():
    n = 128
    p = ScanProtocol.for_grid(n)
    A = build_static_matrix(p, n)
    f = gaussian_mixture(n)
    Rf = (A @ f.vec()).reshape(180, -1)
    Rx = (A @ spatial_derivative(f, "x").vec()).reshape(180, -1)
    Ry = (A @ spatial_derivative(f, "y").vec()).reshape(180, -1)
    c = np.cos(p.local_angles())[:, None]
    s = np.sin(p.local_angles())[:, None]
    ratio = np.linalg.norm(c * Ry - s * Rx, axis=1) / np.linalg.norm(Rf, axis=1)
    verdict(3, ratio.max() < 1e-2, f"max per-angle ratio {ratio.max():.2e}")


def test_criterion_04_theorem_residual():
    n = 128
    p = ScanProtocol.for_grid(n, m=3)
    f = gaussian_mixture(n)
    flow = FlowField(np.full((n, n), 0.5), np.zeros((n, n)))
    recs = [fbp_reconstruct(s, n) for s in simulate_dynamic_sinogram(f, flow, p)]
    lead = 0.5 * spatial_derivative(recs[1], "x").values
    res = lead + (recs[2].values - recs[0].values) / 2
    ratio = np.linalg.norm(res) / np.linalg.norm(lead)
    verdict(4, ratio < 0.1, f"residual / leading term = {ratio:.3f}")


def test_criterion_05_motion_estimation_clean(runs):
    parts, ok = [], True
    for motion in MOTIONS:
        r = runs.get(motion)
        rmse = r["clean"].rmse[3]
        limit = 2 * REFERENCE_RMSE[motion]
        t = r["seconds"]
        ok &= rmse <= limit and t < 180
        parts.append(f"{motion} {rmse:.3f} (<= {limit:.2f}, {t:.0f} s)")
    verdict(5, ok, "; ".join(parts))


def test_criterion_06_coarse_to_fine(runs):
    parts, ok = [], True
    for motion in ("rotation", "motion3"):
        rm = runs.get(motion)["clean"].rmse
        ok &= rm[3] < rm[0]
        parts.append(f"{motion} d3 {rm[3]:.3f} < d0 {rm[0]:.3f}")
    verdict(6, ok, "; ".join(parts))


def test_criterion_07_noise_robustness(runs):
    parts, ok = [], True
    for motion in MOTIONS:
        r = runs.get(motion)
        clean, noisy = r["clean"].rmse[3], r["noisy"].rmse[3]
        rel = abs(noisy - clean) / clean
        ok &= rel < 0.15
        parts.append(f"{motion} {clean:.3f} -> {noisy:.3f} ({rel:.1%})")
    verdict(7, ok, "; ".join(parts))


def ratios(report):
    e = report.errors
    return e["corrected_exact"] / e["stationary"], e["corrected_exact"] / e["uncorrected"]


def test_criterion_08_correction_exact_flow(runs):
    parts, ok = [], True
    for motion in MOTIONS:
        cs, cu = ratios(runs.get(motion)["clean"])
        cs_limit = 2.5 if motion == "shift" else 1.5
        ok &= cs <= cs_limit and cu <= 0.55
        parts.append(f"{motion} c/s {cs:.2f} (<= {cs_limit}) c/u {cu:.2f} (<= 0.55)")
    verdict(8, ok, "; ".join(parts))


def test_criterion_09_estimated_flow(runs):
    parts, ok = [], True
    for motion in MOTIONS:
        e = runs.get(motion)["clean"].errors
        q = e["corrected_estimated"] / e["corrected_exact"]
        ok &= q <= 2.0
        parts.append(f"{motion} {q:.2f}")
    verdict(9, ok, "estimated / exact error: " + "; ".join(parts) + " (<= 2)")


def test_criterion_10_noisy_correction(runs):
    parts, ok = [], True
    for motion in MOTIONS:
        cs, cu = ratios(runs.get(motion)["noisy"])
        ok &= cs <= 1.4 and cu <= 0.55
        parts.append(f"{motion} c/s {cs:.2f} (<= 1.4) c/u {cu:.2f} (<= 0.55)")
    verdict(10, ok, "; ".join(parts))


def test_criterion_11_determinism(tmp_path):
    out = tmp_path / "run"
    args = ["experiment", "--n", "64", "--motion", "motion3", "--sigma", "2", "--seed", str(SEED), "--out", str(out)]
    runner = CliRunner()
    snapshots = []
    for _ in range(2):
        res = runner.invoke(main, args, catch_exceptions=False)
        assert res.exit_code == 0, res.output
        files = sorted(p.name for p in out.iterdir() if p.suffix in (".csv", ".gr64"))
        snapshots.append({name: (out / name).read_bytes() for name in files})
        shutil.rmtree(out)
    same = snapshots[0] == snapshots[1] and len(snapshots[0]) > 10
    verdict(11, same, f"{len(snapshots[0])} CSV/GR64 files compared byte for byte")


def test_criterion_12_adjoint():
    n = 64
    p = ScanProtocol.for_grid(n)
    X, Y = center_mesh(n)
    th = math.radians(3)
    flow = FlowField(math.cos(th) * X + math.sin(th) * Y - X, -math.sin(th) * X + math.cos(th) * Y - Y)
    rng = np.random.default_rng(12)
    worst = 0.0
    for A in (build_static_matrix(p, n), build_moved_matrix(p, flow, n)):
        AT = A.T.tocsr()
        for _ in range(20):
            x = rng.standard_normal(n * n)
            y = rng.standard_normal(A.shape[0])
            lhs, rhs = np.dot(A @ x, y), np.dot(x, AT @ y)
            worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    verdict(12, worst < 1e-10, f"worst relative mismatch {worst:.1e} over 20 pairs, static and moved")
