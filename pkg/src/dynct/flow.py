"""Horn-Schunck motion estimation from per-scan reconstructions.

Flow is measured in pixels per scan.  A triple of consecutive
reconstructions gives one system

    [diag(fx^2) - lam L    diag(fx fy)        ] [vec vx]   [-fx ft]
    [diag(fx fy)           diag(fy^2) - lam L ] [vec vy] = [-fy ft]

with ``fx, fy`` the central differences of the middle image, ``L`` the
Neumann Laplacian and ``ft = (f_next - f_prev) / 2``.  All triples of a
sequence share the unknown flow and are solved jointly in the least-squares
sense, coarse to fine.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import FlowField, ImageGrid, _ddx, _ddy, diff_operators, resample
from .solvers import SolverConfig, SolveResult, cgls

log = logging.getLogger(__name__)


@dataclass
class HSSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    lam: float
    n: int


def assemble_hs(f_prev: ImageGrid, f_mid: ImageGrid, f_next: ImageGrid, lam: float = 1.0) -> HSSystem:
    n = f_mid.n
    if f_prev.n != n or f_next.n != n:
        raise ValueError("reconstructions must share the grid size")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    f = f_mid.values
    fx = _ddx(f).ravel()
    fy = _ddy(f).ravel()
    ft = ((f_next.values - f_prev.values) / 2.0).ravel()
    smooth = lam * diff_operators(n).dxx_plus_dyy
    A = sp.bmat(
        [
            [sp.diags(fx * fx) - smooth, sp.diags(fx * fy)],
            [sp.diags(fx * fy), sp.diags(fy * fy) - smooth],
        ],
        format="csr",
    )
    b = np.concatenate([-fx * ft, -fy * ft])
    return HSSystem(A, b, lam, n)


def stack_and_solve(
    systems: list[HSSystem],
    init: FlowField | None = None,
    config: SolverConfig | None = None,
    history: list | None = None,
) -> FlowField:
    """Least-squares solution of the vertically stacked systems (CGLS, warm start)."""
    if not systems:
        raise ValueError("need at least one system")
    n = systems[0].n
    if any(s.n != n for s in systems):
        raise ValueError("systems have different grid sizes")
    config = config or SolverConfig.cgls_default()
    A = sp.vstack([s.matrix for s in systems], format="csr")
    b = np.concatenate([s.rhs for s in systems])
    x0 = None
    if init is not None:
        if init.n != n:
            raise ValueError("initial flow has the wrong size")
        x0 = init.vec()
    result: SolveResult = cgls(A, b, config, x0=x0, AT=A.T.tocsr())
    log.debug("n=%d systems=%d %s", n, len(systems), result.summary())
    if history is not None:
        history.append((n, result))
    return FlowField.from_vec(result.x, n)


def triple_systems(recons: list[ImageGrid], lam: float = 1.0) -> list[HSSystem]:
    return [assemble_hs(recons[j - 1], recons[j], recons[j + 1], lam) for j in range(1, len(recons) - 1)]


def estimate_motion(
    recons: list[ImageGrid],
    depth: int = 3,
    lam: float = 1.0,
    config: SolverConfig | None = None,
    history: list | None = None,
) -> FlowField:
    """Coarse-to-fine flow estimate from ``m >= 3`` per-scan reconstructions.

    Level ``i`` (from ``depth`` down to 0) works on the reconstructions
    block-averaged by ``2**i`` and starts from the bilinearly upsampled
    previous estimate.
    """
    if len(recons) < 3:
        raise ValueError("need at least three reconstructions")
    n = recons[0].n
    if any(r.n != n for r in recons):
        raise ValueError("reconstructions must share the grid size")
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if n % (1 << depth) or n >> depth < 2:
        raise ValueError(f"depth {depth} too large for a {n}x{n} grid")
    v = None
    for level in range(depth, -1, -1):
        nl = n >> level
        imgs = [resample(r, nl) for r in recons]
        init = FlowField.zeros(nl) if v is None else resample(v, nl)
        v = stack_and_solve(triple_systems(imgs, lam), init, config, history)
    return v
