"""Krylov least-squares solvers with residual histories.

Both solve ``min ||A x - b||_2`` for a sparse or ``LinearOperator`` ``A``.
``cgls`` is conjugate gradients on the normal equations and supports a warm
start; ``lsqr`` is the Golub-Kahan bidiagonalisation method of Paige and
Saunders with optional damping.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import aslinearoperator

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Raised when an iteration diverges or (in strict mode) does not converge."""

    def __init__(self, message, residuals):
        super().__init__(f"{message} (last residual {residuals[-1] if residuals else float('nan'):.6g})")
        self.residuals = list(residuals)


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 500
    tol: float = 1e-8
    damp: float = 0.0
    strict: bool = False

    @classmethod
    def cgls_default(cls) -> "SolverConfig":
        return cls(max_iter=500, tol=1e-8)

    @classmethod
    def lsqr_default(cls) -> "SolverConfig":
        return cls(max_iter=200, tol=1e-6)


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residuals: list = field(default_factory=list)  # ||b - A x|| per iteration
    normal_residuals: list = field(default_factory=list)  # ||A^T (b - A x)||

    def summary(self) -> str:
        r = self.residuals[-1] if self.residuals else float("nan")
        return f"iterations={self.iterations} converged={self.converged} residual={r:.6g}"


def _finish(result: SolveResult, config: SolverConfig, name: str) -> SolveResult:
    if not np.all(np.isfinite(result.x)):
        raise ConvergenceError(f"{name} produced non-finite iterates", result.residuals)
    if not result.converged:
        if config.strict:
            raise ConvergenceError(f"{name} did not converge in {config.max_iter} iterations", result.residuals)
        log.info("%s stopped at iteration cap: %s", name, result.summary())
    return result


def cgls(A, b, config: SolverConfig | None = None, x0=None, AT=None) -> SolveResult:
    """Conjugate gradients on ``A^T A x = A^T b``.

    Stops when ``||A^T r|| <= tol * ||A^T b||``.  ``AT`` may supply a
    precomputed transpose for faster products.
    """
    config = config or SolverConfig.cgls_default()
    op = aslinearoperator(A)
    rmatvec = (lambda y: AT @ y) if AT is not None else op.rmatvec
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros(op.shape[1]) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - op.matvec(x) if x0 is not None else b.copy()
    s = rmatvec(r)
    ref = np.linalg.norm(rmatvec(b)) if x0 is not None else np.linalg.norm(s)
    p = s.copy()
    gamma = float(s @ s)
    res = SolveResult(x, 0, False, [float(np.linalg.norm(r))], [math.sqrt(gamma)])
    if ref == 0.0 or math.sqrt(gamma) <= config.tol * ref:
        res.converged = True
        return _finish(res, config, "cgls")
    for it in range(1, config.max_iter + 1):
        q = op.matvec(p)
        qq = float(q @ q)
        if qq == 0.0:
            break
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        s = rmatvec(r)
        gamma_new = float(s @ s)
        res.iterations = it
        res.residuals.append(float(np.linalg.norm(r)))
        res.normal_residuals.append(math.sqrt(gamma_new))
        if not math.isfinite(gamma_new):
            raise ConvergenceError("cgls diverged", res.residuals)
        if math.sqrt(gamma_new) <= config.tol * ref:
            res.converged = True
            break
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    res.x = x
    return _finish(res, config, "cgls")


def lsqr(A, b, config: SolverConfig | None = None, AT=None) -> SolveResult:
    """LSQR with ``atol = btol = config.tol`` stopping rules."""
    config = config or SolverConfig.lsqr_default()
    op = aslinearoperator(A)
    rmatvec = (lambda y: AT @ y) if AT is not None else op.rmatvec
    m, n = op.shape
    tol, damp = config.tol, config.damp
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros(n)

    u = b.copy()
    beta = float(np.linalg.norm(u))
    res = SolveResult(x, 0, False, [beta], [])
    if beta == 0.0:
        res.converged = True
        res.normal_residuals.append(0.0)
        return _finish(res, config, "lsqr")
    u /= beta
    v = rmatvec(u)
    alpha = float(np.linalg.norm(v))
    res.normal_residuals.append(alpha * beta)
    if alpha == 0.0:
        res.converged = True
        return _finish(res, config, "lsqr")
    v /= alpha
    w = v.copy()
    phibar, rhobar = beta, alpha
    bnorm = beta
    anorm2 = 0.0
    xnorm = 0.0
    # running quantities for ||x|| estimate
    res2 = 0.0
    z = 0.0
    cs2, sn2 = -1.0, 0.0
    xxnorm = 0.0

    for it in range(1, config.max_iter + 1):
        u = op.matvec(v) - alpha * u
        beta = float(np.linalg.norm(u))
        if beta > 0.0:
            u /= beta
            anorm2 += alpha * alpha + beta * beta + damp * damp
            v = rmatvec(u) - beta * v
            alpha = float(np.linalg.norm(v))
            if alpha > 0.0:
                v /= alpha

        # eliminate the damping parameter
        rhobar1 = math.hypot(rhobar, damp)
        cs1 = rhobar / rhobar1
        sn1 = damp / rhobar1
        psi = sn1 * phibar
        phibar = cs1 * phibar

        rho = math.hypot(rhobar1, beta)
        cs = rhobar1 / rho
        sn = beta / rho
        theta = sn * alpha
        rhobar = -cs * alpha
        phi = cs * phibar
        phibar = sn * phibar
        tau = sn * phi

        x += (phi / rho) * w
        w = v - (theta / rho) * w

        # ||x|| estimate (Paige-Saunders)
        delta = sn2 * rho
        gambar = -cs2 * rho
        rhs = phi - delta * z
        zbar = rhs / gambar
        xnorm = math.sqrt(xxnorm + zbar * zbar)
        gamma = math.hypot(gambar, theta)
        cs2 = gambar / gamma
        sn2 = theta / gamma
        z = rhs / gamma
        xxnorm += z * z

        res2 += psi * psi
        rnorm = math.sqrt(phibar * phibar + res2)
        arnorm = alpha * abs(tau)
        anorm = math.sqrt(anorm2)
        res.iterations = it
        res.residuals.append(rnorm)
        res.normal_residuals.append(arnorm)
        if not (math.isfinite(rnorm) and math.isfinite(xnorm)):
            raise ConvergenceError("lsqr diverged", res.residuals)

        test1 = rnorm / bnorm
        test2 = arnorm / (anorm * rnorm) if anorm * rnorm > 0 else 0.0
        rtol = tol + tol * anorm * xnorm / bnorm
        if test1 <= rtol or test2 <= tol or beta == 0.0 or alpha == 0.0:
            res.converged = True
            break
    res.x = x
    return _finish(res, config, "lsqr")
