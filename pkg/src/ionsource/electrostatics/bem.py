"""Collocation BEM for conductors at prescribed potentials.

Each panel carries a constant surface charge density.  Collocation at the
panel centroids gives ``A sigma = V`` with

    A_ij = 1/(4 pi eps0) * \\int_{panel j} dS / |c_i - y|.

Far interactions go through the multipole evaluator on panel quadrature
nodes; pairs closer than ``near_factor`` panel diameters are replaced by
the closed-form polygon integral via a sparse correction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres

from ..constants import COULOMB_K
from ..geometry import ElectrodeMesh
from .fmm import FmmConfig, FmmPlan
from .panels import exact_integrals, gauss_points, near_correction, near_pairs

log = logging.getLogger(__name__)

NEAR_FACTOR = 3.0
GUARD_FACTOR = 1.0


class SolverError(RuntimeError):
    """Krylov solve did not reach the tolerance; carries the residual history."""

    def __init__(self, message, residual_history):
        super().__init__(message)
        self.residual_history = list(residual_history)


@dataclass
class ChargeSolution:
    """Surface charge density (C/m^2) per panel for one group at 1 V."""

    group: str
    sigma: np.ndarray
    residual: float
    iterations: int
    residual_history: list = field(default_factory=list, repr=False)


class BemOperator:
    """Matrix-free collocation operator of one mesh.

    Parameters
    ----------
    mesh : ElectrodeMesh
    fmm : FmmConfig, optional
    near_factor : float
        Pairs with ``|c_i - c_j| < near_factor * diam_j`` use exact integrals.
    """

    def __init__(self, mesh: ElectrodeMesh, fmm: FmmConfig | None = None,
                 near_factor: float = NEAR_FACTOR):
        bad = np.flatnonzero(~(mesh.area > 1e-12 * mesh.diameter ** 2))
        if len(bad):
            raise ValueError(f"mesh has {len(bad)} zero-area panels (first: {bad[0]}); "
                             "singular self-term")
        self.mesh = mesh
        self.fmm = fmm or FmmConfig()
        self.gpts, self.gw, self.owner, self.gstart = gauss_points(mesh.vertices, mesh.nvert)
        c = mesh.centroid
        self.plan = FmmPlan(self.gpts, c, self.fmm)
        ti, pj = near_pairs(c, c, mesh.diameter, near_factor)
        corr = near_correction(c, ti, pj, mesh.vertices, mesh.nvert,
                               self.gpts, self.gw, self.gstart, False)[:, 0]
        n = len(mesh)
        self.near = sp.csr_matrix((corr, (ti, pj)), shape=(n, n))
        idx = np.arange(n)
        self.diag = COULOMB_K * exact_integrals(c, idx, idx, mesh.vertices,
                                                mesh.nvert, False)[:, 0]
        self.n_near = len(ti)

    def __len__(self):
        return len(self.mesh)

    def matvec(self, sigma: np.ndarray) -> np.ndarray:
        q = sigma[self.owner] * self.gw
        pot, _, _ = self.plan.evaluate(q, gradient=False)
        return COULOMB_K * (pot + self.near @ sigma)

    def solve(self, rhs: np.ndarray, tol: float = 1e-8, maxiter: int = 2000,
              restart: int = 200) -> tuple[np.ndarray, float, int, list]:
        """GMRES with a Jacobi preconditioner; returns ``(sigma, residual, its, history)``."""
        n = len(self)
        A = LinearOperator((n, n), matvec=self.matvec, dtype=np.float64)
        Minv = LinearOperator((n, n), matvec=lambda r: r / self.diag, dtype=np.float64)
        history: list[float] = []
        bnorm = float(np.linalg.norm(rhs))
        if bnorm == 0.0:
            return np.zeros(n), 0.0, 0, history
        x = np.zeros(n)
        its = 0
        rtol = tol
        res = 1.0
        for _ in range(4):
            x, info = gmres(A, rhs, x0=x, rtol=rtol, atol=0.0, restart=min(restart, n),
                            maxiter=max(1, maxiter // restart), M=Minv,
                            callback=lambda r: history.append(float(r)),
                            callback_type="pr_norm")
            its = len(history)
            res = float(np.linalg.norm(rhs - A.matvec(x))) / bnorm
            if res <= tol:
                return x, res, its, history
            if info > 0 and its >= maxiter:
                break
            # the preconditioned residual met rtol but the true one did not
            rtol *= 0.1 * tol / res
        raise SolverError(f"GMRES stopped at relative residual {res:.3e} > {tol:.1e} "
                          f"after {its} iterations", history)


def solve_basis(mesh: ElectrodeMesh, driven: str, tol: float = 1e-8,
                fmm: FmmConfig | None = None, operator: BemOperator | None = None,
                maxiter: int = 2000) -> ChargeSolution:
    """Charge density with group ``driven`` at 1 V and every other panel at 0 V."""
    op = operator or BemOperator(mesh, fmm)
    if driven not in mesh.groups:
        raise KeyError(f"unknown electrode group {driven!r}")
    rhs = mesh.group_mask(driven).astype(np.float64)
    sigma, res, its, hist = op.solve(rhs, tol=tol, maxiter=maxiter)
    log.info("solved %s: %d panels, %d iterations, residual %.2e", driven, len(mesh), its, res)
    return ChargeSolution(driven, sigma, res, its, hist)


# --------------------------------------------------------------------------
# basis evaluation
# --------------------------------------------------------------------------

class MeshCharges:
    """Quadrature sources of one mesh together with its solved group densities."""

    def __init__(self, mesh: ElectrodeMesh, solutions: dict[str, ChargeSolution],
                 fmm: FmmConfig | None = None):
        self.mesh = mesh
        self.solutions = dict(solutions)
        self.fmm = fmm or FmmConfig()
        self.gpts, self.gw, self.owner, self.gstart = gauss_points(mesh.vertices, mesh.nvert)

    @property
    def groups(self):
        return list(self.solutions)

    def guard_flags(self, points: np.ndarray, factor: float = GUARD_FACTOR) -> np.ndarray:
        """True for points within ``factor`` panel diameters of a panel."""
        # distance to the panel is at least |x - c| - diam/2
        ti, _ = near_pairs(points, self.mesh.centroid, self.mesh.diameter, factor + 0.5)
        flags = np.zeros(len(points), bool)
        flags[ti] = True
        return flags

    def evaluate(self, points: np.ndarray, weights: dict[str, float] | None = None,
                 per_group: bool = False, plan: FmmPlan | None = None):
        """Potential (V) and field (V/m) at ``points``.

        With ``per_group`` the result has a leading group axis (unit voltage
        on each group in ``self.groups``); otherwise groups are weighted by
        ``weights`` (volts) and summed.
        """
        points = np.ascontiguousarray(points, dtype=np.float64)
        m = self.mesh
        plan = plan or FmmPlan(self.gpts, points, self.fmm)
        ti, pj = near_pairs(points, m.centroid, m.diameter, NEAR_FACTOR)
        corr = near_correction(points, ti, pj, m.vertices, m.nvert,
                               self.gpts, self.gw, self.gstart, True)
        if per_group:
            sigmas = [self.solutions[g].sigma for g in self.groups]
        else:
            weights = weights or {}
            sig = np.zeros(len(m))
            for g, v in weights.items():
                if g in self.solutions and v != 0.0:
                    sig += v * self.solutions[g].sigma
            sigmas = [sig]
        pots, fields = [], []
        for sig in sigmas:
            pot = np.zeros(len(points))
            grad = np.zeros((len(points), 3))
            if np.any(sig):
                pot, grad, _ = plan.evaluate(sig[self.owner] * self.gw, gradient=True)
                cs = corr * sig[pj][:, None]
                pot = pot + np.bincount(ti, cs[:, 0], minlength=len(points))
                grad = grad + np.stack([np.bincount(ti, cs[:, k], minlength=len(points))
                                        for k in (1, 2, 3)], axis=1)
            pots.append(COULOMB_K * pot)
            fields.append(-COULOMB_K * grad)
        if per_group:
            return np.array(pots), np.array(fields)
        return pots[0], fields[0]
