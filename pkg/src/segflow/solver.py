"""Damped Gauss-Newton (Levenberg-Marquardt) with matrix-free CGNE inner solves.

The solver only sees a residual function ``F(x)`` and, at each iterate, a
``JacobianOracle`` exposing ``v -> J v``, ``u -> J^T u`` and ``diag(J^T J)``.
Neither ``J`` nor ``J^T J`` is ever assembled.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import SolverError

logger = logging.getLogger(__name__)

DIAG_FLOOR = 1e-12


class JacobianBlock(NamedTuple):
    """Derivatives of a run of residual rows w.r.t. the few parameters each depends on.

    Row ``rows[i]`` depends on parameters ``cols[i, :]`` with partial derivatives
    ``vals[i, :]``.
    """

    term: str
    rows: np.ndarray  # (n,)
    cols: np.ndarray  # (n, c)
    vals: np.ndarray  # (n, c)


class JacobianOracle:
    """Matrix-free view of ``J(x)``."""

    def __init__(self, shape, matvec: Callable, rmatvec: Callable, diag_jtj: np.ndarray):
        self.shape = tuple(shape)
        self.matvec = matvec
        self.rmatvec = rmatvec
        self.diag_jtj = np.asarray(diag_jtj, dtype=float)

    @classmethod
    def from_dense(cls, J: np.ndarray) -> JacobianOracle:
        J = np.asarray(J, dtype=float)
        return cls(J.shape, lambda v: J @ v, lambda u: J.T @ u, np.einsum("ij,ij->j", J, J))

    @classmethod
    def from_blocks(cls, blocks: list[JacobianBlock], shape) -> JacobianOracle:
        m, n = shape
        for b in blocks:
            if not np.all(np.isfinite(b.vals)):
                bad = np.argwhere(~np.isfinite(b.vals))[0]
                raise SolverError(f"non-finite derivative in block '{b.term}' at row {int(b.rows[bad[0]])}")
        rows = [b.rows for b in blocks]
        cols = [b.cols for b in blocks]
        vals = [b.vals for b in blocks]
        flat_cols = np.concatenate([c.ravel() for c in cols]) if cols else np.zeros(0, dtype=np.int64)
        if vals:
            # entries sharing (row, col) add up before squaring
            flat_rows = np.concatenate([np.repeat(r, c.shape[1]) for r, c in zip(rows, cols)])
            keys, inv = np.unique(flat_rows.astype(np.int64) * n + flat_cols, return_inverse=True)
            summed = np.bincount(inv, weights=np.concatenate([v.ravel() for v in vals]))
            diag = np.bincount(keys % n, weights=summed**2, minlength=n)
        else:
            diag = np.zeros(n)

        def matvec(v):
            out = np.zeros(m)
            for r, c, a in zip(rows, cols, vals):
                out[r] += np.einsum("ij,ij->i", a, v[c])
            return out

        def rmatvec(u):
            contrib = np.concatenate([(a * u[r][:, None]).ravel() for r, a in zip(rows, vals)]) if vals else None
            return np.bincount(flat_cols, weights=contrib, minlength=n).astype(float)

        return cls(shape, matvec, rmatvec, diag)

    def to_dense(self) -> np.ndarray:
        """Materialize J column by column. Test/debug helper only."""
        m, n = self.shape
        eye = np.eye(n)
        return np.stack([self.matvec(eye[:, j]) for j in range(n)], axis=1)


class LeastSquaresProblem:
    """Interface consumed by ``lm_minimize``.

    Subclasses implement ``residuals`` and ``linearize``; ``on_accept`` is the
    hook fired after each accepted step and returns True when it changed the
    residual function (e.g. refreshed correspondences).
    """

    def residuals(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def linearize(self, x: np.ndarray) -> tuple[np.ndarray, JacobianOracle]:
        raise NotImplementedError

    def on_accept(self, x: np.ndarray) -> bool:
        return False


class FunctionProblem(LeastSquaresProblem):
    """Problem from plain callables: ``fun(x) -> F`` and ``jac(x) -> dense J``."""

    def __init__(self, fun: Callable, jac: Callable):
        self.fun = fun
        self.jac = jac

    def residuals(self, x):
        return np.asarray(self.fun(x), dtype=float)

    def linearize(self, x):
        return self.residuals(x), JacobianOracle.from_dense(self.jac(x))


@dataclass
class ProblemState:
    """Structured view of the unknown vector: K poses per frame pair, then the lifting weights."""

    n_segments: int
    n_pairs: int
    n_weights: int
    x: np.ndarray = None

    def __post_init__(self):
        if self.x is None:
            self.x = np.zeros(self.dim)
            self.weights[:] = 1.0
        self.x = np.asarray(self.x, dtype=float)
        if self.x.shape != (self.dim,):
            raise ValueError(f"state vector has shape {self.x.shape}, expected ({self.dim},)")

    @property
    def dim(self) -> int:
        return self.n_segments * self.n_pairs * 6 + self.n_weights

    @property
    def n_pose_params(self) -> int:
        return self.n_segments * self.n_pairs * 6

    def poses(self, pair: int) -> np.ndarray:
        """(K, 6) view of the poses of frame pair ``pair``."""
        k = self.n_segments
        return self.x[pair * k * 6 : (pair + 1) * k * 6].reshape(k, 6)

    def all_poses(self) -> np.ndarray:
        return self.x[: self.n_pose_params].reshape(self.n_pairs, self.n_segments, 6)

    @property
    def weights(self) -> np.ndarray:
        return self.x[self.n_pose_params :]

    def copy(self) -> ProblemState:
        return ProblemState(self.n_segments, self.n_pairs, self.n_weights, self.x.copy())


@dataclass
class SolverOptions:
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    max_outer_iters: int = 50
    cg_max_iters: int = 0  # 0 -> 10 * dim(x)
    cg_tol: float = 1e-6
    converge_eps: float = 1e-6
    converge_window: int = 3
    energy_floor: float = 1e-20
    allow_nonmonotonic: bool = True
    max_nonmonotonic: int = 3
    stall_window: int = 8  # stop after this many iterations without a new best energy; 0 disables

    def __post_init__(self):
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be > 0")
        if not (self.lambda_up > 1.0 > self.lambda_down > 0.0):
            raise ValueError("need lambda_up > 1 > lambda_down > 0")
        if not (self.cg_tol > 0 and self.converge_eps > 0):
            raise ValueError("tolerances must be > 0")
        if self.converge_window < 1 or self.max_outer_iters < 1 or self.stall_window < 0:
            raise ValueError("iteration counts must be positive")


def evaluate_jacobian(problem: LeastSquaresProblem, x: np.ndarray) -> JacobianOracle:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise SolverError("state vector contains non-finite entries")
    return problem.linearize(x)[1]


@dataclass
class CGReport:
    iterations: int
    rel_residual: float
    converged: bool


def cgne_solve(oracle: JacobianOracle, F: np.ndarray, lam: float, opts: SolverOptions | None = None):
    """Solve ``(J^T J + lam diag(J^T J)) dx = -J^T F`` by Jacobi-preconditioned CG.

    Only the oracle's two actions and its exact ``diag(J^T J)`` are used.
    Diagonal entries below 1e-12 are clamped before damping so that
    parameters no residual touches stay at zero step.

    Returns:
        ``(dx, CGReport)``; ``dx`` is the iterate with the smallest normal
        equation residual seen.
    """
    opts = opts or SolverOptions()
    if lam < 0:
        raise ValueError("damping must be non-negative")
    n = oracle.shape[1]
    max_iters = opts.cg_max_iters or 10 * n
    D = np.maximum(oracle.diag_jtj, DIAG_FLOOR)

    def A(v):
        return oracle.rmatvec(oracle.matvec(v)) + lam * D * v

    b = -oracle.rmatvec(np.asarray(F, dtype=float))
    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0.0:
        return x, CGReport(0, 0.0, True)
    minv = 1.0 / ((1.0 + lam) * D)
    r = b.copy()
    z = minv * r
    p = z.copy()
    rz = r @ z
    best_x, best_res = x.copy(), 1.0
    it = 0
    for it in range(1, max_iters + 1):
        Ap = A(p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        step = rz / pAp
        x += step * p
        r -= step * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel < best_res:
            best_x, best_res = x.copy(), rel
        if rel < opts.cg_tol:
            break
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    # the recurrence residual drifts; report the true one
    true_rel = float(np.linalg.norm(b - A(best_x)) / bnorm)
    return best_x, CGReport(it, true_rel, true_rel < opts.cg_tol)


@dataclass
class TraceRow:
    iteration: int
    energy: float
    lam: float
    step_norm: float
    accepted: bool


@dataclass
class LMResult:
    x: np.ndarray
    energy: float
    trace: list[TraceRow] = field(default_factory=list)
    converged: bool = False

    @property
    def energies(self) -> np.ndarray:
        return np.array([row.energy for row in self.trace])

    def __iter__(self):
        # allows ``x, trace = lm_minimize(...)``
        return iter((self.x, self.trace))


def lm_minimize(problem: LeastSquaresProblem, x0: np.ndarray, opts: SolverOptions | None = None) -> LMResult:
    """Minimize ``||F(x)||^2`` from ``x0``.

    Energy-decreasing steps shrink the damping. With ``allow_nonmonotonic``
    up to ``max_nonmonotonic`` consecutive energy-increasing steps are still
    taken (with damping increased); beyond that they are rejected. An
    excursion that accepts ``max_nonmonotonic`` steps without reaching a new
    lowest energy is abandoned: the iterate returns to the best one and only
    decreasing steps are taken until the best improves again. The trace
    holds the energy of the current iterate after every outer iteration, and
    the lowest-energy iterate observed is returned.

    Besides the energy-difference test, the loop stops once the best energy
    has not improved by more than ``converge_eps`` (relative) for
    ``stall_window`` iterations. A step hook that changes the residual
    function (correspondence refresh) can otherwise settle into a two-state
    cycle that never satisfies the difference test.
    """
    opts = opts or SolverOptions()
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise SolverError("initial state contains non-finite entries")
    F = problem.residuals(x)
    E = float(F @ F)
    if not np.isfinite(E):
        raise SolverError("energy at the initial state is not finite")

    lam = opts.lambda0
    trace = [TraceRow(0, E, lam, 0.0, True)]
    best_x, best_E = x.copy(), E
    streak = 0
    uphill = 0  # consecutive accepted energy-increasing steps
    excursion = 0  # accepted steps since the last new best
    monotone = not opts.allow_nonmonotonic
    stalled = 0
    converged = False
    lin = None
    for it in range(1, opts.max_outer_iters + 1):
        if lin is None:
            lin = problem.linearize(x)
        Fx, J = lin
        dx, report = cgne_solve(J, Fx, lam, opts)
        step_norm = float(np.linalg.norm(dx))
        if step_norm <= 1e-15 * (np.linalg.norm(x) + 1e-15):
            trace.append(TraceRow(it, E, lam, step_norm, False))
            converged = True
            break
        x_new = x + dx
        F_new = problem.residuals(x_new)
        E_new = float(F_new @ F_new)

        accepted = False
        if np.isfinite(E_new):
            if E_new < E:
                accepted, uphill = True, 0
                lam *= opts.lambda_down
            elif not monotone and uphill < opts.max_nonmonotonic:
                accepted, uphill = True, uphill + 1
                lam *= opts.lambda_up
            else:
                lam *= opts.lambda_up
        else:
            lam *= opts.lambda_up

        if accepted:
            small = abs(E_new - E) <= opts.converge_eps * E or E_new <= opts.energy_floor
            x = x_new
            if problem.on_accept(x):
                F_new = problem.residuals(x)
                E_new = float(F_new @ F_new)
            E = E_new
            lin = None
            streak = streak + 1 if small else 0
            trace.append(TraceRow(it, E, lam, step_norm, True))
            stalled = 0 if E < best_E * (1.0 - opts.converge_eps) else stalled + 1
            if E < best_E:
                best_x, best_E = x.copy(), E
                excursion = 0
                monotone = not opts.allow_nonmonotonic
            else:
                excursion += 1
            logger.debug("lm it %d: E=%.6e lam=%.2e |dx|=%.2e cg=%d", it, E, lam, step_norm, report.iterations)
            if streak >= opts.converge_window:
                converged = True
                break
            if not monotone and excursion >= opts.max_nonmonotonic:
                # excursion budget spent without a new best: resume from it, monotone
                monotone, excursion, uphill = True, 0, 0
                x = best_x.copy()
                problem.on_accept(x)
                E = float(np.sum(problem.residuals(x) ** 2))
                best_E = min(best_E, E)
                lin = None
        else:
            trace.append(TraceRow(it, E, lam, step_norm, False))
            stalled += 1
            if lam > 1e16:
                break
        if opts.stall_window and stalled >= opts.stall_window:
            converged = True
            break
    return LMResult(best_x, best_E, trace, converged)


def write_trace_csv(trace: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "energy", "lambda", "step_norm", "accepted"])
        for row in trace:
            w.writerow([row.iteration, repr(row.energy), repr(row.lam), repr(row.step_norm), int(row.accepted)])
