"""Template deformation models.

* global affine fit, split into a rigid part (moves the data) and a
  symmetric scale/shear part (moves the template),
* Laplacian-regularised free-vertex solve, with an optional inner loop that
  keeps rebuilding the operator from the updated template,
* per-vertex affine (N-ICP style) baseline with edge stiffness.

Everything uses row-vector convention: a point ``x`` maps to ``x @ M + t``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .correspond import MatchList
from .mesh import LaplaceOperator, TriangleMesh, cotan_laplacian

try:
    import cvxopt
    from cvxopt import cholmod

    cholmod.options["supernodal"] = 2
    HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover
    HAVE_CHOLMOD = False

log = logging.getLogger(__name__)

CG_RTOL = 1e-10
DIRECT_BACKWARD_TOL = 1e-12


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------- sparse SPD solve

def _cholmod_solve(A, B):
    C = sparse.tril(A).tocoo()
    S = cvxopt.spmatrix(cvxopt.matrix(C.data), cvxopt.matrix(C.row.astype(np.int32)),
                        cvxopt.matrix(C.col.astype(np.int32)), size=A.shape)
    F = cholmod.symbolic(S, uplo="L")
    cholmod.numeric(S, F)
    X = cvxopt.matrix(np.asfortranarray(B))
    cholmod.solve(F, X)
    return np.array(X)


def solve_spd(A, B):
    """Solve ``A X = B`` for sparse symmetric positive definite ``A``.

    Sparse Cholesky (CHOLMOD through cvxopt) first, SuperLU with a symmetric
    ordering if that is unavailable or ``A`` is not numerically definite, and
    Jacobi-preconditioned CG when the direct result is inaccurate.
    """
    A = sparse.csc_matrix(A)
    B = np.asarray(B, dtype=np.float64)
    squeeze = B.ndim == 1
    B2 = B[:, None] if squeeze else B
    bnorm = np.linalg.norm(B2)
    if bnorm == 0:
        return np.zeros_like(B)
    X = None
    if HAVE_CHOLMOD:
        try:
            X = _cholmod_solve(A, B2)
        except ArithmeticError as exc:
            log.debug("Cholesky failed (%s); trying LU", exc)
    if X is None:
        try:
            lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                           options={"SymmetricMode": True})
            X = lu.solve(B2)
        except RuntimeError as exc:
            log.debug("LU factorisation failed (%s); falling back to CG", exc)
    if X is not None and np.all(np.isfinite(X)):
        # normwise backward error; stiff systems (huge lambda) have a large
        # relative residual even when the factorisation did its best
        eta = np.linalg.norm(A @ X - B2) / (spla.norm(A, 1) * np.linalg.norm(X) + bnorm)
        if eta <= DIRECT_BACKWARD_TOL:
            return X[:, 0] if squeeze else X
        log.debug("direct solve backward error %.3g; refining with CG", eta)
    else:
        X = None
    X = _cg_columns(A, B2, X)
    return X[:, 0] if squeeze else X


def _cg_columns(A, B, X0=None):
    n = A.shape[0]
    d = A.diagonal()
    d[d == 0] = 1.0
    M = sparse.diags(1.0 / d)
    out = np.empty_like(B)
    for c in range(B.shape[1]):
        b = B[:, c]
        x0 = None if X0 is None else X0[:, c]
        x, info = spla.cg(A, b, x0=x0, rtol=CG_RTOL, atol=0.0, maxiter=10 * n, M=M)
        rel = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300)
        if info != 0 and rel > 1e-8:
            raise SolverError(f"conjugate gradient did not converge: relative residual {rel:.3g}")
        out[:, c] = x
    return out


# ---------------------------------------------------------------- reports

@dataclass
class SolveReport:
    residual_shape: float
    residual_reg: float
    delta_x: float
    iterations_inner: int = 1
    unknowns: int = 0
    reg_equations: int = 0
    history: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict())


def stack_matches(matches):
    """Concatenate match lists into ``(template_idx, targets, weights)``."""
    matches = [m for m in matches if len(m)]
    if not matches:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0)
    return (np.concatenate([m.template_idx for m in matches]),
            np.concatenate([m.targets for m in matches]),
            np.concatenate([m.weights for m in matches]))


def shape_energy(X, matches) -> float:
    """Sum over pairs of ``w^2 * |x_t - target|^2``."""
    ti, tg, w = stack_matches(matches)
    if len(ti) == 0:
        return 0.0
    r = X[ti] - tg
    return float(np.sum((w ** 2)[:, None] * r * r))


def lb_energy(X_new, X_old, matches, L: LaplaceOperator, lam: float) -> float:
    """Squared residual of the stacked Laplacian system at ``X_new``."""
    reg = L.matrix @ (np.asarray(X_new) - np.asarray(X_old))
    return shape_energy(X_new, matches) + lam ** 2 * float(np.sum(reg * reg))


# ---------------------------------------------------------------- global affine

@dataclass(frozen=True)
class AffineUpdate:
    linear: np.ndarray  # M = B @ R
    translation: np.ndarray
    rotation: np.ndarray
    nonrigid: np.ndarray
    reflected: bool = False

    @classmethod
    def identity(cls):
        eye = np.eye(3)
        return cls(eye, np.zeros(3), eye, eye)

    def as_matrix(self) -> np.ndarray:
        """The 4x3 stacked ``[M; t]``."""
        return np.vstack([self.linear, self.translation])


def polar_split(M):
    """Factor ``M = B @ R`` with ``B`` symmetric and ``R`` a proper rotation.

    Returns ``(B, R, reflected)``. If ``det M < 0`` the axis of the smallest
    singular value is flipped in ``R`` and the sign moved into ``B``.
    """
    U, s, Vt = np.linalg.svd(M)
    D = np.ones(3)
    reflected = np.linalg.det(U @ Vt) < 0
    if reflected:
        D[-1] = -1.0
    R = (U * D) @ Vt
    B = (U * (s * D)) @ U.T
    B = 0.5 * (B + B.T)
    return B, R, bool(reflected)


def solve_global_affine(matches, template: TriangleMesh) -> AffineUpdate:
    ti, tg, w = stack_matches(matches)
    if len(ti) < 4:
        raise SolverError(f"global affine needs at least 4 correspondences, got {len(ti)}")
    design = np.hstack([template.vertices[ti], np.ones((len(ti), 1))]) * w[:, None]
    rhs = tg * w[:, None]
    sv = np.linalg.svd(design, compute_uv=False)
    rank = int(np.sum(sv > sv[0] * 1e-12))
    if rank < 4:
        raise SolverError(f"global affine system is rank deficient (rank {rank} < 4; points coplanar?)")
    A, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    M, t = A[:3], A[3]
    B, R, reflected = polar_split(M)
    if reflected:
        warnings.warn("affine fit contains a reflection; flipped the weakest axis", stacklevel=2)
    return AffineUpdate(M, t, R, B, reflected)


def apply_affine_split(update: AffineUpdate, template: TriangleMesh, data: TriangleMesh):
    """Rigid part moves the data, the rest moves the template.

    ``Y' = (Y - t) R^T`` and ``X' = X B``; pair residual norms are unchanged.
    """
    Y = (data.vertices - update.translation) @ update.rotation.T
    X = template.vertices @ update.nonrigid
    return template.with_vertices(X), data.with_vertices(Y)


# ---------------------------------------------------------------- stiffness schedule

@dataclass(frozen=True)
class StiffnessSchedule:
    start: float
    end: float
    steps: int
    interpolation: str = "geometric"

    def __post_init__(self):
        if not (self.start > 0 and self.end > 0):
            raise ValueError("schedule endpoints must be > 0")
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if self.interpolation != "geometric":
            raise ValueError(f"unsupported interpolation {self.interpolation!r}")

    def values(self) -> np.ndarray:
        return np.array([evaluate_schedule(self, i) for i in range(self.steps)])


def evaluate_schedule(schedule: StiffnessSchedule, i: int) -> float:
    if not 0 <= i < schedule.steps:
        raise IndexError(f"schedule index {i} outside [0, {schedule.steps})")
    if schedule.steps == 1 or i == 0:
        return float(schedule.start)
    if i == schedule.steps - 1:
        return float(schedule.end)
    return float(schedule.start * (schedule.end / schedule.start) ** (i / (schedule.steps - 1)))


# ---------------------------------------------------------------- Laplacian deformation

def lb_normal_equations(matches, L: LaplaceOperator, lam: float, X):
    """Normal matrix and right-hand side for the displacement ``dX``.

    The stacked system is ``[W P; lam L] X_new = [W Q Y; lam L X]``; written
    for ``dX = X_new - X`` it becomes ``(P^T W^2 P + lam^2 L^T L) dX = P^T W^2 (QY - PX)``.
    """
    n = L.shape[0]
    ti, tg, w = stack_matches(matches)
    w2 = w ** 2
    diag = np.bincount(ti, weights=w2, minlength=n)
    rhs = np.zeros((n, 3))
    np.add.at(rhs, ti, w2[:, None] * (tg - X[ti]))
    Lm = L.matrix
    A = sparse.diags(diag) + (lam ** 2) * (Lm.T @ Lm)
    return A.tocsc(), rhs


def solve_lb_deformation(matches, template: TriangleMesh, L: LaplaceOperator, lam: float):
    if not lam > 0:
        raise ValueError("stiffness must be > 0")
    L.check_source(template)
    if sum(len(m) for m in matches) == 0:
        raise SolverError("Laplacian solve needs at least one correspondence")
    X = template.vertices
    A, rhs = lb_normal_equations(matches, L, lam, X)
    dX = solve_spd(A, rhs)
    X_new = X + dX
    reg = L.matrix @ dX
    report = SolveReport(
        residual_shape=shape_energy(X_new, matches),
        residual_reg=lam ** 2 * float(np.sum(reg * reg)),
        delta_x=float(np.sum(dX * dX)),
        iterations_inner=1,
        unknowns=3 * template.n_vertices,
        reg_equations=template.n_vertices,
    )
    return template.with_vertices(X_new), report


def refine_with_operator_refresh(matches, template: TriangleMesh, lam: float, tol: float,
                                 max_inner: int = 10):
    """Repeat {rebuild Laplacian from X; Laplacian solve} with fixed matches.

    Stops once ``|dX|_F^2 < tol`` or after ``max_inner`` solves. The report
    carries the last inner solve's energies, ``delta_x`` of the total motion
    over all inner solves, and a per-inner ``history``.
    """
    current = template
    history = []
    total = np.zeros_like(template.vertices)
    report = None
    for k in range(max_inner):
        L = cotan_laplacian(current)
        new, rep = solve_lb_deformation(matches, current, L, lam)
        total += new.vertices - current.vertices
        history.append({"inner": k, "delta_x": rep.delta_x, "e_reg": rep.residual_reg,
                        "e_shp": rep.residual_shape})
        current, report = new, rep
        if rep.delta_x < tol:
            break
    report.iterations_inner = len(history)
    report.delta_x = float(np.sum(total * total))
    report.history = history
    return current, report


# ---------------------------------------------------------------- per-vertex affine baseline

def pvac_system(matches, template: TriangleMesh, gamma: float, lam: float):
    """Stacked sparse system ``A T = b`` over the ``4N x 3`` transform stack.

    Rows: ``lam * (T_u - T_v) G`` for every edge with ``G = diag(1, 1, 1, gamma)``
    (four scalar rows per edge), then ``w * [x_t 1] T_t = w * target`` per match.
    """
    n = template.n_vertices
    E = template.edges
    ne = len(E)
    g = np.array([1.0, 1.0, 1.0, gamma])
    r = np.arange(4 * ne)
    c = np.arange(4)
    rows = np.concatenate([r, r])
    cols = np.concatenate([(4 * E[:, [0]] + c).ravel(), (4 * E[:, [1]] + c).ravel()])
    vals = lam * np.concatenate([np.tile(g, ne), -np.tile(g, ne)])
    stiff = sparse.csr_matrix((vals, (rows, cols)), shape=(4 * ne, 4 * n))

    ti, tg, w = stack_matches(matches)
    k = len(ti)
    xh = np.hstack([template.vertices[ti], np.ones((k, 1))]) * w[:, None]
    drows = np.repeat(np.arange(k), 4)
    dcols = (4 * ti[:, None] + c).ravel()
    data = sparse.csr_matrix((xh.ravel(), (drows, dcols)), shape=(k, 4 * n))
    A = sparse.vstack([stiff, data]).tocsr()
    b = np.vstack([np.zeros((4 * ne, 3)), tg * w[:, None]])
    return A, b


def solve_pvac_deformation(matches, template: TriangleMesh, gamma: float = 1.0, lam: float = 1.0):
    if not lam > 0:
        raise ValueError("stiffness must be > 0")
    if sum(len(m) for m in matches) == 0:
        raise SolverError("per-vertex affine solve needs at least one correspondence")
    n = template.n_vertices
    A, b = pvac_system(matches, template, gamma, lam)
    T = solve_spd((A.T @ A).tocsc(), A.T @ b)
    Xh = np.hstack([template.vertices, np.ones((n, 1))])
    X_new = np.einsum("vi,vij->vj", Xh, T.reshape(n, 4, 3))
    dX = X_new - template.vertices
    n_stiff = 4 * len(template.edges)
    reg = A[:n_stiff] @ T
    report = SolveReport(
        residual_shape=shape_energy(X_new, matches),
        residual_reg=float(np.sum(reg * reg)),
        delta_x=float(np.sum(dX * dX)),
        iterations_inner=1,
        unknowns=T.size,
        reg_equations=len(template.edges),
    )
    return template.with_vertices(X_new), report
