"""Reduction of the dissipation model to closed-form kinematic maps.

Sampled minimizers of the dissipation functional are fitted by a
sum-of-squares polynomial ``D_hat(z) = nu(z)^T A nu(z)`` in the five
variables ``z = (xdot, ydot, thetadot, S_r, S_l)``, where ``nu`` lists all
monomials of degree at most ``k`` and ``A`` is positive semidefinite. The fit
is penalized so that ``D_hat`` is stationary in the body velocity at every
sample. For ``k = 1`` the stationarity condition of the fitted quadratic is a
linear system whose solution is the 3x2 kinematic map.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dissipation import BodyVelocity, QuadratureSpec, TrackSpeeds
from .geometry import TerrainModel, VehicleGeometry
from .solver import NotConvergedError, SolverOptions, functional_for, minimize_dissipation

N_VARS = 5
VAR_NAMES = ("xdot", "ydot", "thetadot", "Sr", "Sl")
STATIONARITY_PENALTY = 1e8
RESIDUAL_TOL = 1e-4
DEGENERATE_INPUT = 1e-3


class InfeasibleFitError(RuntimeError):
    pass


class SingularReductionError(RuntimeError):
    pass


def monomial_exponents(order_k: int, n_vars: int = N_VARS) -> list[tuple[int, ...]]:
    """Exponent vectors of all monomials of degree <= order_k, graded order."""
    out = []
    for deg in range(order_k + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), deg):
            e = [0] * n_vars
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


def monomial_label(exponent: tuple[int, ...]) -> str:
    parts = []
    for name, p in zip(VAR_NAMES, exponent):
        if p == 1:
            parts.append(name)
        elif p > 1:
            parts.append(f"{name}^{p}")
    return "*".join(parts) or "1"


def _basis(Z: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """nu(z) for each row of Z: shape (n, m)."""
    return np.prod(Z[:, None, :] ** exps[None, :, :], axis=2)


def _basis_derivative(Z: np.ndarray, exps: np.ndarray, var: int) -> np.ndarray:
    """d nu / d z_var for each row of Z: shape (n, m)."""
    lowered = exps.copy()
    coef = lowered[:, var].astype(float)
    lowered[:, var] = np.maximum(lowered[:, var] - 1, 0)
    return coef[None, :] * _basis(Z, lowered)


@dataclass(frozen=True)
class PDMSample:
    u: TrackSpeeds
    v_star: BodyVelocity
    objective: float
    converged: bool = True
    # dissipation near v_star: ((xdot, ydot, thetadot), value) pairs
    probes: tuple = ()


@dataclass(frozen=True)
class SOSModel:
    order_k: int
    coeff_A: np.ndarray
    exponents: tuple[tuple[int, ...], ...]
    stationarity_residual: float = 0.0
    rms_error: float = 0.0
    n_samples: int = 0

    @property
    def basis(self) -> list[str]:
        return [monomial_label(e) for e in self.exponents]

    @property
    def size(self) -> int:
        return len(self.exponents)

    def evaluate(self, qdot, u) -> float:
        z = np.concatenate([np.asarray(qdot, float), np.asarray(u, float)])[None]
        nu = _basis(z, np.array(self.exponents))[0]
        return float(nu @ self.coeff_A @ nu)

    def velocity_gradient(self, qdot, u) -> np.ndarray:
        """d D_hat / d qdot at one point."""
        z = np.concatenate([np.asarray(qdot, float), np.asarray(u, float)])[None]
        exps = np.array(self.exponents)
        nu = _basis(z, exps)[0]
        return np.array(
            [2.0 * _basis_derivative(z, exps, j)[0] @ self.coeff_A @ nu for j in range(3)]
        )

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.coeff_A).min())


@dataclass(frozen=True)
class KinematicMap:
    """Linear map from (S_r, S_l) to (xdot, ydot, thetadot)."""

    K: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, u) -> BodyVelocity:
        return BodyVelocity(*map(float, self.K @ np.asarray(u, float) + self.offset))

    @property
    def turning_coefficient(self) -> float:
        return float(0.5 * (self.K[2, 0] - self.K[2, 1]))


def default_input_grid(lo: float = -0.5, hi: float = 0.5, step: float = 0.1) -> list[TrackSpeeds]:
    n = int(round((hi - lo) / step)) + 1
    values = np.round(np.linspace(lo, hi, n), 12)
    return [TrackSpeeds(float(sr), float(sl)) for sr in values for sl in values]


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("PDMKIN_THREADS", "1")))
    except ValueError:
        return 1


def probe_velocities(v: np.ndarray, u, half_spacing: float) -> np.ndarray:
    """Velocities around ``v`` at which off-minimum dissipation is recorded.

    Steps of 10% of the input scale along each axis and along each pair of
    axes, both signs; the pairs fix the off-diagonal velocity curvature.
    """
    scale = 0.1 * max(abs(u[0]), abs(u[1]), DEGENERATE_INPUT)
    steps = scale * np.array([1.0, 1.0, 1.0 / half_spacing])
    dirs = [np.eye(3)[j] for j in range(3)]
    dirs += [np.eye(3)[i] + np.eye(3)[j] for i, j in ((0, 1), (0, 2), (1, 2))]
    return np.array([v + sign * steps * d for d in dirs for sign in (1, -1)])


def sample_pdm(
    geom: VehicleGeometry,
    terrain: TerrainModel,
    input_grid: list | None = None,
    quad: QuadratureSpec = QuadratureSpec(),
    options: SolverOptions = SolverOptions(),
    probes: bool = True,
) -> list[PDMSample]:
    """Solve the dissipation minimization at every input of ``input_grid``.

    Each sample also records the dissipation at twelve velocities around the
    minimizer (see :func:`probe_velocities`); those off-minimum values pin
    down the velocity curvature of the fit, which the minima alone leave
    undetermined.

    Raises ``NotConvergedError`` naming the first input whose solve failed.
    """
    grid = [TrackSpeeds(*u) for u in (input_grid or default_input_grid())]
    if not grid:
        raise ValueError("input_grid is empty")

    def one(u: TrackSpeeds) -> PDMSample:
        f = functional_for(u, geom, terrain, quad)
        res = minimize_dissipation(f, u, half_spacing=geom.half_spacing, options=options)
        probe = ()
        if probes:
            pts = probe_velocities(np.array(res.v_star), u, geom.half_spacing)
            probe = tuple((tuple(map(float, p)), float(f(p))) for p in pts)
        return PDMSample(u, res.v_star, res.objective, res.converged, probe)

    threads = _thread_cap()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(one, grid))
    else:
        samples = [one(u) for u in grid]
    for s in samples:
        if not s.converged:
            raise NotConvergedError(
                _as_result(s), context=f"input S_r={s.u.right:g}, S_l={s.u.left:g}"
            )
    return samples


def _as_result(s: PDMSample):
    from .solver import SolveResult

    return SolveResult(s.v_star, s.objective, 0, False, math.nan)


def _upper_pairs(m: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(m) for j in range(i, m)]


def _design_rows(Z: np.ndarray, exps: np.ndarray, pairs) -> np.ndarray:
    """Rows mapping upper-triangular A entries to D_hat(z)."""
    nu = _basis(Z, exps)
    cols = [nu[:, i] * nu[:, j] * (1.0 if i == j else 2.0) for i, j in pairs]
    return np.stack(cols, axis=1)


def _stationarity_rows(Z: np.ndarray, exps: np.ndarray, pairs) -> np.ndarray:
    """Rows mapping A entries to d D_hat / d qdot_j, stacked over j = 0..2."""
    nu = _basis(Z, exps)
    blocks = []
    for var in range(3):
        d = _basis_derivative(Z, exps, var)
        cols = [
            (d[:, i] * nu[:, j] + nu[:, i] * d[:, j]) * (1.0 if i == j else 2.0)
            for i, j in pairs
        ]
        blocks.append(np.stack(cols, axis=1))
    # interleave so that rows 3s..3s+2 belong to sample s
    stacked = np.stack(blocks, axis=1)
    return stacked.reshape(-1, len(pairs))


def _to_matrix(a: np.ndarray, m: int, pairs) -> np.ndarray:
    A = np.zeros((m, m))
    for val, (i, j) in zip(a, pairs):
        A[i, j] = A[j, i] = val
    return A


def _to_vector(A: np.ndarray, pairs) -> np.ndarray:
    return np.array([A[i, j] for i, j in pairs])


def _psd_projection(A: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * np.clip(w, 0.0, None)) @ V.T


class _ScaledLeastSquares:
    """Solver for ``min |M a - rhs|`` via QR with unit-norm columns."""

    def __init__(self, M: np.ndarray):
        norms = np.linalg.norm(M, axis=0)
        self.col_scale = 1.0 / np.where(norms > 0, norms, 1.0)
        self.q, self.r = np.linalg.qr(M * self.col_scale)
        diag = np.abs(np.diag(self.r))
        self.full_rank = diag.min() > 1e-13 * max(diag.max(), 1e-300)
        self.M = M

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.full_rank:
            x = np.linalg.solve(self.r, self.q.T @ rhs)
        else:
            x = np.linalg.lstsq(self.M * self.col_scale, rhs, rcond=1e-13)[0]
        return self.col_scale * x


def _psd_least_squares(
    J: np.ndarray,
    t: np.ndarray,
    m: int,
    pairs,
    max_iter: int = 20_000,
    tol: float = 1e-12,
    psd_slack: float = 1e-12,
) -> np.ndarray:
    """argmin |J a - t|^2  subject to mat(a) PSD, by ADMM.

    The unconstrained minimizer is returned directly when it is PSD up to
    round-off (eigenvalues above ``-psd_slack`` times the largest; the tiny
    negative ones are clipped). Otherwise ADMM splits ``mat(a) = S`` with
    ``S`` projected onto the PSD cone, the Frobenius coupling weighting
    off-diagonal entries twice, and the penalty parameter adapted by
    residual balancing. The PSD iterate ``S`` is returned.
    """
    n = J.shape[1]
    frob_sqrt = np.sqrt(np.array([1.0 if i == j else 2.0 for i, j in pairs]))
    a0 = _ScaledLeastSquares(J).solve(t)
    A0 = _to_matrix(a0, m, pairs)
    w = np.linalg.eigvalsh(A0)
    if w.min() >= -psd_slack * max(abs(w).max(), 1e-300):
        return _psd_projection(A0) if w.min() < 0 else A0

    def coupled(rho):
        return _ScaledLeastSquares(np.vstack([J, np.sqrt(rho) * np.diag(frob_sqrt)]))

    rho = max(float(np.median(np.linalg.norm(J, axis=0))) ** 2, 1e-12)
    system = coupled(rho)
    S = _psd_projection(A0)
    U = np.zeros((m, m))
    t_scale = max(np.linalg.norm(J.T @ t), 1e-300)
    for it in range(max_iter):
        rhs = np.concatenate([t, np.sqrt(rho) * frob_sqrt * _to_vector(S - U, pairs)])
        A = _to_matrix(system.solve(rhs), m, pairs)
        S_prev = S
        S = _psd_projection(A + U)
        U += A - S
        primal = np.linalg.norm(A - S) / max(np.linalg.norm(S), 1e-300)
        dual = rho * np.linalg.norm(S - S_prev) / t_scale
        if primal <= tol and dual <= tol:
            break
        if it % 10 == 9 and (primal > 10 * dual or dual > 10 * primal):
            factor = 2.0 if primal > dual else 0.5
            rho *= factor
            U /= factor
            system = coupled(rho)
    return _polish_on_face(J, t, S, m, pairs)


def _polish_on_face(J: np.ndarray, t: np.ndarray, S: np.ndarray, m: int, pairs) -> np.ndarray:
    """Exact least squares over the PSD face containing ``S``.

    ADMM identifies the range of the optimal ``A`` long before the iterate
    itself is accurate. With ``B`` spanning that range, ``A = B Y B^T`` is
    linear in the symmetric ``Y``; the unconstrained solve for ``Y`` is the
    optimum whenever it comes out PSD.
    """
    w, V = np.linalg.eigh(S)
    B = V[:, w > 1e-9 * max(w.max(), 1e-300)]
    r = B.shape[1]
    if r == 0:
        return S
    face_pairs = _upper_pairs(r)
    cols = []
    for k, l in face_pairs:
        E = np.outer(B[:, k], B[:, l])
        cols.append(_to_vector(E if k == l else E + E.T, pairs))
    T = np.stack(cols, axis=1)
    y = _ScaledLeastSquares(J @ T).solve(t)
    Y = _to_matrix(y, r, face_pairs)
    if np.linalg.eigvalsh(Y).min() < 0:
        return S
    A = B @ Y @ B.T
    a = _to_vector(A, pairs)
    if np.linalg.norm(J @ a - t) > np.linalg.norm(J @ _to_vector(S, pairs) - t) * (1 + 1e-12):
        return S
    return _psd_projection(A)


def fit_sos(
    samples: list[PDMSample],
    order_k: int = 1,
    penalty: float = STATIONARITY_PENALTY,
    residual_tol: float = RESIDUAL_TOL,
) -> SOSModel:
    """Fit ``D_hat = nu^T A nu`` with ``A`` PSD to sampled minima.

    Minimizes ``sum (D_hat - D)^2 + penalty * sum |d D_hat / d qdot|^2`` where
    the first sum runs over sample minima and their probes and the second
    over the minima only. Inputs with ``|S_r| + |S_l| < 1e-3`` are skipped:
    their dissipation is ~0 and carries no shape information.

    Raises
    ------
    InfeasibleFitError
        If the stationarity residual at the returned ``A`` exceeds
        ``residual_tol`` at any sample.
    """
    if order_k < 1:
        raise ValueError("order_k must be at least 1")
    usable = [s for s in samples if abs(s.u[0]) + abs(s.u[1]) >= DEGENERATE_INPUT]
    exps = np.array(monomial_exponents(order_k))
    m = len(exps)
    pairs = _upper_pairs(m)
    if len(usable) < len(pairs):
        raise ValueError(
            f"need at least {len(pairs)} non-degenerate samples for order {order_k}, "
            f"got {len(usable)}"
        )
    U_in = np.array([s.u for s in usable], float)
    if np.linalg.matrix_rank(U_in) < 2:
        raise ValueError("samples do not span the track-speed input space")

    Z_min = np.array([[*s.v_star, *s.u] for s in usable], float)
    y_min = np.array([s.objective for s in usable], float)
    probe_z, probe_y = [], []
    for s in usable:
        for v, val in s.probes:
            probe_z.append([*v, *s.u])
            probe_y.append(val)
    Z_fit = np.vstack([Z_min, np.array(probe_z, float).reshape(-1, N_VARS)])
    y_fit = np.concatenate([y_min, np.array(probe_y, float)])

    Phi = _design_rows(Z_fit, exps, pairs)
    G = _stationarity_rows(Z_min, exps, pairs)
    J = np.vstack([Phi, math.sqrt(penalty) * G])
    t = np.concatenate([y_fit, np.zeros(len(G))])
    A = _psd_least_squares(J, t, m, pairs)
    a = _to_vector(A, pairs)

    grad = (G @ a).reshape(len(usable), 3)
    residual = float(np.abs(grad).max())
    rms = float(np.sqrt(np.mean((Phi @ a - y_fit) ** 2)))
    model = SOSModel(order_k, A, tuple(map(tuple, exps.tolist())), residual, rms, len(usable))
    if residual > residual_tol:
        raise InfeasibleFitError(
            f"infeasible fit: stationarity residual {residual:.3g} exceeds {residual_tol:g}"
        )
    return model


def extract_kinematic_map(model: SOSModel, cond_limit: float = 1e12) -> KinematicMap:
    """Solve the stationarity of a quadratic fit for the velocity.

    With ``nu = (1, qdot, u)`` the condition ``d D_hat / d qdot = 0`` reads
    ``A_qq qdot + A_qu u + A_q1 = 0``, so ``qdot = K u + offset``.
    """
    if model.order_k != 1:
        raise ValueError("kinematic maps are only extracted from order-1 (quadratic) fits")
    A = model.coeff_A
    A_qq, A_qu, A_q1 = A[1:4, 1:4], A[1:4, 4:6], A[1:4, 0]
    w = np.linalg.eigvalsh(A_qq)
    if w.max() <= 0 or w.min() <= w.max() / cond_limit:
        raise SingularReductionError(
            "singular reduction: velocity block of the fitted quadratic is not invertible"
        )
    K = -np.linalg.solve(A_qq, A_qu)
    offset = -np.linalg.solve(A_qq, A_q1)
    return KinematicMap(K, offset)


def reduce_model(
    geom: VehicleGeometry,
    terrain: TerrainModel,
    input_grid: list | None = None,
    quad: QuadratureSpec = QuadratureSpec(),
    options: SolverOptions = SolverOptions(),
) -> tuple[list[PDMSample], SOSModel, KinematicMap]:
    """sample -> fit (k = 1) -> extract."""
    samples = sample_pdm(geom, terrain, input_grid, quad, options)
    model = fit_sos(samples, 1)
    return samples, model, extract_kinematic_map(model)
