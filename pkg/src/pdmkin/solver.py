"""Minimization of a dissipation functional over the body velocity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

from .contact import (
    ContactState,
    grouser_contacts,
    loss_phase,
    normal_forces,
    stair_contacts,
)
from .dissipation import (
    BodyVelocity,
    QuadratureSpec,
    SumOfNorms,
    TrackSpeeds,
    flat_functional,
    grouser_functional,
    stairs_functional,
)
from .geometry import TerrainKind, TerrainModel, VehicleGeometry

DEFAULT_GTOL = 1e-8
DEFAULT_MAX_ITER = 10_000
DEFAULT_STARTS = 5
TIE_REGULARIZATION = 1e-12


class NotConvergedError(RuntimeError):
    def __init__(self, result: "SolveResult", context: str = ""):
        msg = "not converged"
        if context:
            msg += f" ({context})"
        msg += f": gradient norm {result.gradient_norm:.3g} after {result.iterations} iterations"
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True)
class SolveResult:
    v_star: BodyVelocity
    objective: float
    iterations: int
    converged: bool
    gradient_norm: float


@dataclass(frozen=True)
class SolverOptions:
    gtol: float = DEFAULT_GTOL
    max_iter: int = DEFAULT_MAX_ITER
    n_starts: int = DEFAULT_STARTS
    seed: int = 0


def differential_drive_guess(u: TrackSpeeds, half_spacing: float | None) -> np.ndarray:
    sr, sl = u
    turn = 0.0 if not half_spacing else (sr - sl) / (2.0 * half_spacing)
    return np.array([(sr + sl) / 2.0, 0.0, turn])


class _Objective:
    """Functional plus the tie-breaking ``reg * |v|^2`` term."""

    def __init__(self, functional: Callable, reg: float):
        self.f = functional
        self.reg = reg
        self.analytic = hasattr(functional, "gradient") and hasattr(functional, "hessian")

    def value(self, v):
        return self.f(v) + self.reg * float(np.dot(v, v))

    def grad(self, v):
        if self.analytic:
            return self.f.gradient(v) + 2 * self.reg * np.asarray(v)
        return optimize.approx_fprime(v, self.value, 1e-9)

    def hess(self, v):
        return self.f.hessian(v) + 2 * self.reg * np.eye(3)


def _local_solve(obj: _Objective, x0: np.ndarray, opts: SolverOptions):
    """One local minimization; returns (x, iterations)."""
    iters = 0
    if obj.analytic:
        res = optimize.minimize(
            obj.value, x0, jac=obj.grad, hess=obj.hess, method="trust-exact",
            options={"gtol": opts.gtol, "maxiter": opts.max_iter},
        )
        x, iters = res.x, res.nit
        if np.linalg.norm(obj.grad(x)) < opts.gtol:
            return x, iters
    res = optimize.minimize(
        obj.value, x0 if not obj.analytic else x, jac=obj.grad, method="BFGS",
        options={"gtol": opts.gtol, "maxiter": opts.max_iter},
    )
    x, iters = res.x, iters + res.nit
    if np.linalg.norm(obj.grad(x)) < opts.gtol:
        return x, iters
    # gradients stagnated: derivative-free simplex, then one more gradient polish
    res = optimize.minimize(
        obj.value, x, method="Nelder-Mead",
        options={"xatol": 1e-13, "fatol": 1e-16, "maxiter": opts.max_iter},
    )
    x, iters = res.x, iters + res.nit
    if obj.analytic:
        res = optimize.minimize(
            obj.value, x, jac=obj.grad, hess=obj.hess, method="trust-exact",
            options={"gtol": opts.gtol, "maxiter": opts.max_iter},
        )
        x, iters = res.x, iters + res.nit
    return x, iters


def _newton_polish(obj: _Objective, x: np.ndarray, steps: int = 30) -> np.ndarray:
    """Damped Newton steps that only accept a smaller gradient norm."""
    if not obj.analytic:
        return x
    g = obj.grad(x)
    for _ in range(steps):
        try:
            step = np.linalg.solve(obj.hess(x), g)
        except np.linalg.LinAlgError:
            break
        for t in (1.0, 0.5, 0.25, 0.125):
            trial = x - t * step
            g_trial = obj.grad(trial)
            if np.linalg.norm(g_trial) < np.linalg.norm(g):
                x, g = trial, g_trial
                break
        else:
            break
    return x


def minimize_dissipation(
    functional: Callable,
    u: TrackSpeeds,
    init=None,
    *,
    half_spacing: float | None = None,
    options: SolverOptions = SolverOptions(),
) -> SolveResult:
    """Body velocity minimizing ``functional`` for fixed track speeds ``u``.

    ``functional`` maps a body velocity to dissipated power. When it also
    exposes ``gradient`` and ``hessian`` (as :class:`SumOfNorms` does) a
    Newton trust-region method is used; otherwise BFGS with finite
    differences. Starting from ``init`` (default: the differential-drive
    velocity) plus ``options.n_starts`` deterministic perturbations, the best
    objective wins, ties broken lexicographically on the velocity.

    A result with ``converged=False`` is returned, not raised, when no start
    reaches the gradient tolerance.
    """
    u = TrackSpeeds(*u)
    obj = _Objective(functional, TIE_REGULARIZATION)
    x0 = (
        np.asarray(init, dtype=float)
        if init is not None
        else differential_drive_guess(u, half_spacing)
    )
    scale = max(abs(u.right), abs(u.left), 1e-3)
    turn_scale = scale / half_spacing if half_spacing else scale * 10
    rng = np.random.default_rng(options.seed)
    jitter = rng.normal(size=(options.n_starts, 3)) * 0.3 * np.array([scale, scale, turn_scale])
    starts = [x0] + [x0 + j for j in jitter]

    best = None
    total_iters = 0
    for start in starts:
        x, iters = _local_solve(obj, start, options)
        total_iters += iters
        val = obj.value(x)
        key = (val, tuple(x))
        if best is None or val < best[0][0] - 1e-15 * abs(val) or (
            abs(val - best[0][0]) <= 1e-15 * abs(val) and tuple(x) < best[0][1]
        ):
            best = (key, x)
    x = best[1]
    gnorm = float(np.linalg.norm(obj.grad(x)))
    if gnorm >= options.gtol:
        x = _newton_polish(obj, x)
        gnorm = float(np.linalg.norm(obj.grad(x)))
    return SolveResult(
        v_star=BodyVelocity(*map(float, x)),
        objective=float(functional(x)),
        iterations=total_iters,
        converged=gnorm < options.gtol,
        gradient_norm=gnorm,
    )


def oracle_box(u: TrackSpeeds, half_spacing: float) -> np.ndarray:
    """Default search box, rows (lo, hi) per velocity component."""
    smax = max(abs(u[0]), abs(u[1]), 1e-3)
    half = np.array([1.5 * smax, smax, 3.0 * smax / half_spacing])
    return np.stack([-half, half], axis=1)


def brute_force_oracle(
    functional: Callable,
    u: TrackSpeeds,
    box=None,
    grid_n: int = 61,
    *,
    half_spacing: float | None = None,
) -> BodyVelocity:
    """Grid point of minimum objective on a ``grid_n``^3 tensor grid.

    Independent check on :func:`minimize_dissipation`; exhaustive and slow.
    """
    if box is None:
        if half_spacing is None:
            raise ValueError("need a box or half_spacing to build the default box")
        box = oracle_box(u, half_spacing)
    box = np.asarray(box, dtype=float)
    axes = [np.linspace(lo, hi, grid_n) for lo, hi in box]
    grid = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    if hasattr(functional, "batch"):
        values = functional.batch(grid)
    else:
        values = np.array([functional(v) for v in grid])
    return BodyVelocity(*map(float, grid[int(np.argmin(values))]))


def grid_cell(box, grid_n: int = 61) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    return (box[:, 1] - box[:, 0]) / (grid_n - 1)


def centered_grouser_phase(geom: VehicleGeometry) -> float:
    """Grouser phase that places the tip lattice symmetrically about x = 0.

    At this phase the footprint is front/back symmetric, so static predictions
    carry no artefact of an arbitrary belt position.
    """
    return 0.5 * loss_phase(geom.half_length, geom.grouser_pitch)


def contacts_for(
    geom: VehicleGeometry,
    terrain: TerrainModel,
    *,
    grouser_phase: tuple[float, float] | None = None,
    theta: float = 0.0,
    progress: float = 0.0,
) -> ContactState | None:
    """Contact state with normal forces, or None on smooth flat ground.

    ``grouser_phase`` is (left, right) belt offset; the default centers both
    lattices (see :func:`centered_grouser_phase`).
    """
    if terrain.kind is TerrainKind.FLAT_SMOOTH:
        return None
    if terrain.kind is TerrainKind.FLAT_GROUSERS:
        if grouser_phase is None:
            c = centered_grouser_phase(geom)
            grouser_phase = (c, c)
        state = grouser_contacts(geom, *grouser_phase)
    else:
        state = stair_contacts(theta, progress, geom, terrain)
    return normal_forces(state, geom, terrain)


def functional_for(
    u: TrackSpeeds,
    geom: VehicleGeometry,
    terrain: TerrainModel,
    quad: QuadratureSpec = QuadratureSpec(),
    contacts: ContactState | None = None,
    theta: float = 0.0,
) -> SumOfNorms:
    """The dissipation functional matching the terrain kind."""
    u = TrackSpeeds(*u)
    if terrain.kind is TerrainKind.FLAT_SMOOTH:
        return flat_functional(u, geom, quad)
    if contacts is None:
        contacts = contacts_for(geom, terrain, theta=theta)
    if terrain.kind is TerrainKind.FLAT_GROUSERS:
        return grouser_functional(u, geom, contacts, quad, terrain.friction_mu)
    return stairs_functional(u, theta, geom, contacts, terrain, quad)


def predict(
    u: TrackSpeeds,
    geom: VehicleGeometry,
    terrain: TerrainModel,
    quad: QuadratureSpec = QuadratureSpec(),
    contacts: ContactState | None = None,
    theta: float = 0.0,
    init=None,
    options: SolverOptions = SolverOptions(),
) -> SolveResult:
    """Quasi-static body velocity for track speeds ``u``."""
    f = functional_for(u, geom, terrain, quad, contacts, theta)
    return minimize_dissipation(f, u, init, half_spacing=geom.half_spacing, options=options)


def turning_coefficient(result: SolveResult, u: TrackSpeeds) -> float:
    """thetadot / (S_r - S_l) of a solve."""
    diff = u[0] - u[1]
    if diff == 0:
        return math.nan
    return result.v_star.thetadot / diff
