"""Quasi-static time integration with contact events, plus baseline models.

The simulator works in the plane of the terrain: on stairs, ``x`` points up
the stair gradient in the inclined plane and ``theta`` is the heading
relative to it. At every pose the contact state is rebuilt from geometry,
the dissipation functional is minimized for the body velocity, and the pose
is advanced by explicit Euler. Contact changes are located by bisection on
the contact signature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .contact import (
    ContactError,
    ContactState,
    Side,
    grouser_contacts,
    lip_body_positions,
    next_event,
    normal_forces,
    stair_contacts,
)
from .dissipation import BodyVelocity, QuadratureSpec, QuasiStaticViolation, TrackSpeeds
from .geometry import TerrainKind, TerrainModel, VehicleGeometry
from .reduction import KinematicMap
from .solver import (
    SolverOptions,
    centered_grouser_phase,
    functional_for,
    minimize_dissipation,
    predict,
)

EVENT_TOL = 1e-6  # meters of travel
TURN_LIMIT = math.pi / 2


class EventKind(str, Enum):
    GAIN = "Gain"
    LOSS = "Loss"


class Termination(str, Enum):
    T_END = "t_end"
    TURNED = "turned"
    CLIMBED = "climbed"
    HALTED = "halted"


class UnreachableVelocityError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """Planar pose plus track phases.

    ``phase_d_left``/``phase_d_right`` are the distances from each track's
    front to its frontmost contact. On stairs they follow from ``x`` and
    ``theta``; on grousers they are the belt travel reduced by the pitch.
    ``travel_left``/``travel_right`` keep the unreduced belt travel so that
    individual grousers stay identifiable.
    """

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    phase_d_left: float = 0.0
    phase_d_right: float = 0.0
    travel_left: float = 0.0
    travel_right: float = 0.0


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    pose: Pose
    v: BodyVelocity
    contact_count: tuple[int, int]


@dataclass(frozen=True)
class ContactEvent:
    t: float
    side: Side
    kind: EventKind
    index: int = 0


@dataclass
class Trajectory:
    samples: list[TrajectorySample] = field(default_factory=list)
    events: list[ContactEvent] = field(default_factory=list)
    termination: Termination = Termination.T_END
    halt_reason: str | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    def column(self, name: str) -> np.ndarray:
        """One pose or velocity component over the samples."""
        if name in ("xdot", "ydot", "thetadot"):
            return np.array([getattr(s.v, name) for s in self.samples])
        return np.array([getattr(s.pose, name) for s in self.samples])

    @property
    def final(self) -> TrajectorySample:
        return self.samples[-1]

    @property
    def turned(self) -> bool:
        return bool(self.samples) and abs(self.final.pose.theta) >= TURN_LIMIT - 1e-9


def _reduce(value: float, spacing: float) -> float:
    d = value % spacing
    return 0.0 if d > spacing - 1e-12 else d


def contact_state(pose: Pose, geom: VehicleGeometry, terrain: TerrainModel) -> ContactState | None:
    """Contacts (with normal forces) at ``pose``; ``None`` on smooth ground."""
    if terrain.kind is TerrainKind.FLAT_SMOOTH:
        return None
    if terrain.kind is TerrainKind.FLAT_GROUSERS:
        state = grouser_contacts(geom, pose.travel_left, pose.travel_right)
    else:
        state = stair_contacts(pose.theta, pose.x, geom, terrain)
    return normal_forces(state, geom, terrain)


def initial_pose(
    geom: VehicleGeometry,
    terrain: TerrainModel,
    x: float = 0.0,
    y: float = 0.0,
    theta: float = 0.0,
    travel: tuple[float, float] | None = None,
) -> Pose:
    """Pose with phases consistent with the terrain.

    On stairs ``x = 0`` puts the rear of both tracks on lip 0 when aligned.
    On grousers the belt travel defaults to the centered lattice phase.
    """
    if terrain.kind is TerrainKind.FLAT_GROUSERS:
        if travel is None:
            c = centered_grouser_phase(geom)
            travel = (c, c)
        tl, tr = travel
        P = geom.grouser_pitch
        return Pose(x, y, theta, _reduce(tl, P), _reduce(tr, P), tl, tr)
    pose = Pose(x, y, theta)
    return _with_phases(pose, geom, terrain)


def _with_phases(pose: Pose, geom: VehicleGeometry, terrain: TerrainModel) -> Pose:
    if terrain.is_stairs:
        L = geom.half_length
        fl = lip_body_positions(pose.theta, pose.x, Side.LEFT, geom, terrain)[0]
        fr = lip_body_positions(pose.theta, pose.x, Side.RIGHT, geom, terrain)[0]
        return replace(pose, phase_d_left=max(L - fl, 0.0), phase_d_right=max(L - fr, 0.0))
    if terrain.kind is TerrainKind.FLAT_GROUSERS:
        P = geom.grouser_pitch
        return replace(
            pose,
            phase_d_left=_reduce(pose.travel_left, P),
            phase_d_right=_reduce(pose.travel_right, P),
        )
    return pose


def advance(
    pose: Pose,
    v: BodyVelocity,
    u: TrackSpeeds,
    dt: float,
    geom: VehicleGeometry,
    terrain: TerrainModel,
) -> Pose:
    """Explicit Euler step in the plane frame; phases follow from geometry."""
    u = TrackSpeeds(*u)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    moved = Pose(
        x=pose.x + (v.xdot * c - v.ydot * s) * dt,
        y=pose.y + (v.xdot * s + v.ydot * c) * dt,
        theta=pose.theta + v.thetadot * dt,
        travel_left=pose.travel_left + u.left * dt,
        travel_right=pose.travel_right + u.right * dt,
    )
    return _with_phases(moved, geom, terrain)


def phase_rates(
    pose: Pose, v: BodyVelocity, u: TrackSpeeds, geom: VehicleGeometry, terrain: TerrainModel
) -> tuple[float, float]:
    """Rate of change of (phase_d_left, phase_d_right).

    On grousers the tips ride the belt, so each phase grows at its track
    speed. On stairs the lips are fixed in the plane; a lip at plane
    coordinate ``X_k`` crosses a track center line (body ``y = y_b``) at
    body ``x = (X_k - X + y_b sin(theta)) / cos(theta)``, and the phase rate
    is minus the time derivative of that crossing. At ``theta = 0`` this is
    the velocity of the track center line along the stair gradient,
    ``Xdot - y_b * thetadot``: the translational part is the body velocity
    component along the gradient and the rotational part is the lever of
    the track about the body origin.
    """
    if terrain.kind is TerrainKind.FLAT_GROUSERS:
        u = TrackSpeeds(*u)
        return u.left, u.right
    if not terrain.is_stairs:
        return 0.0, 0.0
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    x_rate = v.xdot * c - v.ydot * s
    rates = []
    for side in (Side.LEFT, Side.RIGHT):
        front = lip_body_positions(pose.theta, pose.x, side, geom, terrain)[0]
        y_b = side.lateral_offset_sign * geom.half_spacing
        # d/dt of (X_k - X + y_b sin) / cos with X_k fixed; front * cos = X_k - X + y_b sin
        numer = front * c
        dfront = ((-x_rate + y_b * c * v.thetadot) * c + numer * s * v.thetadot) / (c * c)
        rates.append(-dfront)
    return rates[0], rates[1]


def _signature(pose: Pose, geom: VehicleGeometry, terrain: TerrainModel):
    """(signature, state) or (error, None) when contacts cannot be formed."""
    try:
        state = contact_state(pose, geom, terrain)
    except ContactError as exc:
        return exc, None
    if state is None:
        return ((), ()), None
    return state.signature(), state


def _solve(u, pose, state, v_prev, geom, terrain, quad, options) -> BodyVelocity:
    f = functional_for(u, geom, terrain, quad, state, pose.theta)
    if v_prev is not None:
        warm = minimize_dissipation(
            f, u, v_prev, half_spacing=geom.half_spacing, options=replace(options, n_starts=0)
        )
        if warm.converged:
            return warm.v_star
    res = minimize_dissipation(f, u, v_prev, half_spacing=geom.half_spacing, options=options)
    if not res.converged:
        raise RuntimeError(f"solver did not converge (gradient norm {res.gradient_norm:.3g})")
    return res.v_star


def step(
    pose: Pose,
    u,
    dt: float,
    geom: VehicleGeometry,
    terrain: TerrainModel,
    quad: QuadratureSpec = QuadratureSpec(),
    options: SolverOptions = SolverOptions(),
    init=None,
) -> tuple[Pose, BodyVelocity]:
    """Solve for the velocity at ``pose`` and advance by ``dt``.

    Contact, statics and quasi-static errors propagate to the caller.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = TrackSpeeds(*u)
    state = contact_state(pose, geom, terrain)
    v = _solve(u, pose, state, init, geom, terrain, quad, options)
    return advance(pose, v, u, dt, geom, terrain), v


def _schedule(u_schedule) -> tuple[Callable[[float], TrackSpeeds], list[float]]:
    """Normalize a schedule to (lookup, switch times).

    Accepts a constant pair or a sequence of ``(t_start, (S_r, S_l))`` pieces
    sorted by start time, the first starting at 0.
    """
    if len(u_schedule) == 2 and all(isinstance(x, (int, float)) for x in u_schedule):
        const = TrackSpeeds(*map(float, u_schedule))
        return (lambda t: const), []
    pieces = sorted((float(t0), TrackSpeeds(*map(float, u))) for t0, u in u_schedule)
    if not pieces or pieces[0][0] > 0:
        raise ValueError("schedule must start at t = 0")
    starts = [p[0] for p in pieces]

    def lookup(t: float) -> TrackSpeeds:
        i = int(np.searchsorted(starts, t, side="right")) - 1
        return pieces[max(i, 0)][1]

    return lookup, starts[1:]


def _events_between(sig_old, sig_new, t: float) -> list[ContactEvent]:
    losses, gains = [], []
    for side, old, new in ((Side.LEFT, sig_old[0], sig_new[0]), (Side.RIGHT, sig_old[1], sig_new[1])):
        for idx in sorted(set(old) - set(new)):
            losses.append(ContactEvent(t, side, EventKind.LOSS, idx))
        for idx in sorted(set(new) - set(old)):
            gains.append(ContactEvent(t, side, EventKind.GAIN, idx))
    return losses + gains


def _surface_clamp(pose: Pose, v: BodyVelocity, dt: float, terrain: TerrainModel):
    """Shorten ``dt`` to land on the turned or climbed surface; returns (dt, reason)."""
    reason = None
    if v.thetadot != 0.0:
        target = math.copysign(TURN_LIMIT, v.thetadot)
        t_hit = (target - pose.theta) / v.thetadot
        if 0 <= t_hit <= dt:
            dt, reason = t_hit, Termination.TURNED
    if terrain.is_stairs:
        x_rate = v.xdot * math.cos(pose.theta) - v.ydot * math.sin(pose.theta)
        if x_rate > 0:
            t_hit = (terrain.staircase_length - pose.x) / x_rate
            if 0 <= t_hit <= dt:
                dt, reason = t_hit, Termination.CLIMBED
    return dt, reason


def simulate(
    pose0: Pose,
    u_schedule,
    t_end: float,
    geom: VehicleGeometry,
    terrain: TerrainModel,
    dt_max: float = 0.01,
    quad: QuadratureSpec = QuadratureSpec(),
    options: SolverOptions = SolverOptions(),
) -> Trajectory:
    """Integrate the quasi-static motion from ``pose0`` until ``t_end``.

    Steps are bounded by ``dt_max``, schedule switches, the distance to the
    next contact event and the turned/climbed surfaces. When the contact
    signature changes within a step, the change is bracketed by bisection
    to ``EVENT_TOL`` meters of phase travel; the step is cut just after it
    and the velocity is re-solved with the new contacts.

    Contact, statics and quasi-static failures halt the run; the partial
    trajectory is returned with ``termination = HALTED`` and the reason.
    Runs terminate early when ``|theta|`` reaches pi/2 or, on stairs, when
    the progress covers the staircase.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if not dt_max > 0:
        raise ValueError("dt_max must be positive")
    lookup, switches = _schedule(u_schedule)
    traj = Trajectory()
    pose = _with_phases(pose0, geom, terrain)
    sig, state = _signature(pose, geom, terrain)
    if isinstance(sig, Exception):
        traj.termination, traj.halt_reason = Termination.HALTED, str(sig)
        return traj

    t, v_prev = 0.0, None
    while True:
        u = lookup(t)
        try:
            v = _solve(u, pose, state, v_prev, geom, terrain, quad, options)
        except (QuasiStaticViolation, RuntimeError) as exc:
            traj.termination, traj.halt_reason = Termination.HALTED, str(exc)
            return traj
        counts = state.counts if state is not None else (0, 0)
        traj.samples.append(TrajectorySample(t, pose, v, counts))
        if t >= t_end - 1e-12:
            traj.termination = Termination.T_END
            return traj

        dt = min(dt_max, t_end - t)
        upcoming = [s for s in switches if s > t + 1e-12]
        if upcoming:
            dt = min(dt, upcoming[0] - t)
        rates = phase_rates(pose, v, u, geom, terrain)
        rate = max(abs(rates[0]), abs(rates[1]))
        if state is not None and rate > 0:
            direction = 1 if (rates[0] + rates[1]) >= 0 else -1
            dist = next_event(state, geom, terrain, pose.theta, direction)
            t_event = dist / rate
            if t_event * rate > EVENT_TOL:
                dt = min(dt, t_event * (1 + 1e-9) + EVENT_TOL / rate)
        dt, surface = _surface_clamp(pose, v, dt, terrain)

        new_pose = advance(pose, v, u, dt, geom, terrain)
        new_sig, new_state = _signature(new_pose, geom, terrain)
        if new_sig != sig:
            lo, hi = 0.0, dt
            travel = max(rate, abs(v.xdot) + abs(v.ydot), 1e-12)
            while (hi - lo) * travel > EVENT_TOL:
                mid = 0.5 * (lo + hi)
                mid_sig, _ = _signature(advance(pose, v, u, mid, geom, terrain), geom, terrain)
                if mid_sig == sig:
                    lo = mid
                else:
                    hi = mid
            if hi < dt:
                surface = None
            dt = hi
            new_pose = advance(pose, v, u, dt, geom, terrain)
            new_sig, new_state = _signature(new_pose, geom, terrain)

        if surface is not None:
            final = replace(new_pose, theta=math.copysign(TURN_LIMIT, v.thetadot)) if (
                surface is Termination.TURNED
            ) else new_pose
            # contacts at the terminal surface may not exist (theta = pi/2); carry the last ones
            traj.samples.append(TrajectorySample(t + dt, final, v, counts))
            traj.termination = surface
            return traj
        if isinstance(new_sig, Exception):
            traj.termination, traj.halt_reason = Termination.HALTED, str(new_sig)
            return traj
        if new_sig != sig:
            traj.events.extend(_events_between(sig, new_sig, t + dt))
        t, pose, sig, state, v_prev = t + dt, new_pose, new_sig, new_state, v


class BaselineModel(str, Enum):
    DIFF_DRIVE = "DiffDrive"
    TUNED = "Tuned"
    PDM_LINEAR = "PdmLinear"

    @property
    def default_coeff(self) -> float:
        return {"DiffDrive": 2.38, "Tuned": 1.37, "PdmLinear": 1.27}[self.value]


def baseline_map(model: BaselineModel | str, coeff: float | None = None) -> KinematicMap:
    """The linear map ``((S_r + S_l)/2, 0, coeff (S_r - S_l))``."""
    model = BaselineModel(model)
    c = model.default_coeff if coeff is None else float(coeff)
    return KinematicMap(np.array([[0.5, 0.5], [0.0, 0.0], [c, -c]]))


def baseline_velocity(u, model: BaselineModel | str, coeff: float | None = None) -> BodyVelocity:
    return baseline_map(model, coeff).apply(TrackSpeeds(*u))


def invert_velocity(v_desired, kin_map: KinematicMap | BaselineModel | str) -> TrackSpeeds:
    """Track speeds whose forward velocity matches ``(xdot, thetadot)``.

    Raises
    ------
    UnreachableVelocityError
        For a nonzero lateral velocity (skid steering cannot command one) or
        a map whose forward/turn rows are singular.
    """
    v = BodyVelocity(*v_desired)
    if v.ydot != 0.0:
        raise UnreachableVelocityError("unreachable velocity: lateral velocity cannot be commanded")
    if not isinstance(kin_map, KinematicMap):
        kin_map = baseline_map(kin_map)
    rows = kin_map.K[[0, 2]]
    target = np.array([v.xdot, v.thetadot]) - kin_map.offset[[0, 2]]
    if abs(np.linalg.det(rows)) < 1e-12:
        raise UnreachableVelocityError("unreachable velocity: map cannot be inverted")
    sr, sl = np.linalg.solve(rows, target)
    return TrackSpeeds(float(sr), float(sl))


def invert_full_model(
    v_desired,
    geom: VehicleGeometry,
    terrain: TerrainModel,
    quad: QuadratureSpec = QuadratureSpec(),
    options: SolverOptions = SolverOptions(),
) -> TrackSpeeds:
    """Track speeds whose minimizing velocity has the desired ``(xdot, thetadot)``.

    Root-finds through the full dissipation model, starting from the
    differential-drive inverse.
    """
    v = BodyVelocity(*v_desired)
    if v.ydot != 0.0:
        raise UnreachableVelocityError("unreachable velocity: lateral velocity cannot be commanded")
    guess = np.array(
        [v.xdot + v.thetadot * geom.half_spacing, v.xdot - v.thetadot * geom.half_spacing]
    )

    def residual(u):
        res = predict(TrackSpeeds(*u), geom, terrain, quad, options=options)
        return [res.v_star.xdot - v.xdot, res.v_star.thetadot - v.thetadot]

    sol, _, ier, msg = optimize.fsolve(residual, guess, full_output=True, xtol=1e-12)
    if ier != 1 and np.max(np.abs(residual(sol))) > 1e-8:
        raise UnreachableVelocityError(f"unreachable velocity: {msg}")
    return TrackSpeeds(float(sol[0]), float(sol[1]))


def turning_radius(v: BodyVelocity) -> float:
    """Radius of the circle driven at constant velocity (inf when straight)."""
    if v.thetadot == 0.0:
        return math.inf
    return abs(math.hypot(v.xdot, v.ydot) / v.thetadot)


def mirrored(pose: Pose) -> Pose:
    """Reflection across the plane x-axis."""
    return replace(pose, y=-pose.y, theta=-pose.theta)


def schedule_pieces(pieces: Sequence[tuple[float, Sequence[float]]]):
    """Validate a piecewise-constant schedule given as ``(t_start, (S_r, S_l))``."""
    return _schedule(list(pieces))
