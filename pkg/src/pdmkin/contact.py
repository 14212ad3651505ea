"""Line contacts between the tracks and the terrain.

Both grouser tips on hard ground and stair lips are modeled as lines that
cross a track perpendicular to its center line (for stairs, at an angle when
the vehicle is not aligned with the stair axis). A contact is located by the
body-frame x-coordinate where its line crosses the track center line.

Contacts on one side form a lattice with constant spacing. The phase ``d`` of
a side is the distance from the track front to the frontmost lattice point,
so that a new contact enters at the front when ``d`` wraps to 0 and the rear
contact leaves when ``d`` passes ``2L mod spacing``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .geometry import TerrainModel, VehicleGeometry

POSITION_TOL = 1e-12
BALANCE_TOL = 1e-9


class ContactError(RuntimeError):
    """The contact model cannot represent the current configuration."""


class NoContactError(ContactError):
    def __init__(self, side: "Side"):
        super().__init__(f"no contact: {side.value} track spans no stair lip")
        self.side = side


class StaticsInfeasibleError(ContactError):
    def __init__(self, side: "Side"):
        super().__init__(
            f"statics infeasible: center of mass outside the {side.value} "
            "track's support span"
        )
        self.side = side


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"

    @property
    def lateral_offset_sign(self) -> int:
        """Sign of the track center line's body-frame y-coordinate."""
        return 1 if self is Side.LEFT else -1


@dataclass(frozen=True)
class ContactLine:
    side: Side
    position: float
    normal_force: float = 0.0
    index: int = 0  # lattice id (grouser number or stair lip number)


@dataclass(frozen=True)
class ContactState:
    """Per-side contact lines, ordered front to back."""

    left: tuple[ContactLine, ...]
    right: tuple[ContactLine, ...]
    phase_left: float
    phase_right: float
    spacing: float

    def lines(self, side: Side) -> tuple[ContactLine, ...]:
        return self.left if side is Side.LEFT else self.right

    def phase(self, side: Side) -> float:
        return self.phase_left if side is Side.LEFT else self.phase_right

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.left), len(self.right)

    def signature(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Lattice ids in contact on each side; changes exactly at contact events."""
        return (
            tuple(c.index for c in self.left),
            tuple(c.index for c in self.right),
        )


def loss_phase(half_length: float, spacing: float) -> float:
    """Phase at which the rearmost contact leaves the track: 2L mod spacing."""
    span = 2.0 * half_length
    r = span - spacing * math.floor(span / spacing + 1e-12)
    return max(r, 0.0)


def expected_count(half_length: float, spacing: float, phase: float) -> int:
    """Contact count of an unbounded lattice at the given phase."""
    return math.floor((2.0 * half_length - phase) / spacing + 1e-9) + 1


def _lattice(
    front: float, spacing: float, half_length: float, side: Side, top_index: int
) -> tuple[ContactLine, ...]:
    """Lattice points front, front - spacing, ... that lie within [-L, L]."""
    lines = []
    j = 0
    while True:
        x = front - j * spacing
        if x < -half_length - POSITION_TOL:
            break
        lines.append(ContactLine(side, float(x), 0.0, top_index - j))
        j += 1
    return tuple(lines)


def grouser_contacts(
    geom: VehicleGeometry, phase_offset_left: float, phase_offset_right: float
) -> ContactState:
    """Grouser tips touching flat hard ground.

    Offsets are the belt travel of each track (positive when the track
    propels the vehicle forward) and are reduced modulo the grouser pitch.
    Unwrapped offsets give each grouser a stable id across revolutions.
    """
    L, P = geom.half_length, geom.grouser_pitch
    sides = {}
    for side, offset in ((Side.LEFT, phase_offset_left), (Side.RIGHT, phase_offset_right)):
        turns = math.floor(offset / P + 1e-12)
        phase = offset - turns * P
        if phase < POSITION_TOL or phase > P - POSITION_TOL:
            phase = 0.0
            turns = round(offset / P)
        sides[side] = (phase, _lattice(L - phase, P, L, side, turns))
    (pl, left), (pr, right) = sides[Side.LEFT], sides[Side.RIGHT]
    return ContactState(left, right, pl, pr, P)


def lip_body_positions(
    theta: float, progress: float, side: Side, geom: VehicleGeometry, terrain: TerrainModel
) -> tuple[float, float, int]:
    """Where stair lips cross one track's center line.

    Lip ``k`` lies at stair-plane coordinate ``X_k = -L + k * spacing`` along
    the stair gradient, so at ``progress = 0`` and ``theta = 0`` the rear of
    both tracks rests on lip 0. In the body frame consecutive lips are
    ``spacing * sec(theta)`` apart along x, and a track whose center line has
    body y-coordinate ``y_b`` sees them shifted by ``y_b * tan(theta)``: the
    two tracks are offset by ``2 W tan(theta)``. That offset is a reading of
    the stair geometry figure, not a stated formula.

    Returns ``(front, body_spacing, k_front)``: the x-coordinate of the lattice
    point closest to the track front from behind (``front <= L``), the body
    spacing, and its lip index.
    """
    L = geom.half_length
    Ds = terrain.stair_spacing
    c, s = math.cos(theta), math.sin(theta)
    y_b = side.lateral_offset_sign * geom.half_spacing
    # body x of lip k: (X_k - progress + y_b sin(theta)) / cos(theta)
    base = (-L - progress + y_b * s) / c
    body_spacing = Ds / c
    k_front = math.floor((L - base) / body_spacing + 1e-12)
    front = base + k_front * body_spacing
    if front > L:  # guard the floor tolerance
        k_front -= 1
        front -= body_spacing
    return front, body_spacing, k_front


def stair_contacts(
    theta: float, progress: float, geom: VehicleGeometry, terrain: TerrainModel
) -> ContactState:
    """Stair lips under each track.

    ``progress`` is the body origin's displacement up the stair gradient from
    the start configuration (rear of both tracks on lip 0 at theta = 0). The
    lip lattice is unbounded; ``stair_count`` only sets where the staircase
    ends for progress bookkeeping.

    Raises
    ------
    NoContactError
        If a track spans no lip (the model breaks down).
    """
    L = geom.half_length
    per_side = {}
    for side in (Side.LEFT, Side.RIGHT):
        front, spacing, k_front = lip_body_positions(theta, progress, side, geom, terrain)
        phase = L - front
        if phase <= POSITION_TOL:
            phase = 0.0
        lines = _lattice(front, spacing, L, side, k_front)
        if not lines:
            raise NoContactError(side)
        per_side[side] = (phase, lines)
    spacing = terrain.stair_spacing / math.cos(theta)
    (pl, left), (pr, right) = per_side[Side.LEFT], per_side[Side.RIGHT]
    return ContactState(left, right, pl, pr, spacing)


def _balance_side(q: np.ndarray, share: float) -> np.ndarray | None:
    """Nonnegative forces with sum ``share`` and zero moment about q = 0.

    Linear pressure ansatz ``N = a + b q`` on the active set; the most
    negative contact is dropped until all forces are nonnegative.
    """
    n = len(q)
    active = np.ones(n, dtype=bool)
    while active.any():
        qa = q[active]
        if len(qa) == 1:
            if abs(qa[0]) > BALANCE_TOL:
                break
            forces = np.array([share])
        else:
            mat = np.array([[len(qa), qa.sum()], [qa.sum(), (qa * qa).sum()]])
            a, b = np.linalg.solve(mat, [share, 0.0])
            forces = a + b * qa
        if forces.min() >= -BALANCE_TOL * share:
            out = np.zeros(n)
            out[active] = np.clip(forces, 0.0, None)
            return out
        idx = np.flatnonzero(active)[np.argmin(forces)]
        active[idx] = False

    # linear ansatz exhausted: lever rule on the two contacts bracketing q = 0
    below, above = q[q <= BALANCE_TOL], q[q >= -BALANCE_TOL]
    if len(below) == 0 or len(above) == 0:
        return None
    i = int(np.flatnonzero(q == below.max())[0])
    j = int(np.flatnonzero(q == above.min())[0])
    out = np.zeros(n)
    if i == j or q[j] - q[i] <= BALANCE_TOL:
        out[i] = share
    else:
        out[i] = share * q[j] / (q[j] - q[i])
        out[j] = share * -q[i] / (q[j] - q[i])
    return out


def normal_forces(
    state: ContactState, geom: VehicleGeometry, terrain: TerrainModel
) -> ContactState:
    """Fill in normal forces from a per-side force and pitch-moment balance.

    Each side carries half the weight component normal to the supporting
    plane (``m g`` on flat ground, ``m g cos(slope)`` on stairs) with zero
    pitch moment about the center of mass.

    Raises
    ------
    StaticsInfeasibleError
        If a side has no nonnegative solution (center of mass outside the span
        of its contacts): the vehicle would tip.
    """
    share = 0.5 * geom.mass * terrain.gravity * terrain.normal_weight_factor
    filled = {}
    for side in (Side.LEFT, Side.RIGHT):
        lines = state.lines(side)
        if not lines:
            raise StaticsInfeasibleError(side)
        q = np.array([c.position for c in lines]) - geom.com_x
        forces = _balance_side(q, share)
        if forces is None:
            raise StaticsInfeasibleError(side)
        filled[side] = tuple(
            replace(c, normal_force=float(f)) for c, f in zip(lines, forces)
        )
    return replace(state, left=filled[Side.LEFT], right=filled[Side.RIGHT])


def next_event(
    state: ContactState,
    geom: VehicleGeometry,
    terrain: TerrainModel,
    pose_theta: float = 0.0,
    direction: int = 1,
) -> float:
    """Phase travel until the next contact gain or loss on either side.

    Distances are measured along the track (body x-axis), the unit of the
    phase variable. ``direction = +1`` is forward travel (phase increasing):
    a loss happens when the phase reaches ``2L mod spacing`` and a gain when
    it wraps past the spacing. For reverse travel the roles swap.
    """
    if terrain.is_stairs:
        spacing = terrain.stair_spacing / math.cos(pose_theta)
    else:
        spacing = state.spacing
    r = loss_phase(geom.half_length, spacing)
    best = math.inf
    for d in (state.phase_left, state.phase_right):
        d = d % spacing
        if direction >= 0:
            if d < r - POSITION_TOL:
                dist = r - d
            elif abs(d - r) <= POSITION_TOL:
                dist = 0.0
            else:
                dist = spacing - d
        else:
            dist = d - r if d > r + POSITION_TOL else d
        best = min(best, max(dist, 0.0))
    return best
