"""Power dissipation functionals.

Every functional here is a nonnegative combination of Euclidean norms of
affine functions of the body velocity ``v = (xdot, ydot, thetadot)``:

    D(v) = sum_i w_i * sqrt(|M_i v + c_i|^2 + eps^2)

where the sum runs over quadrature points on the track/terrain contact set,
``M_i v + c_i`` is the planar slip velocity of the track surface at that
point and ``w_i`` folds the friction weight (mu * N) together with the
quadrature weight. :class:`SumOfNorms` stores that representation once and
evaluates it, its gradient and Hessian in a fixed summation order.

Integrals use the midpoint rule: the integrands have ridges along the zero
slip set, where low-order rules on fine grids do better than high-order ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .contact import ContactState, Side
from .geometry import DEFAULT_MU, TerrainModel, VehicleGeometry

DEFAULT_EPS = 1e-6
_BATCH_CHUNK = 1 << 22  # max (velocity, point) pairs per batch slab


class QuasiStaticViolation(RuntimeError):
    """Friction cannot hold the vehicle against gravity on the slope."""


class BodyVelocity(NamedTuple):
    xdot: float
    ydot: float
    thetadot: float


class TrackSpeeds(NamedTuple):
    """Track surface speeds, positive when the track propels the vehicle forward."""

    right: float
    left: float

    def swapped(self) -> "TrackSpeeds":
        return TrackSpeeds(self.left, self.right)


@dataclass(frozen=True)
class QuadratureSpec:
    """Midpoint-rule resolution.

    ``nodes_x`` and ``nodes_y`` discretize the rectangular footprint used on
    smooth flat ground; ``nodes_line`` discretizes each line contact across
    the track width.
    """

    nodes_x: int = 41
    nodes_y: int = 9
    nodes_line: int = 21
    smoothing_eps: float = DEFAULT_EPS

    def __post_init__(self):
        for name in ("nodes_x", "nodes_y", "nodes_line"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not self.smoothing_eps >= 0:
            raise ValueError("smoothing_eps must be nonnegative")

    def refined(self, factor: int = 2) -> "QuadratureSpec":
        return QuadratureSpec(
            self.nodes_x * factor,
            self.nodes_y * factor,
            self.nodes_line * factor,
            self.smoothing_eps,
        )


def midpoints(half_width: float, n: int) -> np.ndarray:
    """Midpoint nodes of ``n`` equal cells on [-half_width, half_width]."""
    h = 2.0 * half_width / n
    return -half_width + h * (np.arange(n) + 0.5)


@dataclass(frozen=True)
class SumOfNorms:
    """``D(v) = sum_i w_i sqrt(|M_i v + c_i|^2 + eps^2)``.

    ``lin`` has shape (n, 2, 3), ``offset`` (n, 2) and ``weights`` (n,).
    """

    weights: np.ndarray
    lin: np.ndarray
    offset: np.ndarray
    eps: float = DEFAULT_EPS

    def slip(self, v) -> np.ndarray:
        return self.lin @ np.asarray(v, dtype=float) + self.offset

    def __call__(self, v) -> float:
        s = self.slip(v)
        rho = np.sqrt(np.einsum("ij,ij->i", s, s) + self.eps**2)
        return float(self.weights @ rho)

    def gradient(self, v) -> np.ndarray:
        s = self.slip(v)
        rho = np.sqrt(np.einsum("ij,ij->i", s, s) + self.eps**2)
        unit = s * (self.weights / np.where(rho > 0, rho, 1.0))[:, None]
        unit[rho == 0] = 0.0
        return np.einsum("ijk,ij->k", self.lin, unit)

    def hessian(self, v) -> np.ndarray:
        s = self.slip(v)
        sq = np.einsum("ij,ij->i", s, s) + self.eps**2
        rho = np.sqrt(sq)
        safe = np.where(rho > 0, rho, np.inf)
        # w (I/rho - s s^T / rho^3) projected through M
        inner = (
            np.eye(2)[None] / safe[:, None, None]
            - s[:, :, None] * s[:, None, :] / (safe * sq)[:, None, None]
        ) * self.weights[:, None, None]
        return np.einsum("iak,iab,ibl->kl", self.lin, inner, self.lin)

    def batch(self, velocities) -> np.ndarray:
        """Values at many velocities, shape (k, 3) -> (k,)."""
        V = np.atleast_2d(np.asarray(velocities, dtype=float))
        out = np.empty(len(V))
        step = max(1, _BATCH_CHUNK // max(1, len(self.weights)))
        lin = self.lin
        canonical = (
            np.all(lin[:, 0, 0] == 1) and np.all(lin[:, 1, 1] == 1)
            and np.all(lin[:, 0, 1] == 0) and np.all(lin[:, 1, 0] == 0)
        )
        eps2 = self.eps**2
        for start in range(0, len(V), step):
            chunk = V[start : start + step]
            if canonical:
                # slip = (xdot + a*thetadot + c_x, ydot + b*thetadot + c_y)
                sx = chunk[:, 0:1] + chunk[:, 2:3] * lin[None, :, 0, 2] + self.offset[None, :, 0]
                sy = chunk[:, 1:2] + chunk[:, 2:3] * lin[None, :, 1, 2] + self.offset[None, :, 1]
                rho = np.sqrt(sx * sx + sy * sy + eps2)
            else:
                s = np.einsum("iak,nk->nia", lin, chunk) + self.offset[None]
                rho = np.sqrt(np.einsum("nia,nia->ni", s, s) + eps2)
            out[start : start + step] = rho @ self.weights
        return out

    def scaled(self, factor: float) -> "SumOfNorms":
        return SumOfNorms(self.weights * factor, self.lin, self.offset, self.eps)

    @property
    def zero_slip_value(self) -> float:
        return float(self.weights.sum() * self.eps)


def _stack(rows_x: list, rows_y: list, offsets: list, weights: list, eps: float) -> SumOfNorms:
    lin = np.stack([np.concatenate(rows_x), np.concatenate(rows_y)], axis=1)
    return SumOfNorms(
        np.concatenate(weights), lin, np.concatenate(offsets), eps
    )


def _side_terms(side: Side, W: float, u: TrackSpeeds, along, across, sec=1.0, tan=0.0):
    """Slip rows for points at body x ``along + across*tan`` on one track.

    ``across`` is the coordinate across the track width in the track's own
    frame; (along, across) are broadcast 1-D arrays of equal length.
    """
    n = len(along)
    if side is Side.RIGHT:
        lever = W - across * sec
        speed = u.right
    else:
        lever = -(W + across * sec)
        speed = u.left
    rx = np.stack([np.ones(n), np.zeros(n), lever], axis=1)
    ry = np.stack([np.zeros(n), np.ones(n), along + across * tan], axis=1)
    off = np.stack([np.full(n, -speed), np.zeros(n)], axis=1)
    return rx, ry, off


def track_point_velocity(
    v,
    u: TrackSpeeds,
    point: tuple[float, float],
    side: Side,
    half_spacing: float,
    stair_theta: float | None = None,
) -> np.ndarray:
    """Slip velocity (body frame) of the track surface at a contact point.

    ``point`` is ``(along, across)`` in the track frame. On flat ground these
    are the offsets along and across the track. On stairs ``along`` is the
    lip position on the track center line and the across-track coordinate
    enters through sec/tan of the heading relative to the stair axis.
    """
    sec, tan = _sec_tan(stair_theta)
    rx, ry, off = _side_terms(
        side, half_spacing, TrackSpeeds(*u), np.array([point[0]], float), np.array([point[1]], float), sec, tan
    )
    vel = np.asarray(v, dtype=float)
    return np.array([rx[0] @ vel + off[0, 0], ry[0] @ vel + off[0, 1]])


def _sec_tan(theta: float | None) -> tuple[float, float]:
    if theta is None:
        return 1.0, 0.0
    return 1.0 / math.cos(theta), math.tan(theta)


def flat_functional(
    u: TrackSpeeds, geom: VehicleGeometry, quad: QuadratureSpec = QuadratureSpec()
) -> SumOfNorms:
    """Smooth flat ground: uniform pressure over both track footprints.

    The friction weight is set to 1; a uniform weight only rescales the
    functional and leaves its minimizer unchanged.
    """
    L, W, T = geom.half_length, geom.half_spacing, geom.half_track_width
    rx_nodes = midpoints(L, quad.nodes_x)
    ry_nodes = midpoints(T, quad.nodes_y)
    along, across = (a.ravel() for a in np.meshgrid(rx_nodes, ry_nodes, indexing="ij"))
    cell = (2 * L / quad.nodes_x) * (2 * T / quad.nodes_y)
    parts = [_side_terms(side, W, u, along, across) for side in (Side.RIGHT, Side.LEFT)]
    weights = [np.full(len(along), cell)] * 2
    return _stack(
        [p[0] for p in parts], [p[1] for p in parts], [p[2] for p in parts], weights,
        quad.smoothing_eps,
    )


def _line_functional(
    u: TrackSpeeds,
    geom: VehicleGeometry,
    contacts: ContactState,
    quad: QuadratureSpec,
    alpha,
    theta: float | None,
) -> SumOfNorms:
    W, T = geom.half_spacing, geom.half_track_width
    sec, tan = _sec_tan(theta)
    across_nodes = midpoints(T, quad.nodes_line)
    h = 2 * T / quad.nodes_line
    rows_x, rows_y, offs, weights = [], [], [], []
    for side in (Side.RIGHT, Side.LEFT):
        for line in contacts.lines(side):
            along = np.full(quad.nodes_line, line.position)
            rx, ry, off = _side_terms(side, W, u, along, across_nodes, sec, tan)
            rows_x.append(rx)
            rows_y.append(ry)
            offs.append(off)
            weights.append(np.full(quad.nodes_line, alpha(line) * h))
    if not weights:
        raise ValueError("contact state has no contact lines")
    return _stack(rows_x, rows_y, offs, weights, quad.smoothing_eps)


def grouser_functional(
    u: TrackSpeeds,
    geom: VehicleGeometry,
    contacts: ContactState,
    quad: QuadratureSpec = QuadratureSpec(),
    friction_mu: float = DEFAULT_MU,
) -> SumOfNorms:
    """Grouser tips on hard flat ground, weighted by ``mu * N`` per line."""
    return _line_functional(
        u, geom, contacts, quad, lambda c: friction_mu * c.normal_force, None
    )


def stairs_functional(
    u: TrackSpeeds,
    theta: float,
    geom: VehicleGeometry,
    contacts: ContactState,
    terrain: TerrainModel,
    quad: QuadratureSpec = QuadratureSpec(),
) -> SumOfNorms:
    """Stair-lip line contacts at heading ``theta`` relative to the stair axis.

    Each lip is weighted by ``mu * N + m g sin(slope)``.

    Raises
    ------
    QuasiStaticViolation
        If the total available friction is smaller than the downhill weight
        component.
    """
    if not terrain.is_stairs:
        raise ValueError("stairs_functional needs a stairs terrain")
    mu = terrain.friction_mu
    gravity_term = geom.mass * terrain.gravity * math.sin(terrain.slope)
    friction = mu * sum(c.normal_force for s in Side for c in contacts.lines(s))
    if friction < gravity_term:
        raise QuasiStaticViolation(
            f"quasi-static violated: available friction {friction:.6g} N is below "
            f"the downhill weight component {gravity_term:.6g} N"
        )
    return _line_functional(
        u, geom, contacts, quad, lambda c: mu * c.normal_force + gravity_term, theta
    )


def dissipation_flat(v, u: TrackSpeeds, geom: VehicleGeometry, quad: QuadratureSpec = QuadratureSpec()) -> float:
    return flat_functional(u, geom, quad)(v)


def dissipation_grousers(
    v,
    u: TrackSpeeds,
    geom: VehicleGeometry,
    contacts: ContactState,
    quad: QuadratureSpec = QuadratureSpec(),
    friction_mu: float = DEFAULT_MU,
) -> float:
    return grouser_functional(u, geom, contacts, quad, friction_mu)(v)


def dissipation_stairs(
    v,
    u: TrackSpeeds,
    theta: float,
    geom: VehicleGeometry,
    contacts: ContactState,
    terrain: TerrainModel,
    quad: QuadratureSpec = QuadratureSpec(),
) -> float:
    return stairs_functional(u, theta, geom, contacts, terrain, quad)(v)
