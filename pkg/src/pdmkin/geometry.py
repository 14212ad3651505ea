"""Vehicle and terrain parameter sets.

All lengths are in meters, angles in radians. Vehicle dimensions are stored
as half-dimensions since every dissipation formula is written in terms of
them; full dimensions (as usually quoted in data sheets) are halved once,
when a preset or config document is turned into a :class:`VehicleGeometry`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

DEFAULT_MASS = 10.0
DEFAULT_MU = 0.7
DEFAULT_GRAVITY = 9.81


class ValidationError(ValueError):
    """A parameter set violates one of its invariants."""


class TerrainKind(str, Enum):
    FLAT_SMOOTH = "flat_smooth"
    FLAT_GROUSERS = "flat_grousers"
    STAIRS = "stairs"


@dataclass(frozen=True)
class VehicleGeometry:
    """Symmetric two-track vehicle.

    Attributes
    ----------
    half_length : float
        Half the length of each track's ground footprint.
    half_spacing : float
        Half the distance between the two track center lines.
    half_track_width : float
        Half the width of one track.
    sprocket_height : float
        Height of the body-frame origin above the ground plane. It does not
        enter the planar velocity model and is carried for completeness.
    grouser_pitch : float
        Distance between neighbouring grouser tips along a track.
    mass : float
        Vehicle mass in kg.
    com_x : float
        Body-frame x-offset of the center of mass (0 for the symmetric vehicle).
    """

    half_length: float
    half_spacing: float
    half_track_width: float
    sprocket_height: float
    grouser_pitch: float
    mass: float = DEFAULT_MASS
    com_x: float = 0.0


@dataclass(frozen=True)
class TerrainModel:
    """Terrain and contact description.

    ``stair_spacing``, ``slope`` and ``stair_count`` are only meaningful for
    stairs and must be ``None`` for the flat kinds.
    """

    kind: TerrainKind
    friction_mu: float = DEFAULT_MU
    stair_spacing: float | None = None
    slope: float | None = None
    gravity: float = DEFAULT_GRAVITY
    stair_count: int | None = None

    @classmethod
    def flat_smooth(cls, friction_mu: float = DEFAULT_MU) -> "TerrainModel":
        return cls(TerrainKind.FLAT_SMOOTH, friction_mu)

    @classmethod
    def flat_grousers(cls, friction_mu: float = DEFAULT_MU) -> "TerrainModel":
        return cls(TerrainKind.FLAT_GROUSERS, friction_mu)

    @classmethod
    def stairs(
        cls,
        stair_spacing: float = 0.2,
        slope: float = math.radians(30.0),
        stair_count: int = 8,
        friction_mu: float = DEFAULT_MU,
        gravity: float = DEFAULT_GRAVITY,
    ) -> "TerrainModel":
        return cls(
            TerrainKind.STAIRS,
            friction_mu,
            stair_spacing=stair_spacing,
            slope=slope,
            gravity=gravity,
            stair_count=stair_count,
        )

    @property
    def is_stairs(self) -> bool:
        return self.kind is TerrainKind.STAIRS

    @property
    def normal_weight_factor(self) -> float:
        """cos(slope) on stairs, 1 on flat ground."""
        return math.cos(self.slope) if self.is_stairs else 1.0

    @property
    def staircase_length(self) -> float:
        """Length of the staircase along the stair gradient."""
        if not self.is_stairs:
            raise ValidationError("staircase_length is only defined for stairs")
        return self.stair_count * self.stair_spacing


def flipper_preset(mass: float = DEFAULT_MASS) -> VehicleGeometry:
    """Rover Robotics Flipper: 0.42 m x 0.27 m x 0.06 m tracks, 0.04 m grouser pitch."""
    return VehicleGeometry(
        half_length=0.42 / 2,
        half_spacing=0.27 / 2,
        half_track_width=0.06 / 2,
        sprocket_height=0.05,
        grouser_pitch=0.04,
        mass=mass,
    )


_GEOMETRY_POSITIVE = (
    "half_length",
    "half_spacing",
    "half_track_width",
    "sprocket_height",
    "grouser_pitch",
    "mass",
)


def _finite_positive(name: str, value) -> None:
    if not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ValidationError(f"{name} must be a finite number")
    if value <= 0:
        raise ValidationError(f"{name} must be positive")


def validate(
    geom: VehicleGeometry, terrain: TerrainModel
) -> tuple[VehicleGeometry, TerrainModel]:
    """Check every invariant of ``geom`` and ``terrain``.

    Returns the pair unchanged; raises :class:`ValidationError` naming the
    first violated invariant.
    """
    for name in _GEOMETRY_POSITIVE:
        _finite_positive(name, getattr(geom, name))
    if geom.grouser_pitch > 2 * geom.half_length * (1 + 1e-12):
        raise ValidationError("grouser pitch exceeds track length")
    if not math.isfinite(geom.com_x) or abs(geom.com_x) >= geom.half_length:
        raise ValidationError("com_x must lie strictly inside the track footprint")

    if not isinstance(terrain.kind, TerrainKind):
        raise ValidationError(f"unknown terrain kind {terrain.kind!r}")
    _finite_positive("friction_mu", terrain.friction_mu)
    _finite_positive("gravity", terrain.gravity)
    stair_fields = (terrain.stair_spacing, terrain.slope, terrain.stair_count)
    if terrain.is_stairs:
        if any(f is None for f in stair_fields):
            raise ValidationError(
                "stair_spacing, slope and stair_count are required for stairs"
            )
        _finite_positive("stair_spacing", terrain.stair_spacing)
        if not (0.0 <= terrain.slope < math.pi / 2):
            raise ValidationError("slope must lie in [0, pi/2)")
        if isinstance(terrain.stair_count, bool) or not isinstance(
            terrain.stair_count, int
        ):
            raise ValidationError("stair_count must be an integer")
        if terrain.stair_count < 1:
            raise ValidationError("stair_count must be at least 1")
    elif any(f is not None for f in stair_fields):
        raise ValidationError("stair fields are only allowed for stairs")
    return geom, terrain
