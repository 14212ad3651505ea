"""Quasi-static kinematics of tracked vehicles from power dissipation minimization."""

from .contact import (
    ContactError,
    ContactLine,
    ContactState,
    NoContactError,
    Side,
    StaticsInfeasibleError,
    grouser_contacts,
    next_event,
    normal_forces,
    stair_contacts,
)
from .dissipation import (
    BodyVelocity,
    QuadratureSpec,
    QuasiStaticViolation,
    SumOfNorms,
    TrackSpeeds,
    dissipation_flat,
    dissipation_grousers,
    dissipation_stairs,
    flat_functional,
    grouser_functional,
    stairs_functional,
    track_point_velocity,
)
from .geometry import (
    TerrainKind,
    TerrainModel,
    ValidationError,
    VehicleGeometry,
    flipper_preset,
    validate,
)
from .reduction import (
    InfeasibleFitError,
    KinematicMap,
    PDMSample,
    SingularReductionError,
    SOSModel,
    extract_kinematic_map,
    fit_sos,
    reduce_model,
    sample_pdm,
)
from .simulator import (
    BaselineModel,
    ContactEvent,
    EventKind,
    Pose,
    Termination,
    Trajectory,
    UnreachableVelocityError,
    baseline_velocity,
    initial_pose,
    invert_full_model,
    invert_velocity,
    simulate,
    step,
)
from .solver import (
    NotConvergedError,
    SolveResult,
    SolverOptions,
    brute_force_oracle,
    minimize_dissipation,
    predict,
)

__version__ = "0.1.0"
