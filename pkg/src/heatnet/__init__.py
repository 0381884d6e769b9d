"""District heating network simulation and predictive control."""

from .net import (
    Edge,
    EdgeKind,
    FluidProps,
    NetworkError,
    NetworkGraph,
    Partition,
    PartitionError,
    PipeParams,
    UserParams,
    assemble_thermal_matrices,
    build_incidence,
    make_partitions,
)
from .hydraulics import (
    FlowBoundary,
    HydraulicState,
    HydraulicsError,
    ValveSetting,
    hydraulic_residual,
    solve_flows,
    valve_zeta,
)
from .thermal import BoundaryTemps, BuildingModel, ThermalState, step_soe, step_temperatures, user_heat

__version__ = "0.1.0"
