"""Pipe temperature integration and building energy accounting.

Pipe temperatures follow the well-mixed dynamics assembled by
:func:`heatnet.net.assemble_thermal_matrices` and are stepped with implicit
Euler (small pipe volumes make the dynamics stiff at the 10-minute sampling
used by the controllers). Building state of energy integrates the surplus
of delivered over nominal heat with explicit Euler, matching the discrete
controller model exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import FluidProps, NetworkGraph, assemble_thermal_matrices

__all__ = [
    "BuildingModel",
    "BoundaryTemps",
    "ThermalState",
    "user_heat",
    "step_soe",
    "step_temperatures",
    "mixed_node_temperature",
]


@dataclass
class BuildingModel:
    """Flexibility-envelope abstraction of one connected building.

    C            heat capacity [J/K]
    dTb          acceptable temperature deviation [K]; envelope is +-C*dTb
    qout_profile nominal demand time series [W]
    t_set_return heat-exchanger outlet (return set) temperature [degC]
    """

    C: float
    dTb: float
    qout_profile: np.ndarray
    t_set_return: float = 40.0

    def __post_init__(self):
        self.qout_profile = np.asarray(self.qout_profile, dtype=float)
        if self.C <= 0:
            raise ValueError(f"building C must be > 0, got {self.C}")
        if self.dTb < 0:
            raise ValueError(f"building dTb must be >= 0, got {self.dTb}")
        if np.any(self.qout_profile < 0):
            raise ValueError("nominal demand must be >= 0 (no external heat gains)")

    @property
    def envelope(self) -> float:
        return self.C * self.dTb


@dataclass
class BoundaryTemps:
    """Supply temperature and ambient/ground temperature series [degC]."""

    T0: float
    tamb_profile: np.ndarray

    def __post_init__(self):
        self.tamb_profile = np.atleast_1d(np.asarray(self.tamb_profile, dtype=float))


@dataclass
class ThermalState:
    """Bulk temperature per non-user edge [degC] and per-user SOE [J]."""

    T: np.ndarray
    soe: np.ndarray

    def copy(self) -> "ThermalState":
        return ThermalState(self.T.copy(), self.soe.copy())


def user_heat(flow: float, t_in: float, b: BuildingModel, fluid: FluidProps) -> float:
    """Heat delivered through a user branch [W]: m*cp*(Tin - TsetR)."""
    return flow * fluid.cp * (t_in - b.t_set_return)


def step_soe(soe, qp, qout, dt: float):
    """Explicit-Euler state-of-energy update: soe + dt*(Qp - Qout)."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    return np.asarray(soe) + dt * (np.asarray(qp) - np.asarray(qout))


def step_temperatures(
    state: ThermalState,
    flows: np.ndarray,
    graph: NetworkGraph,
    fluid: FluidProps,
    T0: float,
    t_set_return: float,
    tamb: float,
    dt: float,
) -> ThermalState:
    """One implicit-Euler step of the pipe temperature dynamics.

    Solves (I - dt*A) T+ = T + dt*B u with u = [T0, TsetR, Tamb]; A and B
    are rebuilt from the current flows. Unconditionally stable; the steady
    state satisfies A T = -B u.
    """
    A, B = assemble_thermal_matrices(graph, flows, fluid)
    u = np.array([T0, t_set_return, tamb])
    n = A.shape[0]
    lhs = np.eye(n) - dt * A
    rhs = state.T + dt * (B @ u)
    try:
        T_next = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"thermal step linear solve failed: {exc}") from exc
    return ThermalState(T=T_next, soe=state.soe.copy())


def mixed_node_temperature(
    graph: NetworkGraph,
    node: int,
    flows: np.ndarray,
    T_nonuser: np.ndarray,
    T0: float,
    t_set_return: float,
    tamb: float,
) -> float:
    """Flow-weighted inflow mix temperature at a node.

    User edges contribute TsetR, non-user edges their bulk temperature, the
    plant root supplies T0. With no throughput the mix decays to ambient,
    matching the loss-only limit of the pipe dynamics.
    """
    if node == graph.node_index[graph.plant_root]:
        return T0
    pos = {j: r for r, j in enumerate(graph.nonuser_edges)}
    num = 0.0
    den = 0.0
    for i in graph.in_edges[node]:
        src = t_set_return if graph.edges[i].kind.is_user else T_nonuser[pos[i]]
        num += flows[i] * src
        den += flows[i]
    if den <= 1e-12:
        return tamb
    return num / den
