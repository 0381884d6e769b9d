"""Algebraic pressure/flow network solver.

Edge pressure drops follow ``dP = zeta * m**2`` with flow nonnegative in
the edge direction. Inside Newton iterations (and in the optimal-control
transcription) the law is smoothed to ``dP = zeta * m * sqrt(m**2 + eps**2)``
to keep derivatives bounded through zero flow; at operating flows the two
laws agree to O(eps**2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import EdgeKind, NetworkGraph, UserParams

__all__ = [
    "SMOOTHING_EPS",
    "ValveSetting",
    "valve_zeta",
    "FlowBoundary",
    "HydraulicState",
    "HydraulicsError",
    "edge_zetas",
    "smooth_drop",
    "smooth_flow",
    "solve_flows",
    "hydraulic_residual",
]

SMOOTHING_EPS = 1e-6


class HydraulicsError(RuntimeError):
    """Raised on singular networks or Newton non-convergence."""


@dataclass(frozen=True)
class ValveSetting:
    """User valve position with its scaling law zeta = mu*(1/theta - 1)^2."""

    theta: float
    mu: float
    theta_min: float = 0.01

    def zeta(self) -> float:
        return valve_zeta(self)


def valve_zeta(v: ValveSetting) -> float:
    """Friction coefficient of a user valve at position theta.

    Strictly decreasing in theta; 0 in the fully-open limit theta -> 1.
    Raises ValueError outside [theta_min, 1].
    """
    if not (v.theta_min <= v.theta <= 1.0):
        raise ValueError(
            f"valve position {v.theta} outside [{v.theta_min}, 1]"
        )
    return v.mu * (1.0 / v.theta - 1.0) ** 2


def edge_zetas(graph: NetworkGraph, thetas: dict[str, float] | np.ndarray) -> np.ndarray:
    """Per-edge friction vector: pipe zetas plus valve zetas at the given positions.

    ``thetas`` maps user edge name -> position, or is an array ordered like
    ``graph.user_edges``.
    """
    zetas = np.empty(graph.n_edges)
    if isinstance(thetas, np.ndarray) or isinstance(thetas, (list, tuple)):
        arr = np.asarray(thetas, dtype=float)
        by_edge = {j: arr[i] for i, j in enumerate(graph.user_edges)}
    else:
        by_edge = {graph.edge_index[name]: th for name, th in thetas.items()}
    for j, e in enumerate(graph.edges):
        if e.kind.is_user:
            p: UserParams = e.params
            # a fully open valve still leaves a trace of branch resistance,
            # which keeps the nodal solve regular
            zetas[j] = max(valve_zeta(ValveSetting(by_edge[j], p.mu, p.theta_min)),
                           1e-6 * p.mu)
        else:
            zetas[j] = e.params.zeta
    return zetas


def smooth_drop(m: np.ndarray, zetas: np.ndarray, eps: float = SMOOTHING_EPS) -> np.ndarray:
    """Smoothed pressure drop zeta * m * sqrt(m^2 + eps^2)."""
    m = np.asarray(m, dtype=float)
    return zetas * m * np.sqrt(m * m + eps * eps)


def smooth_flow(dp: np.ndarray, zetas: np.ndarray, eps: float = SMOOTHING_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Invert the smoothed drop law; returns (m, dm/ddp).

    Odd extension for negative drops keeps the map monotone, which makes the
    nodal Newton iteration globally well-posed.
    """
    dp = np.asarray(dp, dtype=float)
    z = np.maximum(zetas, 1e-300)
    r = np.abs(dp) / z
    y = np.maximum(0.5 * (-eps * eps + np.sqrt(eps**4 + 4.0 * r * r)), 0.0)
    m = np.sqrt(y)
    s = np.sqrt(y + eps * eps)
    # d(dp)/dm = z * (2 m^2 + eps^2) / sqrt(m^2 + eps^2) > 0
    dm = s / (z * (2.0 * y + eps * eps))
    return np.sign(dp) * m, dm


@dataclass
class FlowBoundary:
    """Boundary data for a hydraulic solve.

    Either a plant injection (``plant_flow``), explicit node injections
    (``node_flows``), fixed node pressures (``node_pressures``), or a mix.
    The plant terminal is always the pressure gauge (P = 0) unless it has an
    explicit entry in ``node_pressures``.
    """

    plant_flow: float | None = None
    node_flows: dict[str, float] = field(default_factory=dict)
    node_pressures: dict[str, float] = field(default_factory=dict)


@dataclass
class HydraulicState:
    """Solved flows [kg/s], node pressures [Pa] and edge drops [Pa]."""

    edge_flows: np.ndarray
    node_pressures: np.ndarray
    edge_drops: np.ndarray


def _boundary_vectors(graph: NetworkGraph, boundary: FlowBoundary):
    inj = np.zeros(graph.n_nodes)
    for name, val in boundary.node_flows.items():
        inj[graph.node_index[name]] += val
    if boundary.plant_flow is not None:
        inj[graph.node_index[graph.plant_root]] += boundary.plant_flow
        inj[graph.node_index[graph.plant_terminal]] -= boundary.plant_flow

    fixed = {graph.node_index[graph.plant_terminal]: 0.0}
    for name, val in boundary.node_pressures.items():
        fixed[graph.node_index[name]] = float(val)
    return inj, fixed


def solve_flows(
    graph: NetworkGraph,
    zetas: np.ndarray,
    boundary: FlowBoundary,
    tol: float = 1e-10,
    max_iter: int = 50,
    clip_reverse: float = 1e-6,
) -> HydraulicState:
    """Newton solve of the network on nodal pressures.

    Unknowns are the pressures at nodes without a fixed value; the mass
    balance at each such node (the plant-terminal balance is implied by
    conservation) closes the system. Flows follow from the smoothed drop
    law along each edge.
    """
    zetas = np.asarray(zetas, dtype=float)
    if np.any(zetas <= 0):
        bad = [graph.edges[j].name for j in np.flatnonzero(zetas <= 0)]
        raise HydraulicsError(f"nonpositive resistance on edges {bad}")
    inj, fixed = _boundary_vectors(graph, boundary)

    lam = graph.incidence
    free = np.array([v for v in range(graph.n_nodes) if v not in fixed], dtype=np.intp)
    if free.size == 0:
        # fully pinned: flows follow directly
        P = np.zeros(graph.n_nodes)
        for v, val in fixed.items():
            P[v] = val
        dp = lam.T @ P
        m, _ = smooth_flow(dp, zetas)
        return _finish(graph, zetas, P, m, clip_reverse)

    # one balance equation per free node; the balance at pressure-fixed nodes
    # (always including the gauge) is absorbed by the boundary
    rows = free
    if len(fixed) == 1 and abs(inj.sum()) > 1e-9 * max(1.0, np.abs(inj).max()):
        raise HydraulicsError(f"node flows do not balance (sum {inj.sum():.3e})")

    P = np.zeros(graph.n_nodes)
    for v, val in fixed.items():
        P[v] = val

    # linear-law warm start gives the right order of magnitude
    g0 = 1.0 / zetas
    L = lam @ (g0[:, None] * lam.T)
    rhs = inj[rows] - L[np.ix_(rows, sorted(fixed))] @ np.array(
        [fixed[v] for v in sorted(fixed)]
    )
    try:
        P[rows] = np.linalg.solve(L[np.ix_(rows, rows)], rhs)
    except np.linalg.LinAlgError as exc:
        raise HydraulicsError(f"singular network: {exc}") from exc

    scale = max(1.0, float(np.abs(inj).max()))
    for it in range(max_iter):
        dp = lam.T @ P
        m, dm = smooth_flow(dp, zetas)
        r = (lam @ m)[rows] - inj[rows]
        if np.abs(r).max() <= tol * scale:
            return _finish(graph, zetas, P, m, clip_reverse)
        J = (lam * dm[None, :]) @ lam.T
        try:
            step = np.linalg.solve(J[np.ix_(rows, rows)], -r)
        except np.linalg.LinAlgError as exc:
            raise HydraulicsError(f"singular hydraulic Jacobian: {exc}") from exc
        # damped update: backtrack on the residual norm
        alpha, r0 = 1.0, float(np.abs(r).max())
        for _ in range(40):
            Pt = P.copy()
            Pt[rows] += alpha * step
            mt, _ = smooth_flow(lam.T @ Pt, zetas)
            rt = (lam @ mt)[rows] - inj[rows]
            if float(np.abs(rt).max()) < (1.0 - 1e-4 * alpha) * r0:
                P = Pt
                break
            alpha *= 0.5
        else:
            if r0 <= 1e3 * tol * scale:
                # progress limited by rounding right above the target; the
                # point is already a solution for practical purposes
                return _finish(graph, zetas, P, m, clip_reverse)
            raise HydraulicsError("hydraulic Newton line search stalled")
    raise HydraulicsError(f"hydraulic Newton did not converge in {max_iter} iterations")


def _finish(graph, zetas, P, m, clip_reverse=1e-6):
    if float(m.min(initial=0.0)) < -clip_reverse:
        j = int(np.argmin(m))
        raise HydraulicsError(
            f"negative flow {m[j]:.3e} on edge {graph.edges[j].name!r}; "
            f"boundary data reverses the assumed direction"
        )
    m = np.maximum(m, 0.0)
    return HydraulicState(
        edge_flows=m,
        node_pressures=P.copy(),
        edge_drops=graph.incidence.T @ P,
    )


def hydraulic_residual(
    state: HydraulicState,
    graph: NetworkGraph,
    zetas: np.ndarray,
    boundary: FlowBoundary,
) -> np.ndarray:
    """Stacked residuals of the drop law, mass balance and pressure balance.

    Zero (to solver tolerance) iff the state solves the network for the
    given boundary. Mass-balance rows at pressure-fixed nodes are skipped,
    since their net injection is an outcome there, not data.
    """
    zetas = np.asarray(zetas, dtype=float)
    inj, fixed = _boundary_vectors(graph, boundary)
    lam = graph.incidence
    m = state.edge_flows
    r_drop = state.edge_drops - zetas * m * m
    if len(fixed) == 1:  # gauge only: every balance row is data, incl. -m0
        balance_rows = list(range(graph.n_nodes))
    else:
        balance_rows = [v for v in range(graph.n_nodes) if v not in fixed]
    r_mass = (lam @ m - inj)[balance_rows]
    r_press = lam.T @ state.node_pressures - state.edge_drops
    return np.concatenate([r_drop, r_mass, r_press])
