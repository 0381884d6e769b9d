"""Horizon transcription of the network optimal-control problem.

The controllable model (whole network or one partition) is compiled into
flat arrays once; each solve then stacks, per stage, valve positions, edge
flows, node pressures, boundary flows, node mix temperatures, pipe
temperatures and building states of energy, with the hydraulic and thermal
relations as equality constraints and every inequality a simple variable
bound. The resulting NLP is handed to :mod:`heatnet.sqp`.

Stage variable block: [theta | m | P | b | Tn | T+ | SOE+], optionally
followed by one global pressure-relaxation variable in restoration mode.
Stage constraint block: [drop | mass | pins | mix | thermal | soe].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import json
import numpy as np

from . import kernels
from .hydraulics import FlowBoundary, HydraulicState, HydraulicsError, edge_zetas, solve_flows
from .net import CutKind, EdgeKind, FluidProps, NetworkGraph, Partition
from .sqp import NlpProblem, SqpOptions, SqpResult, solve_sqp
from .thermal import BuildingModel, ThermalState

__all__ = [
    "Horizon",
    "CostSpec",
    "PlantModel",
    "Coupling",
    "Forecasts",
    "CompiledSub",
    "OcpProblem",
    "OcpSolution",
    "WarmStart",
    "transcribe",
    "solve_nlp",
    "centralized_mpc_step",
]

# floor on the mixing throughput: keeps node-temperature rows well
# conditioned as flows vanish; the induced temperature bias scales with
# eps/througput and multiplies a vanishing flow wherever it propagates
MIX_EPS_OCP = 1e-3
# drop-law smoothing inside the transcription; larger than the simulator's
# so every pressure-drop row keeps an O(zeta*eps) flow sensitivity at zero
# flow (parallel paths would otherwise turn rank-deficient there); the law
# mismatch at operating flows is O(zeta*eps^2/2), fractions of a pascal
SMOOTHING_EPS_NLP = 1e-3


@dataclass(frozen=True)
class Horizon:
    N: int = 6
    dt: float = 600.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"horizon must have at least one step, got N={self.N}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class CostSpec:
    """Stage cost: pipe losses plus normalized flexibility usage.

    loss_weight * sum_e hAs_e*(T_e - Tamb)  +
    flex_weight / n_users * sum_u (SOE_u / envelope_u)^2
    """

    loss_weight: float = 1.0
    flex_weight: float = 1.0


@dataclass
class PlantModel:
    """Whole-network control model: graph, fluid, buildings, supply temp."""

    graph: NetworkGraph
    fluid: FluidProps
    buildings: dict[str, BuildingModel]
    T0: float = 80.0
    theta_max: float = 0.99
    m0_max: float = 100.0
    m0_min: float = 0.01
    # minimum pump head held at the plant root; keeps the hydraulics away
    # from the fully-depressurized state where every sensitivity vanishes
    p_plant_min: float = 0.0

    def __post_init__(self):
        missing = [
            self.graph.edges[j].name
            for j in self.graph.user_edges
            if self.graph.edges[j].name not in self.buildings
        ]
        if missing:
            raise ValueError(f"buildings missing for user edges: {missing}")


@dataclass
class Coupling:
    """Boundary data a partition receives from its peers for one solve.

    pressure_pins      global node index -> trajectory (N,) [Pa]
    supply_pin_nodes   pins relaxed by the restoration slack
    fixed_node_flows   global node index -> signed node-flow trajectory
    boundary_temps     global node index -> inflow temperature trajectory
    plant_pressure_floor  per-stage lower bound on P(plant root), dictator only
    restoration        switch the objective to min P_slack
    """

    pressure_pins: dict[int, np.ndarray] = field(default_factory=dict)
    supply_pin_nodes: set[int] = field(default_factory=set)
    fixed_node_flows: dict[int, np.ndarray] = field(default_factory=dict)
    boundary_temps: dict[int, np.ndarray] = field(default_factory=dict)
    plant_pressure_floor: np.ndarray | None = None
    restoration: bool = False


@dataclass
class Forecasts:
    """Per-stage demand per user [W] and ambient temperature [degC]."""

    qout: np.ndarray  # (N, n_users) ordered like the submodel's user list
    tamb: np.ndarray  # (N,)


class _Params:
    """Per-solve numeric parameters consumed by the kernels."""

    __slots__ = ("pin_val", "fixed_flow", "w_pass", "anchor", "qout", "tamb",
                 "T_init", "soe_init")


class CompiledSub:
    """Flat-array compilation of one controllable submodel.

    Variable/constraint layout documented at module level. All arrays use
    local indices; ``edges_g``/``nodes_g`` map back to the full graph.
    """

    def __init__(
        self,
        model: PlantModel,
        horizon: Horizon,
        partition: Partition | None = None,
        pin_plant_root: bool = False,
        restoration: bool = False,
        mix_eps: float = MIX_EPS_OCP,
    ):
        g = model.graph
        self.model = model
        self.partition = partition
        self.N = horizon.N
        self.dt = horizon.dt
        self.cp = model.fluid.cp
        self.mix_eps = mix_eps
        self.smooth_eps = SMOOTHING_EPS_NLP
        self.has_slack = bool(restoration)
        self.pin_plant_root = pin_plant_root

        if partition is None:
            self.edges_g = list(range(g.n_edges))
        else:
            self.edges_g = list(partition.edge_idx)
        eset = set(self.edges_g)
        nodes = sorted({int(g.tails[j]) for j in self.edges_g}
                       | {int(g.heads[j]) for j in self.edges_g})
        self.nodes_g = nodes
        nmap = {v: i for i, v in enumerate(nodes)}
        emap = {j: i for i, j in enumerate(self.edges_g)}

        ne, nv = len(self.edges_g), len(nodes)
        self.ne, self.nv = ne, nv
        self.tails = np.array([nmap[int(g.tails[j])] for j in self.edges_g], dtype=np.int32)
        self.heads = np.array([nmap[int(g.heads[j])] for j in self.edges_g], dtype=np.int32)

        users_g = [j for j in self.edges_g if g.edges[j].kind.is_user]
        self.users_g = users_g
        nth = len(users_g)
        self.nth = nth
        self.user_pos = np.full(ne, -1, dtype=np.int32)
        self.mu = np.zeros(ne)
        self.theta_min = np.zeros(nth)
        self.user_edge = np.zeros(nth, dtype=np.int32)
        self.user_tail = np.zeros(nth, dtype=np.int32)
        self.user_tsetr = np.zeros(nth)
        self.envelope = np.zeros(nth)
        self.buildings: list[BuildingModel] = []
        for u, j in enumerate(users_g):
            e = g.edges[j]
            b = model.buildings[e.name]
            self.user_pos[emap[j]] = u
            self.mu[emap[j]] = e.params.mu
            self.theta_min[u] = e.params.theta_min
            self.user_edge[u] = emap[j]
            self.user_tail[u] = nmap[int(g.tails[j])]
            self.user_tsetr[u] = b.t_set_return
            self.envelope[u] = b.envelope
            self.buildings.append(b)

        nonuser_g = [j for j in self.edges_g if not g.edges[j].kind.is_user]
        self.nonuser_g = nonuser_g
        nnu = len(nonuser_g)
        self.nnu = nnu
        self.nonuser_pos = np.full(ne, -1, dtype=np.int32)
        self.zeta_fix = np.zeros(ne)
        self.c1 = np.zeros(ne)
        self.c2 = np.zeros(ne)
        self.hAs = np.zeros(nnu)
        for r, j in enumerate(nonuser_g):
            e = g.edges[j]
            self.nonuser_pos[emap[j]] = r
            self.zeta_fix[emap[j]] = e.params.zeta
            self.c1[emap[j]] = 1.0 / (model.fluid.rho * e.params.volume)
            self.c2[emap[j]] = e.params.hAs / (model.fluid.rho * model.fluid.cp * e.params.volume)
            self.hAs[r] = e.params.hAs

        self.nonuser_edge_local = np.array([emap[j] for j in nonuser_g],
                                           dtype=np.int32)
        # local in-edge CSR
        in_lists: list[list[int]] = [[] for _ in range(nv)]
        for le in range(ne):
            in_lists[int(self.heads[le])].append(le)
        self.in_ptr = np.zeros(nv + 1, dtype=np.int32)
        flat = []
        for v in range(nv):
            self.in_ptr[v + 1] = self.in_ptr[v] + len(in_lists[v])
            flat.extend(in_lists[v])
        self.in_edge = np.array(flat, dtype=np.int32)

        # node mix temperature variables: nodes feeding at least one edge
        self.tn_pos = np.full(nv, -1, dtype=np.int32)
        tn_nodes = [v for v in range(nv) if np.any(self.tails == v)]
        self.tn_node = np.array(tn_nodes, dtype=np.int32)
        for t, v in enumerate(tn_nodes):
            self.tn_pos[v] = t
        self.ntn = len(tn_nodes)

        # boundary classification (global node ids)
        v0p = g.node_index[g.plant_root]
        v0m = g.node_index[g.plant_terminal]
        if partition is None:
            self.inlet_nodes_g = [v0p]
            self.outlet_nodes_g = [v0m]
            self.fixed_inflow_g: list[int] = []
            self.fixed_outflow_g: list[int] = []
            pin_nodes_g = [v0m]
            supply_pin_g: set[int] = set()
            self.root_nodes_g = [v0p]
            self.has_plant_root = True
            self.has_plant_terminal = True
        else:
            self.has_plant_root = partition.has_plant_root
            self.has_plant_terminal = partition.has_plant_terminal
            self.inlet_nodes_g = ([v0p] if partition.has_plant_root else []) + partition.feeding_roots
            self.outlet_nodes_g = ([v0m] if partition.has_plant_terminal else []) + partition.return_terminals
            self.fixed_inflow_g = list(partition.return_roots)
            self.fixed_outflow_g = list(partition.feeding_terminals)
            pin_nodes_g = []
            supply_pin_g = set()
            if partition.has_plant_terminal:
                pin_nodes_g.append(v0m)
            if partition.has_plant_root and pin_plant_root:
                pin_nodes_g.append(v0p)
                supply_pin_g.add(v0p)
            for v in partition.feeding_roots:
                pin_nodes_g.append(v)
                supply_pin_g.add(v)
            pin_nodes_g.extend(partition.return_terminals)
            self.root_nodes_g = ([v0p] if partition.has_plant_root else []) \
                + partition.feeding_roots + partition.return_roots
            if not pin_nodes_g:
                raise ValueError(
                    f"partition {partition.pid} has no pressure anchor "
                    f"(no plant terminal and no inbound pressure pin)"
                )

        self.pin_nodes_g = pin_nodes_g
        self.pin_node = np.array([nmap[v] for v in pin_nodes_g], dtype=np.int32)
        self.pin_supply = np.array(
            [1 if v in supply_pin_g else 0 for v in pin_nodes_g], dtype=np.uint8
        )
        self.npin = len(pin_nodes_g)
        self.gauge_g = v0m if (partition is None or partition.has_plant_terminal) else None
        self.plant_root_g = v0p if self.has_plant_root else None

        # boundary flow variables: inlets first, then outlets
        self.node_bvar = np.full(nv, -1, dtype=np.int32)
        for i, v in enumerate(self.inlet_nodes_g):
            self.node_bvar[nmap[v]] = i
        self.nb_in = len(self.inlet_nodes_g)
        for i, v in enumerate(self.outlet_nodes_g):
            self.node_bvar[nmap[v]] = self.nb_in + i
        self.nb_out = len(self.outlet_nodes_g)
        self.nb = self.nb_in + self.nb_out

        self.S = nth + ne + nv + self.nb + self.ntn + nnu + nth
        self.R = ne + nv + self.npin + self.ntn + nnu + nth
        self.n = self.N * self.S + (1 if self.has_slack else 0)
        self.m = self.N * self.R
        self.nmap = nmap
        self.emap = emap

        # offsets within a stage block
        self.o_th = 0
        self.o_m = nth
        self.o_P = nth + ne
        self.o_b = self.o_P + nv
        self.o_tn = self.o_b + self.nb
        self.o_T = self.o_tn + self.ntn
        self.o_soe = self.o_T + nnu


class OcpProblem:
    """A compiled submodel bound to horizon data, bounds and scaling."""

    def __init__(
        self,
        compiled: CompiledSub,
        cost: CostSpec,
        envelope_scale: float = 1.0,
        pressure_scale: float = 1e3,
        theta_max: float | None = None,
    ):
        self.cs = compiled
        self.cost = cost
        self.envelope_scale = float(envelope_scale)
        cs = compiled
        model = cs.model

        # column scales (physical magnitude of one scaled unit)
        sx = np.ones(cs.n)
        # row weights (constraint values are multiplied by these)
        rw = np.ones(cs.m)
        env = np.maximum(cs.envelope, 1.0)
        for k in range(cs.N):
            xo, ro = k * cs.S, k * cs.R
            sx[xo + cs.o_P:xo + cs.o_P + cs.nv] = pressure_scale
            sx[xo + cs.o_soe:xo + cs.o_soe + cs.nth] = env
            rw[ro:ro + cs.ne] = 1.0 / pressure_scale
            rw[ro + cs.ne + cs.nv:ro + cs.ne + cs.nv + cs.npin] = 1.0 / pressure_scale
            r_mix = ro + cs.ne + cs.nv + cs.npin
            rw[r_mix:r_mix + cs.ntn] = 0.1
            rw[r_mix + cs.ntn:r_mix + cs.ntn + cs.nnu] = 0.05
            rw[r_mix + cs.ntn + cs.nnu:ro + cs.R] = 1.0 / env
        if cs.has_slack:
            sx[cs.N * cs.S] = pressure_scale
        self.sx = sx
        self.rw = rw
        self.f_scale = max(1.0, float(cs.hAs.sum()) * cs.N / 10.0)

        # bounds (physical); the valve block carries phi = 1/theta - 1, so
        # theta_min maps to the upper phi bound
        lb = np.full(cs.n, -np.inf)
        ub = np.full(cs.n, np.inf)
        th_hi = model.theta_max if theta_max is None else theta_max
        self.phi_lo = 1.0 / th_hi - 1.0
        self.phi_hi = 1.0 / cs.theta_min - 1.0 if cs.nth else np.zeros(0)
        for k in range(cs.N):
            xo = k * cs.S
            lb[xo:xo + cs.nth] = self.phi_lo
            ub[xo:xo + cs.nth] = self.phi_hi
            lb[xo + cs.o_m:xo + cs.o_m + cs.ne] = 0.0
            ub[xo + cs.o_m:xo + cs.o_m + cs.ne] = 10.0 * model.m0_max
            lb[xo + cs.o_b:xo + cs.o_b + cs.nb_in] = 0.0
            ub[xo + cs.o_b:xo + cs.o_b + cs.nb_in] = model.m0_max
            if cs.has_plant_root:
                # plant keeps a minimum circulation going
                lb[xo + cs.o_b] = model.m0_min
                if not cs.pin_plant_root and model.p_plant_min > 0.0:
                    lb[xo + cs.o_P + cs.nmap[cs.plant_root_g]] = model.p_plant_min
            lb[xo + cs.o_b + cs.nb_in:xo + cs.o_b + cs.nb] = -model.m0_max
            ub[xo + cs.o_b + cs.nb_in:xo + cs.o_b + cs.nb] = 0.0
            e = cs.envelope * self.envelope_scale
            lb[xo + cs.o_soe:xo + cs.o_soe + cs.nth] = -e
            ub[xo + cs.o_soe:xo + cs.o_soe + cs.nth] = e
        if cs.has_slack:
            lb[cs.N * cs.S] = 0.0
        self._lb_base = lb
        self.lb_phys = lb.copy()
        self.ub_phys = ub

        self.params = _Params()
        self._c_buf = np.empty(cs.m)
        self._J_buf = np.empty((cs.m, cs.n))
        # flexibility cost applies where the envelope is meaningfully open
        self._flex_mask = (cs.envelope * self.envelope_scale) > 0.0
        self._flex_norm = np.where(self._flex_mask, cs.envelope, 1.0)

    # -- parameter binding ------------------------------------------------

    def set_params(
        self,
        state: ThermalState,
        forecasts: Forecasts,
        coupling: Coupling | None = None,
    ):
        cs = self.cs
        cpl = coupling or Coupling()
        N = cs.N
        qout = np.asarray(forecasts.qout, dtype=float)
        tamb = np.asarray(forecasts.tamb, dtype=float)
        if qout.shape != (N, cs.nth):
            raise ValueError(f"qout forecast must have shape ({N}, {cs.nth})")
        if tamb.shape != (N,):
            raise ValueError(f"tamb forecast must have shape ({N},)")

        p = self.params
        p.qout = np.ascontiguousarray(qout)
        p.tamb = np.ascontiguousarray(tamb)
        p.pin_val = np.zeros((N, cs.npin))
        for i, v in enumerate(cs.pin_nodes_g):
            if v == cs.gauge_g:
                continue
            if v not in cpl.pressure_pins:
                raise ValueError(f"missing pressure pin for node {cs.model.graph.nodes[v]!r}")
            p.pin_val[:, i] = cpl.pressure_pins[v]
        p.fixed_flow = np.zeros((N, cs.nv))
        for v, traj in cpl.fixed_node_flows.items():
            p.fixed_flow[:, cs.nmap[v]] = traj
        p.w_pass = np.zeros((N, cs.nv))
        p.anchor = np.tile(tamb[:, None], (1, cs.nv))
        for v in cs.root_nodes_g:
            lv = cs.nmap[v]
            if cs.tn_pos[lv] < 0:
                continue
            if v == cs.plant_root_g:
                p.w_pass[:, lv] = 1.0
                p.anchor[:, lv] = cs.model.T0
                continue
            if v not in cpl.boundary_temps:
                raise ValueError(
                    f"missing boundary temperature for root node "
                    f"{cs.model.graph.nodes[v]!r}"
                )
            if v in cs.fixed_inflow_g:
                p.w_pass[:, lv] = np.maximum(p.fixed_flow[:, lv], 0.0)
            else:
                p.w_pass[:, lv] = 1.0
            p.anchor[:, lv] = cpl.boundary_temps[v]

        # initial conditions sliced from the global state
        g_nonuser = {j: r for r, j in enumerate(cs.model.graph.nonuser_edges)}
        p.T_init = np.array([state.T[g_nonuser[j]] for j in cs.nonuser_g])
        g_user = {j: r for r, j in enumerate(cs.model.graph.user_edges)}
        p.soe_init = np.array([state.soe[g_user[j]] for j in cs.users_g])

        # dictator's plant-pressure floor enters as a per-stage bound
        self.lb_phys = self._lb_base.copy()
        if cpl.plant_pressure_floor is not None:
            if cs.plant_root_g is None:
                raise ValueError("plant pressure floor on a partition without the plant root")
            lv = cs.nmap[cs.plant_root_g]
            for k in range(N):
                i = k * cs.S + cs.o_P + lv
                self.lb_phys[i] = max(self.lb_phys[i], cpl.plant_pressure_floor[k])
        self.restoration = cpl.restoration
        if cpl.restoration and not cs.has_slack:
            raise ValueError("restoration coupling requires a slack-enabled compile")

    # -- evaluation --------------------------------------------------------

    def _unscale(self, xs: np.ndarray) -> np.ndarray:
        return xs * self.sx

    def eval_f(self, xs: np.ndarray):
        cs = self.cs
        x = self._unscale(xs)
        g = np.zeros(cs.n)
        f = 0.0
        if self.restoration:
            f = x[cs.N * cs.S]
            g[cs.N * cs.S] = 1.0
        else:
            wl, wf = self.cost.loss_weight, self.cost.flex_weight
            nth = max(1, cs.nth)
            for k in range(cs.N):
                xo = k * cs.S
                T = x[xo + cs.o_T:xo + cs.o_T + cs.nnu]
                f += wl * float(cs.hAs @ (T - self.params.tamb[k]))
                g[xo + cs.o_T:xo + cs.o_T + cs.nnu] = wl * cs.hAs
                if cs.nth:
                    soe = x[xo + cs.o_soe:xo + cs.o_soe + cs.nth]
                    r = np.where(self._flex_mask, soe / self._flex_norm, 0.0)
                    f += wf / nth * float(r @ r)
                    g[xo + cs.o_soe:xo + cs.o_soe + cs.nth] = np.where(
                        self._flex_mask, 2.0 * wf / nth * r / self._flex_norm, 0.0
                    )
        return f / self.f_scale, g * self.sx / self.f_scale

    def eval_c(self, xs: np.ndarray):
        x = self._unscale(xs)
        kernels.fill_constraints(self.cs, self.params, x, self._c_buf, self._J_buf)
        c = self.rw * self._c_buf
        J = self.rw[:, None] * self._J_buf * self.sx[None, :]
        return c, J

    def eval_h(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Exact Lagrangian Hessian in scaled coordinates."""
        cs = self.cs
        x = self._unscale(xs)
        H = np.empty((cs.n, cs.n))
        kernels.fill_lagrangian_hessian(cs, self.params, x, ys * self.rw, H)
        H *= self.sx[None, :]
        H *= self.sx[:, None]
        H += self.objective_hessian_diag()
        return H

    def objective_hessian_diag(self) -> np.ndarray:
        """Diagonal exact objective Hessian (scaled)."""
        cs = self.cs
        h = np.zeros(cs.n)
        if not self.restoration and cs.nth:
            wf = self.cost.flex_weight
            nth = max(1, cs.nth)
            for k in range(cs.N):
                xo = k * cs.S
                sl = slice(xo + cs.o_soe, xo + cs.o_soe + cs.nth)
                h[sl] = np.where(
                    self._flex_mask, 2.0 * wf / nth / self._flex_norm**2, 0.0
                ) * self.sx[sl] ** 2 / self.f_scale
        return np.diag(h)

    def objective_value(self, xs: np.ndarray) -> float:
        f, _ = self.eval_f(xs)
        return f * self.f_scale

    def nlp(self) -> NlpProblem:
        return NlpProblem(
            n=self.cs.n,
            m=self.cs.m,
            lb=self.lb_phys / self.sx,
            ub=self.ub_phys / self.sx,
            eval_f=self.eval_f,
            eval_c=self.eval_c,
            eval_h=self.eval_h,
            hess_block=self.cs.S,
        )

    def objective_hessian_init(self) -> np.ndarray:
        """Identity-regularized objective Hessian (scaled), a curvature seed."""
        return np.eye(self.cs.n) + self.objective_hessian_diag()

    # -- packing helpers ----------------------------------------------------

    def initial_guess(
        self,
        state: ThermalState,
        hstate: HydraulicState | None = None,
        theta0=0.5,
    ) -> np.ndarray:
        """Physically consistent cold start, returned in scaled units.

        ``theta0`` is a scalar or a per-user array ordered like the FULL
        graph's user edges (sliced for partition problems).
        """
        cs = self.cs
        x = np.zeros(cs.n)
        p = self.params
        if np.ndim(theta0) > 0:
            g_user = {j: r for r, j in enumerate(cs.model.graph.user_edges)}
            th0 = np.asarray(theta0, dtype=float)[[g_user[j] for j in cs.users_g]]
        else:
            th0 = np.full(cs.nth, float(theta0))
        for k in range(cs.N):
            xo = k * cs.S
            th = np.clip(th0, cs.theta_min + 1e-3, 0.99)
            x[xo:xo + cs.nth] = 1.0 / th - 1.0
            if hstate is not None:
                m_loc = hstate.edge_flows[cs.edges_g]
                x[xo + cs.o_m:xo + cs.o_m + cs.ne] = m_loc
                x[xo + cs.o_P:xo + cs.o_P + cs.nv] = hstate.node_pressures[cs.nodes_g]
                for i, v in enumerate(cs.inlet_nodes_g):
                    lv = cs.nmap[v]
                    x[xo + cs.o_b + i] = sum(
                        m_loc[e] for e in range(cs.ne) if cs.tails[e] == lv
                    )
                for i, v in enumerate(cs.outlet_nodes_g):
                    lv = cs.nmap[v]
                    x[xo + cs.o_b + cs.nb_in + i] = -sum(
                        m_loc[e] for e in range(cs.ne) if cs.heads[e] == lv
                    )
            else:
                x[xo + cs.o_m:xo + cs.o_m + cs.ne] = 0.1
            T = p.T_init
            x[xo + cs.o_T:xo + cs.o_T + cs.nnu] = T
            m = x[xo + cs.o_m:xo + cs.o_m + cs.ne]
            for t in range(cs.ntn):
                v = int(cs.tn_node[t])
                num = (p.w_pass[k, v] + cs.mix_eps) * p.anchor[k, v]
                den = p.w_pass[k, v] + cs.mix_eps
                for q in range(cs.in_ptr[v], cs.in_ptr[v + 1]):
                    e = int(cs.in_edge[q])
                    src = (
                        T[cs.nonuser_pos[e]]
                        if cs.nonuser_pos[e] >= 0
                        else cs.user_tsetr[cs.user_pos[e]]
                    )
                    num += m[e] * src
                    den += m[e]
                x[xo + cs.o_tn + t] = num / den
            x[xo + cs.o_soe:xo + cs.o_soe + cs.nth] = p.soe_init
        xs = x / self.sx
        return np.clip(xs, self.lb_phys / self.sx, self.ub_phys / self.sx)

    def unpack(self, xs: np.ndarray) -> dict[str, np.ndarray]:
        cs = self.cs
        x = self._unscale(xs)
        out = {
            "theta": np.zeros((cs.N, cs.nth)),
            "flows": np.zeros((cs.N, cs.ne)),
            "pressures": np.zeros((cs.N, cs.nv)),
            "bflows": np.zeros((cs.N, cs.nb)),
            "node_temps": np.zeros((cs.N, cs.ntn)),
            "temps": np.zeros((cs.N, cs.nnu)),
            "soe": np.zeros((cs.N, cs.nth)),
        }
        for k in range(cs.N):
            xo = k * cs.S
            out["theta"][k] = 1.0 / (1.0 + np.maximum(x[xo:xo + cs.nth], 0.0))
            out["flows"][k] = x[xo + cs.o_m:xo + cs.o_m + cs.ne]
            out["pressures"][k] = x[xo + cs.o_P:xo + cs.o_P + cs.nv]
            out["bflows"][k] = x[xo + cs.o_b:xo + cs.o_b + cs.nb]
            out["node_temps"][k] = x[xo + cs.o_tn:xo + cs.o_tn + cs.ntn]
            out["temps"][k] = x[xo + cs.o_T:xo + cs.o_T + cs.nnu]
            out["soe"][k] = x[xo + cs.o_soe:xo + cs.o_soe + cs.nth]
        out["p_slack"] = float(x[cs.N * cs.S]) if cs.has_slack else 0.0
        return out

    def shift_warm(self, warm: "WarmStart") -> "WarmStart":
        """Receding-horizon shift: drop stage 0, repeat the final stage."""
        cs = self.cs
        x = warm.x.copy()
        y = warm.y.copy()
        for k in range(cs.N - 1):
            x[k * cs.S:(k + 1) * cs.S] = warm.x[(k + 1) * cs.S:(k + 2) * cs.S]
            y[k * cs.R:(k + 1) * cs.R] = warm.y[(k + 1) * cs.R:(k + 2) * cs.R]
        return WarmStart(x=x, y=y, hessian=warm.hessian, penalty=warm.penalty,
                         qp_duals=warm.qp_duals)

    def dump_nlp(self, path, xs: np.ndarray | None = None):
        """Sparse-triplet JSON dump of the scaled NLP at a point."""
        nlp = self.nlp()
        if xs is None:
            xs = np.clip(np.zeros(self.cs.n), nlp.lb, nlp.ub)
        f, g = self.eval_f(xs)
        c, J = self.eval_c(xs)
        rows, cols = np.nonzero(J)
        payload = {
            "n": int(self.cs.n),
            "m": int(self.cs.m),
            "lb": _jlist(nlp.lb),
            "ub": _jlist(nlp.ub),
            "x": _jlist(xs),
            "f": float(f),
            "grad": _jlist(g),
            "c": _jlist(c),
            "jacobian": {
                "rows": [int(r) for r in rows],
                "cols": [int(cc) for cc in cols],
                "vals": _jlist(J[rows, cols]),
            },
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)


def _jlist(a):
    return [float(v) if np.isfinite(v) else (1e308 if v > 0 else -1e308) for v in np.asarray(a).ravel()]


@dataclass
class OcpSolution:
    """Solved trajectories (physical units) plus solver diagnostics."""

    cost: float
    status: str
    kkt: float
    c_norm: float
    iterations: int
    theta: np.ndarray
    flows: np.ndarray
    pressures: np.ndarray
    bflows: np.ndarray
    node_temps: np.ndarray
    temps: np.ndarray
    soe: np.ndarray
    p_slack: float
    warm: "WarmStart"

    @property
    def success(self) -> bool:
        return self.status == "optimal"


@dataclass
class WarmStart:
    x: np.ndarray
    y: np.ndarray
    hessian: np.ndarray
    penalty: float
    qp_duals: tuple = None


def transcribe(
    model: PlantModel,
    horizon: Horizon,
    cost: CostSpec,
    partition: Partition | None = None,
    pin_plant_root: bool = False,
    restoration: bool = False,
    envelope_scale: float = 1.0,
) -> OcpProblem:
    """Compile a horizon problem for the whole network or one partition."""
    compiled = CompiledSub(
        model, horizon, partition=partition,
        pin_plant_root=pin_plant_root, restoration=restoration,
    )
    return OcpProblem(compiled, cost, envelope_scale=envelope_scale)


def solve_nlp(
    problem: OcpProblem,
    warm: WarmStart | None = None,
    state: ThermalState | None = None,
    hstate: HydraulicState | None = None,
    theta0=0.5,
    options: SqpOptions | None = None,
) -> OcpSolution:
    """Solve a transcribed problem, warm-started when possible."""
    qpw = None
    if warm is not None:
        x0, y0, B0, rho0 = warm.x, warm.y, warm.hessian, warm.penalty
        qpw = warm.qp_duals
    else:
        if state is None:
            raise ValueError("cold start needs the current thermal state")
        x0 = problem.initial_guess(state, hstate=hstate, theta0=theta0)
        y0, B0, rho0 = None, problem.objective_hessian_init(), None
    res: SqpResult = solve_sqp(problem.nlp(), x0, options=options, y0=y0,
                               hessian0=B0, penalty0=rho0, qp_warm0=qpw)
    tr = problem.unpack(res.x)
    return OcpSolution(
        cost=problem.objective_value(res.x),
        status=res.status,
        kkt=res.kkt,
        c_norm=res.c_norm,
        iterations=res.iterations,
        theta=tr["theta"],
        flows=tr["flows"],
        pressures=tr["pressures"],
        bflows=tr["bflows"],
        node_temps=tr["node_temps"],
        temps=tr["temps"],
        soe=tr["soe"],
        p_slack=tr["p_slack"],
        warm=WarmStart(x=res.x, y=res.y, hessian=res.hessian, penalty=res.penalty,
                       qp_duals=res.qp_duals),
    )


def seed_hydraulics(model: PlantModel, t_in_guess: float | None = None
                    ) -> tuple[HydraulicState, np.ndarray]:
    """Demand-proportional whole-network hydraulic seed.

    Each building's nominal first-stage demand fixes its branch flow; the
    pipe network is solved with those flows injected at the branch
    endpoints (the valves shut to a parasitic trickle), and the valve
    positions are then backed out of the resulting branch pressure drops.
    Returns the composed state and the per-user seed positions.
    """
    g = model.graph
    t_in = model.T0 if t_in_guess is None else t_in_guess
    m_star = np.zeros(len(g.user_edges))
    node_flows: dict[str, float] = {}
    for u, j in enumerate(g.user_edges):
        b = model.buildings[g.edges[j].name]
        q0 = float(b.qout_profile[0]) if b.qout_profile.size else 0.0
        m_star[u] = max(q0 / (model.fluid.cp * max(t_in - b.t_set_return, 5.0)), 1e-4)
        e = g.edges[j]
        node_flows[e.tail] = node_flows.get(e.tail, 0.0) - m_star[u]
        node_flows[e.head] = node_flows.get(e.head, 0.0) + m_star[u]
    # the cross links (users, bypasses) are virtualized as node injections,
    # leaving two pressure trees whose relative level is then set explicitly:
    # the feeding side is lifted until every user branch sees at least a
    # mid-open valve drop at its nominal flow
    zeta_tree = np.empty(g.n_edges)
    for j, e in enumerate(g.edges):
        zeta_tree[j] = 1e9 if e.kind in (EdgeKind.USER, EdgeKind.BYPASS) else e.params.zeta
    feed_side = _feeding_reach(g)

    def lifted(h):
        P = h.node_pressures.copy()
        shift = 0.0
        for u, j in enumerate(g.user_edges):
            mu = g.edges[j].params.mu
            want = mu * (1.0 / 0.7 - 1.0) ** 2 * m_star[u] ** 2 + model.p_plant_min * 0.25
            shift = max(shift, want + P[g.heads[j]] - P[g.tails[j]])
        P[list(feed_side)] += max(shift, 0.0)
        return P

    h = solve_flows(g, zeta_tree,
                    FlowBoundary(plant_flow=float(m_star.sum()), node_flows=node_flows),
                    clip_reverse=1e-2)
    P = lifted(h)
    by_flows = {}
    for j in g.bypass_edges:
        dp = float(P[g.tails[j]] - P[g.heads[j]])
        by_flows[j] = float(np.sqrt(max(dp, 0.0) / g.edges[j].params.zeta))
        e = g.edges[j]
        node_flows[e.tail] = node_flows.get(e.tail, 0.0) - by_flows[j]
        node_flows[e.head] = node_flows.get(e.head, 0.0) + by_flows[j]
    try:
        h = solve_flows(g, zeta_tree,
                        FlowBoundary(plant_flow=float(m_star.sum()) + sum(by_flows.values()),
                                     node_flows=node_flows),
                        clip_reverse=1e-2)
        P = lifted(h)
    except HydraulicsError:
        pass
    flows = h.edge_flows.copy()
    theta = np.empty(len(g.user_edges))
    for u, j in enumerate(g.user_edges):
        flows[j] = m_star[u]
        drop = max(float(P[g.tails[j]] - P[g.heads[j]]), 1e-9)
        mu = g.edges[j].params.mu
        zeta_u = drop / m_star[u] ** 2
        theta[u] = float(np.clip(1.0 / (1.0 + np.sqrt(zeta_u / mu)),
                                 g.edges[j].params.theta_min + 1e-3, 0.98))
    for j, m_by in by_flows.items():
        flows[j] = m_by
    state = HydraulicState(edge_flows=flows, node_pressures=P,
                           edge_drops=g.incidence.T @ P)
    return state, theta


def _feeding_reach(g: NetworkGraph) -> set[int]:
    """Nodes on the supply side: reachable from the plant via feeding edges."""
    start = g.node_index[g.plant_root]
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for j in g.out_edges[v]:
            if g.edges[j].kind is EdgeKind.FEEDING and int(g.heads[j]) not in seen:
                seen.add(int(g.heads[j]))
                stack.append(int(g.heads[j]))
    return seen


def centralized_mpc_step(
    problem: OcpProblem,
    state: ThermalState,
    forecasts: Forecasts,
    warm: WarmStart | None = None,
    options: SqpOptions | None = None,
) -> tuple[dict, OcpSolution]:
    """One receding-horizon step: solve and return the first control move.

    Controls are the first-stage valve positions plus the plant flow.
    """
    problem.set_params(state, forecasts, Coupling())
    hstate, theta0 = (None, 0.5)
    if warm is None:
        hstate, theta0 = seed_hydraulics(problem.cs.model)
    sol = solve_nlp(problem, warm=warm, state=state, hstate=hstate,
                    theta0=theta0, options=options)
    theta_by_edge = {
        problem.cs.model.graph.edges[j].name: float(sol.theta[0, u])
        for u, j in enumerate(problem.cs.users_g)
    }
    controls = {
        "theta": theta_by_edge,
        "plant_flow": float(sol.bflows[0, 0]) if problem.cs.has_plant_root else 0.0,
    }
    return controls, sol
