"""Communication-based distributed MPC over network partitions.

Each subsystem solves its local horizon problem against the variables its
peers passed in the previous round (boundary temperatures, node pressures,
node flows). Passing directions give every subsystem a degree of freedom:
pressure comes from the upstream side at feeding cuts and from the
downstream side at return cuts, flow the other way round, temperature
always with the flow. One plant-adjacent subsystem (the one serving the
largest downstream demand) dictates the plant pressure. Rounds repeat with
relaxed updates until every subsystem's passed variables settle within the
per-type thresholds and all of its producers have settled too; the
aggregated first control move is then applied. A subsystem starved by the
dictated pressure temporarily switches to a pressure-relaxation objective
and sends the dictator a plant-pressure floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .net import CutKind, NetworkGraph, Partition
from .hydraulics import HydraulicState
from .ocp import (
    CompiledSub,
    Coupling,
    CostSpec,
    Forecasts,
    Horizon,
    OcpProblem,
    OcpSolution,
    PlantModel,
    WarmStart,
    seed_hydraulics,
    solve_nlp,
    transcribe,
)
from .sqp import SqpOptions
from .thermal import ThermalState

__all__ = [
    "PassedVars",
    "ConvergenceParams",
    "RestorationState",
    "select_dictator",
    "route_pass",
    "relax_update",
    "pass_delta",
    "check_converged",
    "restore_feasibility",
    "DmpcController",
    "dmpc_iterate",
]

#: ordering of the passed-variable blocks and their threshold slots:
#: boundary temperatures, downstream-determined pressures (return-cut roots
#: and the dictated plant pressure), upstream-determined pressures
#: (feeding-cut terminals), inlet flows, outlet flows, local cost
PASS_BLOCKS = ("temps", "p_end", "p_origin", "flow_in", "flow_out")


@dataclass
class PassedVars:
    """One subsystem's outbound bundle, per horizon step.

    Dictionary keys are global node indices; values are (N,) trajectories.
    """

    temps: dict[int, np.ndarray] = field(default_factory=dict)
    p_end: dict[int, np.ndarray] = field(default_factory=dict)
    p_origin: dict[int, np.ndarray] = field(default_factory=dict)
    flow_in: dict[int, np.ndarray] = field(default_factory=dict)
    flow_out: dict[int, np.ndarray] = field(default_factory=dict)
    cost: float = math.inf

    def copy(self) -> "PassedVars":
        out = PassedVars(cost=self.cost)
        for blk in PASS_BLOCKS:
            setattr(out, blk, {k: v.copy() for k, v in getattr(self, blk).items()})
        return out


@dataclass
class ConvergenceParams:
    """Relaxation step, per-type thresholds and the round budget."""

    omega: float = 0.5
    eps: np.ndarray = None
    max_iters: int = 50

    def __post_init__(self):
        if self.eps is None:
            self.eps = np.array([0.1, 1.0, 1.0, 0.2, 0.2, 0.5])
        self.eps = np.asarray(self.eps, dtype=float)
        if self.eps.shape != (6,):
            raise ValueError("eps must have six entries "
                             "(temps, p_end, p_origin, flow_in, flow_out, cost)")
        if not 0.0 <= self.omega < 1.0:
            raise ValueError(f"omega must be in [0, 1), got {self.omega}")


@dataclass
class RestorationState:
    """Per-round bookkeeping of the pressure-relaxation mechanism."""

    infeasible: dict[int, bool] = field(default_factory=dict)
    p_slack: dict[int, float] = field(default_factory=dict)
    p_min: np.ndarray | None = None


def select_dictator(
    graph: NetworkGraph,
    partitions: list[Partition],
    demand_forecasts: dict[int, np.ndarray],
) -> int:
    """Plant-pressure dictator: largest summed downstream demand.

    ``demand_forecasts`` maps global user-edge index to a demand trajectory.
    Only partitions owning an edge out of the plant root are candidates;
    ties break toward the lowest partition id.
    """
    v0p = graph.node_index[graph.plant_root]
    best = None
    for part in sorted(partitions, key=lambda p: p.pid):
        plant_edges = [j for j in part.edge_idx if int(graph.tails[j]) == v0p]
        if not plant_edges:
            continue
        users = graph.downstream_users(plant_edges)
        total = float(sum(np.sum(demand_forecasts[u]) for u in users))
        if best is None or total > best[1]:
            best = (part.pid, total)
    if best is None:
        raise ValueError("no partition owns an edge out of the plant root")
    return best[0]


def _edge_owner(graph: NetworkGraph, partitions: list[Partition]) -> np.ndarray:
    owner = np.full(graph.n_edges, -1, dtype=np.intp)
    for part in partitions:
        for j in part.edge_idx:
            owner[j] = part.pid
    return owner


@dataclass
class InboundVars:
    """What one subsystem consumes in a round (see ocp.Coupling)."""

    pressure_pins: dict[int, np.ndarray] = field(default_factory=dict)
    fixed_node_flows: dict[int, np.ndarray] = field(default_factory=dict)
    boundary_temps: dict[int, np.ndarray] = field(default_factory=dict)
    dictated_plant: np.ndarray | None = None


_REUSE_FRACTION = 0.01  # of the per-type convergence thresholds


def _inbound_close(a: InboundVars | None, b: InboundVars, eps: np.ndarray) -> bool:
    """True when the inputs moved by under a hundredth of the thresholds.

    Re-solving for such changes only reproduces solver-level noise; the
    previous local plan is kept instead, which also lets settled
    subsystems stop computing (they converge first, their consumers after).
    """
    if a is None:
        return False
    tol = {
        "pressure_pins": _REUSE_FRACTION * min(eps[1], eps[2]),
        "fixed_node_flows": _REUSE_FRACTION * min(eps[3], eps[4]),
        "boundary_temps": _REUSE_FRACTION * eps[0],
    }
    for blk, t in tol.items():
        da, db = getattr(a, blk), getattr(b, blk)
        if set(da) != set(db):
            return False
        for k in da:
            if float(np.abs(da[k] - db[k]).max(initial=0.0)) > t:
                return False
    return True


def _floor_close(a, b, eps: np.ndarray) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return float(np.abs(a - b).max(initial=0.0)) <= _REUSE_FRACTION * min(eps[1], eps[2])


def route_pass(
    graph: NetworkGraph,
    partitions: list[Partition],
    passed: dict[int, PassedVars],
    dictator: int,
) -> dict[int, InboundVars]:
    """Distribute every produced variable to its unique consumer side.

    Temperatures travel with the flow, pressures against the authority
    rules (upstream at feeding cuts, downstream at return cuts, dictator at
    the plant root), flows inversely to pressures. Multi-producer return
    cuts mix the passed temperatures with the passed flows.
    """
    owner = _edge_owner(graph, partitions)
    v0p = graph.node_index[graph.plant_root]
    inbound = {part.pid: InboundVars() for part in partitions}

    for part in partitions:
        box = inbound[part.pid]
        if part.has_plant_root and part.pid != dictator:
            box.dictated_plant = passed[dictator].p_end[v0p]
            box.pressure_pins[v0p] = passed[dictator].p_end[v0p]
        for v in part.roots:
            kind = part.cut_kind[v]
            if kind is CutKind.FEEDING:
                j_up = int(owner[graph.in_edges[v][0]])
                box.pressure_pins[v] = passed[j_up].p_origin[v]
                box.boundary_temps[v] = passed[j_up].temps[v]
            elif kind is CutKind.RETURN:
                producers = sorted({int(owner[j]) for j in graph.in_edges[v]
                                    if owner[j] != part.pid})
                inflow = None
                temps = []
                weights = []
                for jp in producers:
                    w = -passed[jp].flow_out[v]
                    inflow = w.copy() if inflow is None else inflow + w
                    weights.append(w)
                    temps.append(passed[jp].temps[v])
                box.fixed_node_flows[v] = inflow
                wsum = sum(weights) + 1e-9
                mix = sum(w * t for w, t in zip(weights, temps))
                mix = (mix + 1e-9 * np.mean(temps, axis=0)) / wsum
                box.boundary_temps[v] = mix
        for v in part.terminals:
            kind = part.cut_kind[v]
            if kind is CutKind.FEEDING:
                consumers = sorted({int(owner[j]) for j in graph.out_edges[v]
                                    if owner[j] != part.pid})
                outflow = None
                for jp in consumers:
                    w = -passed[jp].flow_in[v]
                    outflow = w.copy() if outflow is None else outflow + w
                box.fixed_node_flows[v] = outflow
            elif kind is CutKind.RETURN:
                j_down = int(owner[graph.out_edges[v][0]])
                box.pressure_pins[v] = passed[j_down].p_end[v]
    return inbound


def relax_update(prev: PassedVars, new: PassedVars, omega: float) -> PassedVars:
    """Componentwise omega*prev + (1-omega)*new over every passed block."""
    out = PassedVars()
    for blk in PASS_BLOCKS:
        pv, nv = getattr(prev, blk), getattr(new, blk)
        if set(pv) != set(nv):
            raise ValueError(f"passed-variable shape mismatch in {blk}")
        setattr(out, blk, {k: omega * pv[k] + (1.0 - omega) * nv[k] for k in pv})
    out.cost = new.cost if math.isinf(prev.cost) else omega * prev.cost + (1.0 - omega) * new.cost
    return out


def pass_delta(prev: PassedVars, new: PassedVars) -> np.ndarray:
    """Per-type max-abs change [temps, p_end, p_origin, flow_in, flow_out, cost]."""
    out = np.zeros(6)
    for i, blk in enumerate(PASS_BLOCKS):
        pv, nv = getattr(prev, blk), getattr(new, blk)
        worst = 0.0
        for k in nv:
            if k in pv:
                worst = max(worst, float(np.abs(pv[k] - nv[k]).max(initial=0.0)))
            else:
                worst = math.inf
        out[i] = worst
    out[5] = abs(prev.cost - new.cost) if math.isfinite(prev.cost) else math.inf
    return out


def check_converged(delta: np.ndarray, eps: np.ndarray, upstream_converged) -> bool:
    """Thresholds on own deltas plus settled producers."""
    own = bool(np.all(np.asarray(delta) <= np.asarray(eps)))
    return own and all(bool(f) for f in upstream_converged)


def restore_feasibility(
    problem: OcpProblem,
    state: ThermalState,
    forecasts: Forecasts,
    coupling: Coupling,
    dictated_plant: np.ndarray,
    options: SqpOptions | None = None,
) -> tuple[np.ndarray, OcpSolution]:
    """Minimum supply-pressure lift restoring local feasibility.

    Solves the slack-relaxed local problem (supply-side pressure pins
    shifted by one nonnegative scalar, objective = that scalar) and returns
    the plant floor trajectory ``dictated + slack`` with the solution.
    """
    cpl = Coupling(
        pressure_pins=coupling.pressure_pins,
        supply_pin_nodes=coupling.supply_pin_nodes,
        fixed_node_flows=coupling.fixed_node_flows,
        boundary_temps=coupling.boundary_temps,
        plant_pressure_floor=None,
        restoration=True,
    )
    problem.set_params(state, forecasts, cpl)
    sol = solve_nlp(problem, state=state, options=options)
    p_min = np.asarray(dictated_plant, dtype=float) + max(sol.p_slack, 0.0)
    return p_min, sol


class DmpcController:
    """Stateful distributed controller for closed-loop use.

    Compiles every partition's local problem lazily per role (dictator or
    pinned, plus the restoration variant), carries warm starts and the
    previous round's passed variables across sampling instants, and logs
    every coordination round.
    """

    def __init__(
        self,
        model: PlantModel,
        horizon: Horizon,
        cost: CostSpec,
        partitions: list[Partition],
        params: ConvergenceParams | None = None,
        envelope_scale: float = 1.0,
        restoration: bool = True,
        solver_options: SqpOptions | None = None,
    ):
        self.model = model
        self.horizon = horizon
        self.cost = cost
        self.partitions = sorted(partitions, key=lambda p: p.pid)
        self.params = params or ConvergenceParams()
        self.envelope_scale = envelope_scale
        self.restoration_enabled = restoration
        self.solver_options = solver_options or SqpOptions(max_iter=40)
        self._problems: dict[tuple, OcpProblem] = {}
        self._warm: dict[int, WarmStart] = {}
        self._last_kkt: dict[int, float] = {}
        self._passed: dict[int, PassedVars] | None = None
        self._hseed: HydraulicState | None = None
        self._theta_seed = 0.5
        self._owner = _edge_owner(model.graph, self.partitions)
        self._producers = self._producer_map()
        g = model.graph
        self._user_slot = {j: u for u, j in enumerate(g.user_edges)}
        self._plant_shared = sum(p.has_plant_root for p in self.partitions) > 1
        self._depth = self._supply_depth()

    # -- structure ---------------------------------------------------------

    def _producer_map(self) -> dict[int, set[int]]:
        g = self.model.graph
        prod: dict[int, set[int]] = {p.pid: set() for p in self.partitions}
        for part in self.partitions:
            for v in part.roots:
                kind = part.cut_kind[v]
                if kind is CutKind.FEEDING:
                    prod[part.pid].add(int(self._owner[g.in_edges[v][0]]))
                elif kind is CutKind.RETURN:
                    prod[part.pid].update(int(self._owner[j]) for j in g.in_edges[v]
                                          if self._owner[j] != part.pid)
            for v in part.terminals:
                kind = part.cut_kind[v]
                if kind is CutKind.FEEDING:
                    prod[part.pid].update(int(self._owner[j]) for j in g.out_edges[v]
                                          if self._owner[j] != part.pid)
                elif kind is CutKind.RETURN:
                    prod[part.pid].add(int(self._owner[g.out_edges[v][0]]))
        return prod

    def _supply_depth(self) -> dict[int, int]:
        """Distance from the plant along feeding-cut dependencies."""
        g = self.model.graph
        n = len(self.partitions)
        depth = {p.pid: (0 if p.has_plant_root else n) for p in self.partitions}
        for _ in range(n):
            for p in self.partitions:
                if p.has_plant_root:
                    continue
                ups = [int(self._owner[g.in_edges[v][0]]) for v in p.feeding_roots]
                if ups:
                    depth[p.pid] = min(depth[p.pid], 1 + max(depth[u] for u in ups))
        return depth

    def _problem(self, part: Partition, dictator: int, restoration: bool) -> OcpProblem:
        pin_plant = part.has_plant_root and part.pid != dictator
        key = (part.pid, pin_plant, restoration)
        if key not in self._problems:
            self._problems[key] = transcribe(
                self.model, self.horizon, self.cost, partition=part,
                pin_plant_root=pin_plant, restoration=restoration,
                envelope_scale=self.envelope_scale,
            )
        return self._problems[key]

    # -- seeding -----------------------------------------------------------

    def seed_pass(self, state: ThermalState, hstate: HydraulicState | None = None) -> dict[int, PassedVars]:
        """Physically consistent starting bundle from a whole-network solve."""
        g = self.model.graph
        N = self.horizon.N
        if hstate is None:
            hstate = seed_hydraulics(self.model)
        nonuser_pos = {j: r for r, j in enumerate(g.nonuser_edges)}
        v0p = g.node_index[g.plant_root]
        passed = {}
        for part in self.partitions:
            pv = PassedVars(cost=math.inf)
            for v in part.terminals:
                if part.cut_kind[v] in (CutKind.FEEDING, CutKind.RETURN):
                    num, den = 0.0, 1e-9
                    for j in g.in_edges[v]:
                        if self._owner[j] != part.pid:
                            continue
                        src = (
                            self.model.buildings[g.edges[j].name].t_set_return
                            if g.edges[j].kind.is_user
                            else state.T[nonuser_pos[j]]
                        )
                        num += hstate.edge_flows[j] * src
                        den += hstate.edge_flows[j]
                    pv.temps[v] = np.full(N, num / den if den > 1e-8 else self.model.T0)
                if part.cut_kind[v] is CutKind.FEEDING:
                    pv.p_origin[v] = np.full(N, hstate.node_pressures[v])
                elif part.cut_kind[v] is CutKind.RETURN:
                    out = -sum(hstate.edge_flows[j] for j in g.in_edges[v]
                               if self._owner[j] == part.pid)
                    pv.flow_out[v] = np.full(N, out)
            for v in part.roots:
                if part.cut_kind[v] is CutKind.FEEDING:
                    inflow = sum(hstate.edge_flows[j] for j in g.out_edges[v]
                                 if self._owner[j] == part.pid)
                    pv.flow_in[v] = np.full(N, inflow)
                elif part.cut_kind[v] is CutKind.RETURN:
                    pv.p_end[v] = np.full(N, hstate.node_pressures[v])
            if part.has_plant_root and self._plant_shared:
                pv.p_end[v0p] = np.full(N, hstate.node_pressures[v0p])
            passed[part.pid] = pv
        return passed

    def _shift_pass(self, passed: dict[int, PassedVars]) -> dict[int, PassedVars]:
        out = {}
        for pid, pv in passed.items():
            sh = PassedVars(cost=pv.cost)
            for blk in PASS_BLOCKS:
                d = {}
                for k, traj in getattr(pv, blk).items():
                    t = np.roll(traj, -1)
                    t[-1] = traj[-1]
                    d[k] = t
                setattr(sh, blk, d)
            out[pid] = sh
        return out

    def _extract_pass(self, part: Partition, cs: CompiledSub, sol: OcpSolution) -> PassedVars:
        g = self.model.graph
        N = self.horizon.N
        pv = PassedVars(cost=sol.cost)
        v0p = g.node_index[g.plant_root]
        for v in part.terminals:
            kind = part.cut_kind[v]
            if kind in (CutKind.FEEDING, CutKind.RETURN):
                lv = cs.nmap[v]
                num = np.full(N, 0.0)
                den = np.full(N, 1e-9)
                fallback = np.full(N, 0.0)
                n_in = 0
                for j in g.in_edges[v]:
                    if self._owner[j] != part.pid:
                        continue
                    le = cs.emap[j]
                    src = (
                        np.full(N, cs.user_tsetr[cs.user_pos[le]])
                        if cs.user_pos[le] >= 0
                        else sol.temps[:, cs.nonuser_pos[le]]
                    )
                    num = num + sol.flows[:, le] * src
                    den = den + sol.flows[:, le]
                    fallback = fallback + src
                    n_in += 1
                mix = (num + 1e-9 * fallback / max(n_in, 1)) / den
                pv.temps[v] = mix
            if kind is CutKind.FEEDING:
                pv.p_origin[v] = sol.pressures[:, cs.nmap[v]].copy()
            elif kind is CutKind.RETURN:
                i = cs.outlet_nodes_g.index(v)
                pv.flow_out[v] = sol.bflows[:, cs.nb_in + i].copy()
        for v in part.roots:
            kind = part.cut_kind[v]
            if kind is CutKind.FEEDING:
                i = cs.inlet_nodes_g.index(v)
                pv.flow_in[v] = sol.bflows[:, i].copy()
            elif kind is CutKind.RETURN:
                pv.p_end[v] = sol.pressures[:, cs.nmap[v]].copy()
        if part.has_plant_root and self._plant_shared:
            # the dictated plant pressure is passed (and so convergence-
            # checked) only when a peer actually consumes it
            pv.p_end[v0p] = sol.pressures[:, cs.nmap[v0p]].copy()
        return pv

    # -- one sampling instant ----------------------------------------------

    def step(self, state: ThermalState, forecasts: Forecasts):
        """Coordinate local solves until the Nash fixed point settles.

        ``forecasts.qout`` is ordered like the full graph's user edges.
        Returns (controls, info) where controls carries the first-move
        valve positions and the recovered plant flow, and info the round
        log, per-subsystem solutions and convergence flags.
        """
        g = self.model.graph
        N = self.horizon.N
        qout = np.asarray(forecasts.qout, dtype=float)
        demand_by_edge = {j: qout[:, self._user_slot[j]] for j in g.user_edges}
        dictator = select_dictator(g, self.partitions, demand_by_edge)

        if self._passed is None:
            self._hseed, self._theta_seed = seed_hydraulics(self.model)
            passed = self.seed_pass(state, hstate=self._hseed)
        else:
            passed = self._shift_pass(self._passed)
            # receding-horizon shift of every subsystem's warm start
            for part in self.partitions:
                if part.pid in self._warm:
                    prob = self._problem(part, dictator, restoration=False)
                    self._warm[part.pid] = prob.shift_warm(self._warm[part.pid])

        prm = self.params
        v0p = g.node_index[g.plant_root]
        # last known plant-pressure plan of the dictator; the restoration
        # floor is expressed relative to it
        if self._hseed is not None:
            dictator_plant = np.full(N, float(self._hseed.node_pressures[v0p]))
        else:
            dictator_plant = np.full(N, self.model.p_plant_min)
        plant_floor: np.ndarray | None = None
        solutions: dict[int, OcpSolution] = {}
        flags = {p.pid: False for p in self.partitions}
        conv_round = {p.pid: None for p in self.partitions}
        log: list[dict] = []
        rounds_used = prm.max_iters
        last_inbound: dict[int, InboundVars] = {}
        last_new: dict[int, PassedVars] = {}
        last_floor: dict[int, np.ndarray | None] = {}

        sweep = sorted(self.partitions, key=lambda p: (self._depth[p.pid], p.pid))
        for rnd in range(1, prm.max_iters + 1):
            new_pass: dict[int, PassedVars] = {}
            deltas: dict[int, np.ndarray] = {}
            own_ok: dict[int, bool] = {}
            events: dict[int, str] = {}
            for part in sweep:
                # Gauss-Seidel: every subsystem consumes the passes already
                # relaxed earlier in this sweep, so boundary information
                # crosses the whole network once per round
                box = route_pass(g, self.partitions, passed, dictator)[part.pid]
                prob = self._problem(part, dictator, restoration=False)
                cs = prob.cs
                floor_here = plant_floor if part.pid == dictator else None
                if (part.pid in last_new
                        and _inbound_close(last_inbound.get(part.pid), box, prm.eps)
                        and _floor_close(last_floor.get(part.pid), floor_here, prm.eps)):
                    # inputs identical to the previous round: the local
                    # problem is unchanged, so its solution is reused
                    new = last_new[part.pid]
                    new_pass[part.pid] = new
                    deltas[part.pid] = pass_delta(passed[part.pid], new)
                    own_ok[part.pid] = bool(np.all(deltas[part.pid] <= prm.eps))
                    passed[part.pid] = relax_update(passed[part.pid], new, prm.omega)
                    continue
                last_inbound[part.pid] = box
                last_floor[part.pid] = None if floor_here is None else floor_here.copy()
                cpl = Coupling(
                    pressure_pins=box.pressure_pins,
                    supply_pin_nodes={v for v in box.pressure_pins
                                      if v == v0p or part.cut_kind.get(v) is CutKind.FEEDING},
                    fixed_node_flows=box.fixed_node_flows,
                    boundary_temps=box.boundary_temps,
                    plant_pressure_floor=floor_here,
                )
                sub_fc = Forecasts(
                    qout=qout[:, [self._user_slot[j] for j in cs.users_g]],
                    tamb=forecasts.tamb,
                )
                prob.set_params(state, sub_fc, cpl)
                warm = self._warm.get(part.pid)
                # real-time-iteration style rounds: the first solve of a
                # sampling instant may run long, later rounds take a few
                # Newton steps each; the joint fixed point is unchanged and
                # the per-round map stays smooth
                from dataclasses import replace as _dc_replace
                if warm is None or len(self.partitions) == 1:
                    # a single subsystem IS the centralized problem; give it
                    # the full budget so both paths coincide exactly
                    opts = self.solver_options
                else:
                    opts = _dc_replace(self.solver_options,
                                       max_iter=(8 if rnd == 1 else 3),
                                       qp_tol=1e-8,
                                       kkt_accept=max(1e-3, 2.0 * self._last_kkt.get(part.pid, 0.0)))
                sol = solve_nlp(prob, warm=warm, state=state,
                                hstate=self._hseed if warm is None else None,
                                theta0=self._theta_seed if warm is None else 0.5,
                                options=opts)
                if sol.status == "infeasible" and opts.max_iter < self.solver_options.max_iter:
                    # a clipped round budget is no basis for an infeasibility
                    # verdict; confirm with the full budget first
                    sol = solve_nlp(prob, warm=warm, state=state,
                                    options=self.solver_options)
                if (sol.status == "infeasible" and self.restoration_enabled
                        and bool(cs.pin_supply.any())):
                    rest_prob = self._problem(part, dictator, restoration=True)
                    dictated = (box.dictated_plant
                                if box.dictated_plant is not None
                                else dictator_plant)
                    p_min, rsol = restore_feasibility(
                        rest_prob, state, sub_fc, cpl, dictated,
                        options=self.solver_options,
                    )
                    sol = rsol
                    new = self._extract_pass(part, rest_prob.cs, sol)
                    new.cost = passed[part.pid].cost  # objective not comparable
                    if rsol.p_slack > 0.5 * float(min(prm.eps[1], prm.eps[2])):
                        plant_floor = (p_min if plant_floor is None
                                       else np.maximum(plant_floor, p_min))
                        events[part.pid] = f"restoration p_slack={rsol.p_slack:.3f}"
                        own_ok[part.pid] = False
                    else:
                        # sub-threshold lift: below the coordination's own
                        # pressure resolution, absorbed without escalation
                        events[part.pid] = f"micro-slack {rsol.p_slack:.3f} absorbed"
                else:
                    self._warm[part.pid] = sol.warm
                    self._last_kkt[part.pid] = sol.kkt
                    new = self._extract_pass(part, cs, sol)
                solutions[part.pid] = sol
                new_pass[part.pid] = new
                last_new[part.pid] = new
                deltas[part.pid] = pass_delta(passed[part.pid], new)
                if own_ok.get(part.pid) is not False:
                    own_ok[part.pid] = bool(np.all(deltas[part.pid] <= prm.eps))
                passed[part.pid] = relax_update(passed[part.pid], new, prm.omega)
                if part.pid == dictator:
                    dictator_plant = sol.pressures[:, cs.nmap[v0p]].copy()

            # settled = own thresholds met and every producer settled
            flags = dict(own_ok)
            for _ in range(len(self.partitions)):
                changed = False
                for part in self.partitions:
                    val = own_ok[part.pid] and all(
                        flags[j] for j in self._producers[part.pid])
                    if val != flags[part.pid]:
                        flags[part.pid] = val
                        changed = True
                if not changed:
                    break
            for pid, fl in flags.items():
                if fl and conv_round[pid] is None:
                    conv_round[pid] = rnd

            log.append({
                "round": rnd,
                "dictator": dictator,
                "subsystems": {
                    str(pid): {
                        "cost": solutions[pid].cost,
                        "status": solutions[pid].status,
                        "delta": [float(x) if math.isfinite(x) else None
                                  for x in deltas[pid]],
                        "converged": bool(flags[pid]),
                        **({"event": events[pid]} if pid in events else {}),
                    }
                    for pid in sorted(solutions)
                },
            })
            if all(flags.values()):
                rounds_used = rnd
                break

        self._passed = passed
        self._dictator = dictator
        self._plant_floor = plant_floor

        theta = {}
        m0 = 0.0
        for part in self.partitions:
            cs = self._problem(part, dictator, restoration=False).cs
            sol = solutions[part.pid]
            for u, j in enumerate(cs.users_g):
                theta[g.edges[j].name] = float(sol.theta[0, u])
            if part.has_plant_root:
                m0 += float(sol.bflows[0, 0])
        controls = {"theta": theta, "plant_flow": m0}
        info = {
            "rounds": rounds_used,
            "converged": all(flags.values()),
            "converged_round": conv_round,
            "dictator": dictator,
            "log": log,
            "solutions": solutions,
            "passed": passed,
            "plant_floor": plant_floor,
        }
        return controls, info


def _unilateral_resolve(controller: DmpcController, pid: int, state: ThermalState,
                        forecasts: Forecasts, options: SqpOptions | None = None):
    """Full-accuracy re-solve of one subsystem with peers' passes frozen.

    Uses the controller's post-step relaxed passes (the Nash candidate) and
    the subsystem's own warm start; peers are untouched.
    """
    g = controller.model.graph
    dictator = controller._dictator
    part = next(p for p in controller.partitions if p.pid == pid)
    box = route_pass(g, controller.partitions, controller._passed, dictator)[pid]
    prob = controller._problem(part, dictator, restoration=False)
    cs = prob.cs
    v0p = g.node_index[g.plant_root]
    qout = np.asarray(forecasts.qout, dtype=float)
    cpl = Coupling(
        pressure_pins=box.pressure_pins,
        supply_pin_nodes={v for v in box.pressure_pins
                          if v == v0p or part.cut_kind.get(v) is CutKind.FEEDING},
        fixed_node_flows=box.fixed_node_flows,
        boundary_temps=box.boundary_temps,
        plant_pressure_floor=(controller._plant_floor if pid == dictator else None),
    )
    sub_fc = Forecasts(
        qout=qout[:, [controller._user_slot[j] for j in cs.users_g]],
        tamb=forecasts.tamb,
    )
    prob.set_params(state, sub_fc, cpl)
    return solve_nlp(prob, warm=controller._warm.get(pid), state=state,
                     options=options or controller.solver_options)


DmpcController.unilateral_resolve = _unilateral_resolve


def dmpc_iterate(
    model: PlantModel,
    horizon: Horizon,
    cost: CostSpec,
    partitions: list[Partition],
    state: ThermalState,
    forecasts: Forecasts,
    params: ConvergenceParams | None = None,
    envelope_scale: float = 1.0,
    restoration: bool = True,
) -> tuple[dict, dict]:
    """Single-shot coordination at one sampling instant (fresh controller)."""
    ctrl = DmpcController(model, horizon, cost, partitions, params=params,
                          envelope_scale=envelope_scale, restoration=restoration)
    return ctrl.step(state, forecasts)
