"""Scenario files, closed-loop simulation and metrics.

A scenario JSON (versioned, ``schema_version`` 1) describes the network,
buildings, boundary profiles, partitions and control settings. The closed
loop advances the truth model (hydraulic solve + implicit-Euler thermal
step at the controller's discretization) under one of three controllers:

nominal      centralized horizon solve with the flexibility envelopes
             clamped to zero (pure demand tracking),
centralized  centralized horizon solve with the full envelopes,
distributed  the communication-based controller over the partitions.

Traces and metrics are written as CSV, coordination rounds as JSON lines;
column layouts are documented in ``schemas/trace_columns.md``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

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
    make_partitions,
)
from .hydraulics import FlowBoundary, HydraulicState, edge_zetas, solve_flows
from .thermal import BuildingModel, ThermalState, step_soe, step_temperatures, user_heat
from .ocp import (
    CostSpec,
    Forecasts,
    Horizon,
    PlantModel,
    centralized_mpc_step,
    transcribe,
)
from .dmpc import ConvergenceParams, DmpcController
from .sqp import SqpOptions

__all__ = [
    "ScenarioError",
    "ScenarioConfig",
    "MetricsReport",
    "load_scenario",
    "scenario_path",
    "run_closed_loop",
    "compute_metrics",
    "write_trace_csv",
    "write_metrics_csv",
    "write_iterations_jsonl",
]

SCHEMA_VERSION = 1
MODES = ("nominal", "centralized", "distributed")


class ScenarioError(ValueError):
    """Raised with an exhaustive list of scenario-file problems."""


@dataclass
class ScenarioConfig:
    """Validated scenario: network, buildings, profiles and control setup."""

    name: str
    graph: NetworkGraph
    fluid: FluidProps
    buildings: dict[str, BuildingModel]
    partitions: list[Partition]
    edge_assignment: dict[str, int]
    T0: float
    tamb_profile: np.ndarray  # per sampling instant, simulation + horizon
    horizon: Horizon
    sim_steps: int
    convergence: ConvergenceParams
    cost: CostSpec
    theta_min: float
    mu: float
    m0_max: float
    m0_min: float
    p_plant_min: float
    restoration: bool
    solver_max_iter: int

    def plant_model(self) -> PlantModel:
        return PlantModel(
            graph=self.graph,
            fluid=self.fluid,
            buildings=self.buildings,
            T0=self.T0,
            m0_max=self.m0_max,
            m0_min=self.m0_min,
            p_plant_min=self.p_plant_min,
        )

    def forecasts(self, step: int) -> Forecasts:
        N = self.horizon.N
        qout = np.column_stack([
            self.buildings[self.graph.edges[j].name].qout_profile[step:step + N]
            for j in self.graph.user_edges
        ])
        return Forecasts(qout=qout, tamb=self.tamb_profile[step:step + N])


def _interp_profile(spec, n_steps: int, dt: float, what: str, problems: list[str]) -> np.ndarray:
    """Piecewise-linear [[hour, value], ...] or constant -> per-step samples."""
    t = np.arange(n_steps) * dt / 3600.0
    if isinstance(spec, (int, float)):
        return np.full(n_steps, float(spec))
    try:
        pts = np.asarray(spec, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError
    except (TypeError, ValueError):
        problems.append(f"{what}: expected a number or [[hour, value], ...]")
        return np.zeros(n_steps)
    if pts.shape[0] < 2:
        return np.full(n_steps, float(pts[0, 1]))
    if np.any(np.diff(pts[:, 0]) <= 0):
        problems.append(f"{what}: breakpoint hours must increase")
    if pts[-1, 0] < t[-1] - 1e-9:
        problems.append(
            f"{what}: profile ends at {pts[-1, 0]:.2f} h but {t[-1]:.2f} h is needed "
            f"(simulation length plus horizon)"
        )
    return np.interp(t, pts[:, 0], pts[:, 1])


def load_scenario(path) -> ScenarioConfig:
    """Parse and validate a scenario file; all problems reported at once."""
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON: {exc}") from exc

    problems: list[str] = []
    if raw.get("schema_version") != SCHEMA_VERSION:
        problems.append(
            f"schema_version: expected {SCHEMA_VERSION}, got {raw.get('schema_version')!r}"
        )

    control = raw.get("control", {})
    N = int(control.get("horizon_steps", 6))
    dt = float(control.get("dt_seconds", 600.0))
    sim_hours = float(raw.get("simulation_hours", 36.0))
    sim_steps = int(round(sim_hours * 3600.0 / dt))
    theta_min = float(control.get("theta_min", 0.01))
    mu_default = float(control.get("mu", 5.74))

    fluid_raw = raw.get("fluid", {})
    fluid = FluidProps(rho=float(fluid_raw.get("rho", 1000.0)),
                       cp=float(fluid_raw.get("cp", 4186.0)))

    edges = []
    names = set()
    for i, e in enumerate(raw.get("edges", [])):
        loc = f"edges[{i}]"
        missing = [k for k in ("name", "tail", "head", "kind") if k not in e]
        if missing:
            problems.append(f"{loc}: missing fields {missing}")
            continue
        if e["name"] in names:
            problems.append(f"{loc}: duplicate edge name {e['name']!r}")
        names.add(e["name"])
        try:
            kind = EdgeKind(e["kind"])
        except ValueError:
            problems.append(f"{loc}: unknown kind {e['kind']!r}")
            continue
        try:
            if kind.is_user:
                params = UserParams(mu=float(e.get("mu", mu_default)),
                                    theta_min=float(e.get("theta_min", theta_min)))
            else:
                req = [k for k in ("zeta", "volume", "hAs") if k not in e]
                if req:
                    problems.append(f"{loc}: non-user edge missing {req}")
                    continue
                params = PipeParams(zeta=float(e["zeta"]), volume=float(e["volume"]),
                                    hAs=float(e["hAs"]))
            edges.append(Edge(e["name"], e["tail"], e["head"], kind, params))
        except (NetworkError, ValueError) as exc:
            problems.append(f"{loc}: {exc}")

    plant = raw.get("plant", {})
    for k in ("root", "terminal"):
        if k not in plant:
            problems.append(f"plant.{k}: missing")
    graph = None
    if not problems:
        try:
            graph = NetworkGraph(edges, plant["root"], plant["terminal"])
        except NetworkError as exc:
            problems.append(f"network: {exc}")
    if problems:
        raise ScenarioError(f"{path}: " + "; ".join(problems))

    boundary = raw.get("boundary", {})
    T0 = float(boundary.get("T0", 80.0))
    if "tamb" not in boundary:
        problems.append("boundary.tamb: missing ambient temperature profile")
        tamb = np.zeros(sim_steps + N)
    else:
        tamb = _interp_profile(boundary["tamb"], sim_steps + N, dt, "boundary.tamb", problems)

    buildings: dict[str, BuildingModel] = {}
    braw = raw.get("buildings", {})
    for j in graph.user_edges:
        name = graph.edges[j].name
        if name not in braw:
            problems.append(f"buildings.{name}: missing for user edge")
            continue
        b = braw[name]
        miss = [k for k in ("C", "dTb", "qout") if k not in b]
        if miss:
            problems.append(f"buildings.{name}: missing {miss}")
            continue
        prof = _interp_profile(b["qout"], sim_steps + N, dt, f"buildings.{name}.qout", problems)
        try:
            buildings[name] = BuildingModel(
                C=float(b["C"]), dTb=float(b["dTb"]), qout_profile=prof,
                t_set_return=float(b.get("t_set_return", 40.0)),
            )
        except ValueError as exc:
            problems.append(f"buildings.{name}: {exc}")

    assignment_raw = raw.get("partitions", {})
    assignment = {}
    for pid_str, edge_names in assignment_raw.items():
        try:
            pid = int(pid_str)
        except ValueError:
            problems.append(f"partitions.{pid_str}: id must be an integer")
            continue
        for en in edge_names:
            if en in assignment:
                problems.append(f"partitions: edge {en!r} assigned twice")
            assignment[en] = pid
    if not assignment:
        assignment = {e.name: 0 for e in graph.edges}
    partitions = []
    try:
        partitions = make_partitions(graph, assignment)
    except PartitionError as exc:
        problems.append(f"partitions: {exc}")

    eps = control.get("eps", [0.1, 1.0, 1.0, 0.2, 0.2, 0.5])
    try:
        convergence = ConvergenceParams(
            omega=float(control.get("omega", 0.5)),
            eps=np.asarray(eps, dtype=float),
            max_iters=int(control.get("max_iters", 50)),
        )
    except ValueError as exc:
        problems.append(f"control: {exc}")
        convergence = ConvergenceParams()

    cost_raw = raw.get("cost", {})
    cost = CostSpec(loss_weight=float(cost_raw.get("loss_weight", 1.0)),
                    flex_weight=float(cost_raw.get("flex_weight", 1.0)))

    if problems:
        raise ScenarioError(f"{path}: " + "; ".join(problems))

    return ScenarioConfig(
        name=raw.get("name", path.stem),
        graph=graph,
        fluid=fluid,
        buildings=buildings,
        partitions=partitions,
        edge_assignment=assignment,
        T0=T0,
        tamb_profile=tamb,
        horizon=Horizon(N=N, dt=dt),
        sim_steps=sim_steps,
        convergence=convergence,
        cost=cost,
        theta_min=theta_min,
        mu=mu_default,
        m0_max=float(control.get("m0_max", 100.0)),
        m0_min=float(control.get("m0_min", 0.01)),
        p_plant_min=float(control.get("p_plant_min", 0.0)),
        restoration=bool(control.get("restoration", True)),
        solver_max_iter=int(control.get("solver_max_iter", 40)),
    )


def scenario_path(name: str) -> Path:
    """Path of a bundled scenario (``two_user``, ``nested``, ...)."""
    p = Path(__file__).parent / "scenarios" / f"{name}.json"
    if not p.exists():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return p


@dataclass
class SimTrace:
    """Closed-loop record, one row per sampling instant."""

    times: np.ndarray  # [s]
    flows: np.ndarray  # (steps, n_edges) truth flows
    pressures: np.ndarray  # (steps, n_nodes)
    temps: np.ndarray  # (steps, n_nonuser) end-of-step pipe temperatures
    soe: np.ndarray  # (steps, n_users) end-of-step states of energy
    theta: np.ndarray  # (steps, n_users) applied valve positions
    plant_flow: np.ndarray  # (steps,)
    qp: np.ndarray  # (steps, n_users) delivered heat
    qout: np.ndarray  # (steps, n_users) nominal demand
    tamb: np.ndarray  # (steps,)
    return_temp: np.ndarray  # (steps,) flow-weighted at the plant terminal
    envelope_violation: np.ndarray  # (steps,) max SOE overshoot [J]
    controller_status: list[str] = field(default_factory=list)
    iteration_log: list[dict] = field(default_factory=list)


@dataclass
class MetricsReport:
    """Aggregates mirrored in metrics.csv."""

    mode: str
    steps: int
    dt: float
    losses_w: np.ndarray  # per step [W]
    cumulative_losses_j: float
    plant_flow: np.ndarray
    bypass_flow: np.ndarray
    avg_return_temp: float
    return_temp: np.ndarray
    used_flexibility: np.ndarray  # (steps, n_users), SOE/envelope
    delivered_flow: np.ndarray  # (steps, n_users)
    envelope_violations: int
    total_demand_j: float
    total_delivered_j: float


def run_closed_loop(cfg: ScenarioConfig, mode: str, substeps: int = 1,
                    progress=None) -> tuple[SimTrace, MetricsReport]:
    """Receding-horizon simulation under the selected controller."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    g = cfg.graph
    model = cfg.plant_model()
    n_users = len(g.user_edges)
    n_nonuser = len(g.nonuser_edges)
    steps = cfg.sim_steps
    dt = cfg.horizon.dt
    opts = SqpOptions(max_iter=cfg.solver_max_iter)

    controller = None
    problem = None
    warm = None
    if mode == "distributed":
        controller = DmpcController(
            model, cfg.horizon, cfg.cost, cfg.partitions,
            params=cfg.convergence, envelope_scale=1.0,
            restoration=cfg.restoration, solver_options=opts,
        )
    else:
        problem = transcribe(model, cfg.horizon, cfg.cost,
                             envelope_scale=0.0 if mode == "nominal" else 1.0)

    # initial truth state: pipes at supply-ish temperatures, storage neutral
    T0v = np.array([
        cfg.T0 if g.edges[j].kind is not EdgeKind.RETURN else
        0.5 * (cfg.T0 + 40.0)
        for j in g.nonuser_edges
    ])
    state = ThermalState(T=T0v, soe=np.zeros(n_users))

    tr = SimTrace(
        times=np.arange(steps) * dt,
        flows=np.zeros((steps, g.n_edges)),
        pressures=np.zeros((steps, g.n_nodes)),
        temps=np.zeros((steps, n_nonuser)),
        soe=np.zeros((steps, n_users)),
        theta=np.zeros((steps, n_users)),
        plant_flow=np.zeros(steps),
        qp=np.zeros((steps, n_users)),
        qout=np.zeros((steps, n_users)),
        tamb=cfg.tamb_profile[:steps].copy(),
        return_temp=np.zeros(steps),
        envelope_violation=np.zeros(steps),
    )

    v0m = g.node_index[g.plant_terminal]
    nonuser_pos = {j: r for r, j in enumerate(g.nonuser_edges)}
    envelopes = np.array([cfg.buildings[g.edges[j].name].envelope for j in g.user_edges])

    for k in range(steps):
        fc = cfg.forecasts(k)
        if mode == "distributed":
            controls, info = controller.step(state, fc)
            status = "converged" if info["converged"] else "max_iters"
            for entry in info["log"]:
                tr.iteration_log.append({"step": k, **entry})
        else:
            problem.set_params(state, fc)
            controls, sol = centralized_mpc_step(problem, state, fc, warm=warm,
                                                 options=opts)
            warm = problem.shift_warm(sol.warm)
            status = sol.status
        tr.controller_status.append(status)

        theta = np.array([controls["theta"][g.edges[j].name] for j in g.user_edges])
        m0 = max(float(controls["plant_flow"]), cfg.m0_min)

        # truth model: hydraulic solve, then thermal/storage integration
        zetas = edge_zetas(g, theta)
        hyd = solve_flows(g, zetas, FlowBoundary(plant_flow=m0))
        sub_dt = dt / substeps
        st = state
        qp_users = np.zeros(n_users)
        for _ in range(substeps):
            st_next = step_temperatures(st, hyd.edge_flows, g, cfg.fluid, cfg.T0,
                                        40.0, float(tr.tamb[k]), sub_dt)
            qp_users = np.zeros(n_users)
            for u, j in enumerate(g.user_edges):
                b = cfg.buildings[g.edges[j].name]
                tin = _node_mix(g, int(g.tails[j]), hyd.edge_flows, st_next.T,
                                cfg.T0, nonuser_pos, cfg.buildings, float(tr.tamb[k]))
                qp_users[u] = user_heat(hyd.edge_flows[j], tin, b, cfg.fluid)
            soe_next = step_soe(st.soe, qp_users, fc.qout[0], sub_dt)
            st = ThermalState(T=st_next.T, soe=soe_next)
        state = st

        tr.flows[k] = hyd.edge_flows
        tr.pressures[k] = hyd.node_pressures
        tr.temps[k] = state.T
        tr.soe[k] = state.soe
        tr.theta[k] = theta
        tr.plant_flow[k] = m0
        tr.qp[k] = qp_users
        tr.qout[k] = fc.qout[0]
        tr.return_temp[k] = _node_mix(g, v0m, hyd.edge_flows, state.T, cfg.T0,
                                      nonuser_pos, cfg.buildings, float(tr.tamb[k]))
        tr.envelope_violation[k] = float(np.max(np.maximum(np.abs(state.soe) - envelopes, 0.0)))
        if progress is not None:
            progress(k, steps, status)

    return tr, compute_metrics(tr, cfg, mode)


def _node_mix(graph, node, flows, T_nonuser, T0, nonuser_pos, buildings, tamb):
    if node == graph.node_index[graph.plant_root]:
        return T0
    num, den = 0.0, 0.0
    for j in graph.in_edges[node]:
        src = (
            buildings[graph.edges[j].name].t_set_return
            if graph.edges[j].kind.is_user
            else T_nonuser[nonuser_pos[j]]
        )
        num += flows[j] * src
        den += flows[j]
    return num / den if den > 1e-12 else tamb


def compute_metrics(trace: SimTrace, cfg: ScenarioConfig, mode: str) -> MetricsReport:
    """Loss, flow, return-temperature and flexibility summaries."""
    g = cfg.graph
    steps = trace.temps.shape[0]
    if steps == 0:
        raise ValueError("empty trace")
    dt = cfg.horizon.dt
    hAs = np.array([g.edges[j].params.hAs for j in g.nonuser_edges])
    losses = (trace.temps - trace.tamb[:, None]) @ hAs
    byp = trace.flows[:, g.bypass_edges].sum(axis=1) if g.bypass_edges else np.zeros(steps)
    envelopes = np.array([cfg.buildings[g.edges[j].name].envelope for j in g.user_edges])
    used_flex = trace.soe / np.where(envelopes > 0, envelopes, 1.0)[None, :]
    return MetricsReport(
        mode=mode,
        steps=steps,
        dt=dt,
        losses_w=losses,
        cumulative_losses_j=float(losses.sum() * dt),
        plant_flow=trace.plant_flow.copy(),
        bypass_flow=byp,
        avg_return_temp=float(trace.return_temp.mean()),
        return_temp=trace.return_temp.copy(),
        used_flexibility=used_flex,
        delivered_flow=trace.flows[:, g.user_edges].copy(),
        envelope_violations=int(np.sum(trace.envelope_violation > 1e-6)),
        total_demand_j=float(trace.qout.sum() * dt),
        total_delivered_j=float(trace.qp.sum() * dt),
    )


# -- output files ------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def write_trace_csv(trace: SimTrace, cfg: ScenarioConfig, path):
    g = cfg.graph
    cols = ["time_s", "plant_flow", "return_temp", "tamb", "status",
            "envelope_violation"]
    cols += [f"theta.{g.edges[j].name}" for j in g.user_edges]
    cols += [f"flow.{e.name}" for e in g.edges]
    cols += [f"pressure.{v}" for v in g.nodes]
    cols += [f"temp.{g.edges[j].name}" for j in g.nonuser_edges]
    cols += [f"soe.{g.edges[j].name}" for j in g.user_edges]
    cols += [f"qp.{g.edges[j].name}" for j in g.user_edges]
    cols += [f"qout.{g.edges[j].name}" for j in g.user_edges]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(trace.times.size):
            row = [_fmt(trace.times[k]), _fmt(trace.plant_flow[k]),
                   _fmt(trace.return_temp[k]), _fmt(trace.tamb[k]),
                   trace.controller_status[k], _fmt(trace.envelope_violation[k])]
            row += [_fmt(x) for x in trace.theta[k]]
            row += [_fmt(x) for x in trace.flows[k]]
            row += [_fmt(x) for x in trace.pressures[k]]
            row += [_fmt(x) for x in trace.temps[k]]
            row += [_fmt(x) for x in trace.soe[k]]
            row += [_fmt(x) for x in trace.qp[k]]
            row += [_fmt(x) for x in trace.qout[k]]
            fh.write(",".join(row) + "\n")


def write_metrics_csv(report: MetricsReport, path):
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"mode,{report.mode}\n")
        fh.write(f"steps,{report.steps}\n")
        fh.write(f"cumulative_losses_j,{_fmt(report.cumulative_losses_j)}\n")
        fh.write(f"avg_losses_w,{_fmt(report.losses_w.mean())}\n")
        fh.write(f"avg_return_temp_c,{_fmt(report.avg_return_temp)}\n")
        fh.write(f"avg_plant_flow_kg_s,{_fmt(report.plant_flow.mean())}\n")
        fh.write(f"avg_bypass_flow_kg_s,{_fmt(report.bypass_flow.mean())}\n")
        fh.write(f"max_used_flexibility,{_fmt(np.abs(report.used_flexibility).max())}\n")
        fh.write(f"envelope_violations,{report.envelope_violations}\n")
        fh.write(f"total_demand_j,{_fmt(report.total_demand_j)}\n")
        fh.write(f"total_delivered_j,{_fmt(report.total_delivered_j)}\n")


def write_iterations_jsonl(trace: SimTrace, path):
    with open(path, "w") as fh:
        for entry in trace.iteration_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
