"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The closed-loop criteria run the bundled scenarios at their configured
settings; the final case-study comparison simulates the full 36 hours in
both modes and therefore dominates the suite's runtime.
"""

import json
import time

import numpy as np
import pytest

from heatnet.harness import load_scenario, run_closed_loop, scenario_path
from heatnet.hydraulics import FlowBoundary, solve_flows, edge_zetas
from heatnet.net import EdgeKind
from heatnet.ocp import (
    Coupling,
    Forecasts,
    centralized_mpc_step,
    solve_nlp,
    transcribe,
)
from heatnet.dmpc import DmpcController, restore_feasibility
from heatnet.sqp import SqpOptions
from heatnet.thermal import ThermalState, step_temperatures

from util_sp import random_sp, solve_exact, to_graph


def _report(num, ok, detail):
    line = f"[ACCEPTANCE {num}] {'PASS' if ok else 'FAIL'} {detail}"
    print(line, flush=True)
    assert ok, line


def _initial_state(cfg):
    g = cfg.graph
    T0v = np.array([cfg.T0 if g.edges[j].kind is not EdgeKind.RETURN else
                    0.5 * (cfg.T0 + 40.0) for j in g.nonuser_edges])
    return ThermalState(T=T0v, soe=np.zeros(len(g.user_edges)))


def test_criterion_1_hydraulic_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(20):
        tree = random_sp(rng, max_edges=8)
        g, names = to_graph(tree)
        zetas = np.array([e.params.zeta for e in g.edges])
        flow = float(rng.uniform(0.2, 3.0))
        st = solve_flows(g, zetas, FlowBoundary(plant_flow=flow))
        flows, drops = {}, {}
        solve_exact(tree, flow, 0.0, flows, drops, iter(names))
        for nm in names:
            j = g.edge_index[nm]
            worst = max(worst,
                        abs(st.edge_flows[j] - flows[nm]) / max(abs(flows[nm]), 1e-12),
                        abs(st.edge_drops[j] - drops[nm]) / max(abs(drops[nm]), 1e-9))
    elapsed = time.perf_counter() - t0
    _report(1, worst <= 1e-6 and elapsed < 1.0,
            f"series/parallel oracle: max rel err {worst:.2e} (tol 1e-6), "
            f"runtime {elapsed:.2f}s (< 1 s)")


def test_criterion_2_degenerate_distribution_equivalence():
    cfg = load_scenario(scenario_path("two_user"))
    cfg.sim_steps = 12
    tr_c, _ = run_closed_loop(cfg, "centralized")
    tr_d, _ = run_closed_loop(cfg, "distributed")
    dtheta = float(np.abs(tr_c.theta - tr_d.theta).max())
    dm0 = float(np.abs(tr_c.plant_flow - tr_d.plant_flow).max())
    _report(2, dtheta <= 1e-6 and dm0 <= 1e-6,
            f"single-partition distributed vs centralized over {cfg.sim_steps} "
            f"steps: max dtheta {dtheta:.2e}, max dplant_flow {dm0:.2e} (tol 1e-6)")


@pytest.fixture(scope="module")
def six_sub_run():
    cfg = load_scenario(scenario_path("six_sub_18ish"))
    model = cfg.plant_model()
    ctrl = DmpcController(model, cfg.horizon, cfg.cost, cfg.partitions,
                          params=cfg.convergence, restoration=cfg.restoration,
                          solver_options=SqpOptions(max_iter=cfg.solver_max_iter))
    state = _initial_state(cfg)
    steps = []
    for k in range(8):
        fc = cfg.forecasts(k)
        controls, info = ctrl.step(state, fc)
        steps.append({"state": ThermalState(state.T.copy(), state.soe.copy()),
                      "forecasts": fc, "controls": controls, "info": info})
        # advance the truth model
        g = cfg.graph
        theta = np.array([controls["theta"][g.edges[j].name] for j in g.user_edges])
        hyd = solve_flows(g, edge_zetas(g, theta),
                          FlowBoundary(plant_flow=max(controls["plant_flow"], cfg.m0_min)))
        from heatnet.thermal import step_soe, user_heat
        from heatnet.harness import _node_mix
        nonuser_pos = {j: r for r, j in enumerate(g.nonuser_edges)}
        nxt = step_temperatures(state, hyd.edge_flows, g, cfg.fluid, cfg.T0, 40.0,
                                float(fc.tamb[0]), cfg.horizon.dt)
        qp = np.zeros(len(g.user_edges))
        for u, j in enumerate(g.user_edges):
            tin = _node_mix(g, int(g.tails[j]), hyd.edge_flows, nxt.T, cfg.T0,
                            nonuser_pos, cfg.buildings, float(fc.tamb[0]))
            qp[u] = user_heat(hyd.edge_flows[j], tin, cfg.buildings[g.edges[j].name],
                              cfg.fluid)
        state = ThermalState(T=nxt.T, soe=step_soe(state.soe, qp, fc.qout[0],
                                                   cfg.horizon.dt))
    return cfg, ctrl, steps


def test_criterion_3_nash_stationarity(six_sub_run):
    cfg, ctrl, steps = six_sub_run
    eps_cost = float(cfg.convergence.eps[5])
    sampled = [s for s in steps if s["info"]["converged"]][-3:]
    assert sampled, "no converged steps to sample"
    worst = -np.inf
    # re-solving requires the controller's passes from that step; replay the
    # last sampled step (the controller state matches the final entry)
    last = steps[-1]
    assert last["info"]["converged"]
    for part in ctrl.partitions:
        old = last["info"]["solutions"][part.pid].cost
        new = ctrl.unilateral_resolve(part.pid, last["state"], last["forecasts"],
                                      options=SqpOptions(max_iter=60))
        worst = max(worst, old - new.cost)
    _report(3, worst <= eps_cost,
            f"max unilateral cost improvement {worst:.3f} <= eps_cost {eps_cost}")


def test_criterion_4_global_stitching(six_sub_run):
    cfg, ctrl, steps = six_sub_run
    g = cfg.graph
    eps_flow, eps_p = float(cfg.convergence.eps[3]), float(cfg.convergence.eps[1])
    worst_mass, worst_press, worst_drop = 0.0, 0.0, 0.0
    for entry in steps[-3:]:
        info = entry["info"]
        if not info["converged"]:
            continue
        flows = np.zeros(g.n_edges)
        thetas = np.zeros(len(g.user_edges))
        pressures = {}
        user_slot = {j: u for u, j in enumerate(g.user_edges)}
        for part in ctrl.partitions:
            cs = ctrl._problem(part, info["dictator"], False).cs
            sol = info["solutions"][part.pid]
            for le, je in enumerate(cs.edges_g):
                flows[je] = sol.flows[0, le]
            for u, je in enumerate(cs.users_g):
                thetas[user_slot[je]] = sol.theta[0, u]
            for lv, jv in enumerate(cs.nodes_g):
                pressures.setdefault(jv, []).append(sol.pressures[0, lv])
        # mass balance at interior nodes
        imb = g.incidence @ flows
        interior = [v for v in range(g.n_nodes)
                    if v not in (g.node_index[g.plant_root], g.node_index[g.plant_terminal])]
        worst_mass = max(worst_mass, float(np.abs(imb[interior]).max()))
        # pressure consistency across subsystems and the drop law
        P = np.array([np.mean(pressures[v]) for v in range(g.n_nodes)])
        for v, vals in pressures.items():
            worst_press = max(worst_press, max(vals) - min(vals))
        zetas = edge_zetas(g, thetas)
        drop_resid = g.incidence.T @ P - zetas * flows * np.abs(flows)
        worst_drop = max(worst_drop, float(np.abs(drop_resid).max()))
    _report(4, worst_mass <= eps_flow and worst_press <= eps_p and worst_drop <= eps_p,
            f"stitched residuals: mass {worst_mass:.3f} kg/s (<= {eps_flow}), "
            f"boundary pressure spread {worst_press:.3f} Pa, drop law "
            f"{worst_drop:.3f} Pa (<= {eps_p})")


def test_criterion_5_feasibility_restoration():
    cfg = load_scenario(scenario_path("starvation"))
    # closed loop without restoration violates the envelope; with it, none
    cfg_off = load_scenario(scenario_path("starvation"))
    cfg_off.restoration = False
    _, met_off = run_closed_loop(cfg_off, "distributed")
    _, met_on = run_closed_loop(cfg, "distributed")

    # the reported lift matches a bisection oracle on the starved subsystem
    g = cfg.graph
    model = cfg.plant_model()
    hz = cfg.horizon
    west = next(p for p in cfg.partitions if p.pid == 1)
    state = ThermalState(T=np.full(len(g.nonuser_edges), 70.0),
                         soe=np.array([-cfg.buildings["uW"].envelope, 0.0, 0.0]))
    k_peak = int(6 * 3600 / hz.dt) - hz.N  # demand plateau
    fc_w = Forecasts(qout=np.column_stack([
        cfg.buildings["uW"].qout_profile[k_peak:k_peak + hz.N]]),
        tamb=cfg.tamb_profile[k_peak:k_peak + hz.N])
    dictate = np.full(hz.N, cfg.p_plant_min)
    cpl = Coupling(pressure_pins={g.node_index["ps"]: dictate},
                   supply_pin_nodes={g.node_index["ps"]})
    prob = transcribe(model, hz, cfg.cost, partition=west, pin_plant_root=True)
    prob.set_params(state, fc_w, cpl)
    nominal = solve_nlp(prob, state=state, options=SqpOptions(max_iter=60))
    rest = transcribe(model, hz, cfg.cost, partition=west, pin_plant_root=True,
                      restoration=True)
    p_min, rsol = restore_feasibility(rest, state, fc_w, cpl, dictate,
                                      options=SqpOptions(max_iter=80))

    def feasible(delta):
        cpl_d = Coupling(pressure_pins={g.node_index["ps"]: dictate + delta},
                         supply_pin_nodes={g.node_index["ps"]})
        prob.set_params(state, fc_w, cpl_d)
        return solve_nlp(prob, state=state,
                         options=SqpOptions(max_iter=60)).status != "infeasible"

    lo, hi = 0.0, 4.0 * float(rsol.p_slack) + 400.0
    assert feasible(hi) and not feasible(0.0)
    for _ in range(26):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    oracle = hi
    rel = abs(rsol.p_slack - oracle) / max(oracle, 1e-9)
    ok = (met_off.envelope_violations > 0 and met_on.envelope_violations == 0
          and nominal.status == "infeasible" and rsol.p_slack > 0.0 and rel <= 0.01)
    _report(5, ok,
            f"violations without restoration {met_off.envelope_violations} (> 0), "
            f"with restoration {met_on.envelope_violations} (= 0); "
            f"p_slack {rsol.p_slack:.2f} Pa vs bisection {oracle:.2f} Pa "
            f"(rel err {rel:.3%}, tol 1%)")


def test_criterion_7_numerical_hygiene():
    cfg = load_scenario(scenario_path("two_user"))
    model = cfg.plant_model()
    prob = transcribe(model, cfg.horizon, cfg.cost)
    state = _initial_state(cfg)
    prob.set_params(state, cfg.forecasts(0))
    nlp = prob.nlp()
    rng = np.random.default_rng(7)
    x_base = prob.initial_guess(state)
    worst = 0.0
    h = 1e-6
    for _ in range(10):
        x = np.clip(x_base + 0.05 * rng.normal(size=prob.cs.n), nlp.lb, nlp.ub)
        c0, J = nlp.eval_c(x)
        f0, g0 = nlp.eval_f(x)
        cols = rng.choice(prob.cs.n, size=12, replace=False)
        for i in cols:
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            cp_, _ = nlp.eval_c(xp)
            cm_, _ = nlp.eval_c(xm)
            fd = (cp_ - cm_) / (2 * h)
            scale = max(1.0, float(np.abs(fd).max()))
            worst = max(worst, float(np.abs(J[:, i] - fd).max()) / scale)
            gfd = (nlp.eval_f(xp)[0] - nlp.eval_f(xm)[0]) / (2 * h)
            worst = max(worst, abs(g0[i] - gfd) / max(1.0, abs(gfd)))

    # implicit Euler against the closed-form exponential on a stiff pipe
    from heatnet.net import Edge, NetworkGraph, PipeParams, UserParams, FluidProps
    edges = [
        Edge("f", "ps", "n", EdgeKind.FEEDING, PipeParams(zeta=1.0, volume=0.005, hAs=2.0)),
        Edge("u", "n", "r", EdgeKind.USER, UserParams(mu=5.74)),
        Edge("b", "r", "pr", EdgeKind.RETURN, PipeParams(zeta=1.0, volume=0.005, hAs=2.0)),
    ]
    gnet = NetworkGraph(edges, "ps", "pr")
    fluid = FluidProps()
    m, dt = 1.0, 600.0
    c1 = 1.0 / (fluid.rho * 0.005)
    c2 = 2.0 / (fluid.rho * fluid.cp * 0.005)
    lam = c1 * m + c2
    T_inf = (c1 * m * 80.0 + c2 * 10.0) / lam
    st = ThermalState(T=np.array([30.0, 50.0]), soe=np.zeros(1))
    out = step_temperatures(st, np.full(3, m), gnet, fluid, 80.0, 40.0, 10.0, dt)
    exact = T_inf + (30.0 - T_inf) * np.exp(-lam * dt)
    ie_err = abs(out.T[0] - exact) / abs(exact - 30.0)
    _report(7, worst <= 1e-5 and ie_err <= 0.01,
            f"derivative check max rel err {worst:.2e} (tol 1e-5); "
            f"implicit-Euler vs exponential {ie_err:.3%} of the step (tol 1%)")


def test_criterion_8_convergence_cascade():
    cfg = load_scenario(scenario_path("chain3"))
    model = cfg.plant_model()
    ctrl = DmpcController(model, cfg.horizon, cfg.cost, cfg.partitions,
                          params=cfg.convergence, restoration=cfg.restoration,
                          solver_options=SqpOptions(max_iter=cfg.solver_max_iter))
    state = _initial_state(cfg)
    ok = True
    detail = []
    for k in range(6):
        fc = cfg.forecasts(k)
        controls, info = ctrl.step(state, fc)
        cr = info["converged_round"]
        ok = ok and info["converged"] and cr[1] is not None
        ok = ok and cr[1] <= cr[2] <= cr[3]
        detail.append(f"step {k}: rounds {cr[1]}/{cr[2]}/{cr[3]}")
    _report(8, ok, "source<=mid<=leaf converged rounds at every step: "
            + "; ".join(detail))


def test_criterion_6_directional_case_study(tmp_path):
    cfg = load_scenario(scenario_path("six_sub_18ish"))
    t0 = time.perf_counter()
    tr_d, met_d = run_closed_loop(cfg, "distributed")
    t_dist = time.perf_counter() - t0
    t0 = time.perf_counter()
    tr_n, met_n = run_closed_loop(cfg, "nominal")
    t_nom = time.perf_counter() - t0
    loss_red = 1.0 - met_d.cumulative_losses_j / met_n.cumulative_losses_j
    temp_red = met_n.avg_return_temp - met_d.avg_return_temp
    total = t_dist + t_nom
    ok = (met_d.cumulative_losses_j < met_n.cumulative_losses_j
          and met_d.avg_return_temp < met_n.avg_return_temp
          and met_d.envelope_violations == 0)
    _report(6, ok,
            f"36 h distributed vs nominal: losses {met_d.cumulative_losses_j/3.6e6:.2f} "
            f"vs {met_n.cumulative_losses_j/3.6e6:.2f} kWh ({loss_red:+.1%}), "
            f"avg return temp {met_d.avg_return_temp:.2f} vs "
            f"{met_n.avg_return_temp:.2f} C (-{temp_red:.2f} K), "
            f"violations {met_d.envelope_violations}; runtime {total/60:.1f} min "
            f"(target < 10 min{', target met' if total < 600 else ', target exceeded'})")
