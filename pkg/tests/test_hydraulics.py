import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatnet.hydraulics import (
    FlowBoundary,
    HydraulicState,
    HydraulicsError,
    ValveSetting,
    edge_zetas,
    hydraulic_residual,
    smooth_flow,
    solve_flows,
    valve_zeta,
)
from heatnet.net import Edge, EdgeKind, NetworkGraph, PipeParams, UserParams

from util_sp import random_sp, solve_exact, to_graph


def test_valve_fully_open_limit():
    assert valve_zeta(ValveSetting(theta=1.0, mu=5.74)) == 0.0


def test_valve_midpoint_value():
    # direct evaluation of the valve law at theta = 0.5
    assert valve_zeta(ValveSetting(theta=0.5, mu=5.74)) == pytest.approx(5.74, rel=1e-12)


def test_valve_minimum_position_value():
    # direct evaluation at theta_min = 0.01: 5.74 * 99^2
    val = valve_zeta(ValveSetting(theta=0.01, mu=5.74, theta_min=0.01))
    assert val == pytest.approx(5.74 * 99.0**2, rel=1e-12)
    assert val == pytest.approx(56257.74, rel=1e-12)


def test_valve_bounds_enforced():
    with pytest.raises(ValueError):
        valve_zeta(ValveSetting(theta=0.005, mu=5.74, theta_min=0.01))
    with pytest.raises(ValueError):
        valve_zeta(ValveSetting(theta=1.2, mu=5.74))


def test_valve_monotone_decreasing():
    thetas = np.linspace(0.02, 0.99, 40)
    vals = [valve_zeta(ValveSetting(float(t), 5.74)) for t in thetas]
    assert np.all(np.diff(vals) < 0)


def series_pair():
    edges = [
        Edge("e1", "a", "b", EdgeKind.BYPASS, PipeParams(zeta=1.0, volume=0.1, hAs=1.0)),
        Edge("e2", "b", "c", EdgeKind.BYPASS, PipeParams(zeta=1.0, volume=0.1, hAs=1.0)),
        Edge("ret", "c", "d", EdgeKind.RETURN, PipeParams(zeta=1e-9, volume=0.1, hAs=1.0)),
    ]
    return NetworkGraph(edges, "a", "d")


def test_series_analytic():
    g = series_pair()
    zetas = np.array([1.0, 1.0, 1e-9])
    st_ = solve_flows(g, zetas, FlowBoundary(node_pressures={"a": 2.0, "c": 0.0}))
    assert st_.edge_flows[0] == pytest.approx(1.0, rel=1e-6)
    assert st_.edge_drops[0] == pytest.approx(1.0, rel=1e-6)
    assert st_.edge_drops[1] == pytest.approx(1.0, rel=1e-6)


def test_parallel_analytic():
    edges = [
        Edge("p1", "a", "b", EdgeKind.BYPASS, PipeParams(zeta=1.0, volume=0.1, hAs=1.0)),
        Edge("p2", "a", "b", EdgeKind.BYPASS, PipeParams(zeta=4.0, volume=0.1, hAs=1.0)),
        Edge("ret", "b", "c", EdgeKind.RETURN, PipeParams(zeta=1e-9, volume=0.1, hAs=1.0)),
    ]
    g = NetworkGraph(edges, "a", "c")
    st_ = solve_flows(g, np.array([1.0, 4.0, 1e-9]), FlowBoundary(plant_flow=3.0))
    assert st_.edge_flows[0] == pytest.approx(2.0, rel=1e-6)
    assert st_.edge_flows[1] == pytest.approx(1.0, rel=1e-6)
    assert st_.edge_drops[0] == pytest.approx(4.0, rel=1e-6)
    assert st_.edge_drops[1] == pytest.approx(4.0, rel=1e-6)


def test_zero_injection_zero_flow(tiny_net):
    zetas = edge_zetas(tiny_net, np.array([0.5]))
    st_ = solve_flows(tiny_net, zetas, FlowBoundary(plant_flow=0.0))
    assert np.allclose(st_.edge_flows, 0.0, atol=1e-9)
    assert np.allclose(st_.node_pressures, st_.node_pressures[0], atol=1e-6)


def test_solved_state_residual_small(tiny_net):
    zetas = edge_zetas(tiny_net, np.array([0.4]))
    bnd = FlowBoundary(plant_flow=0.9)
    st_ = solve_flows(tiny_net, zetas, bnd)
    r = hydraulic_residual(st_, tiny_net, zetas, bnd)
    # pressure-valued rows measured in the solver's kPa-equivalent scaling
    n_e, n_v = tiny_net.n_edges, tiny_net.n_nodes
    scale = np.concatenate([np.full(n_e, 1e-3), np.ones(n_v), np.full(n_e, 1e-3)])
    assert np.abs(r * scale).max() <= 1e-8


def test_residual_mass_row_linearity(tiny_net):
    zetas = edge_zetas(tiny_net, np.array([0.4]))
    bnd = FlowBoundary(plant_flow=0.9)
    st_ = solve_flows(tiny_net, zetas, bnd)
    r0 = hydraulic_residual(st_, tiny_net, zetas, bnd)
    pert = HydraulicState(st_.edge_flows.copy(), st_.node_pressures.copy(),
                          st_.edge_drops.copy())
    delta = 0.05
    pert.edge_flows[0] += delta
    r1 = hydraulic_residual(pert, tiny_net, zetas, bnd)
    n_e = tiny_net.n_edges
    mass0, mass1 = r0[n_e:n_e + tiny_net.n_nodes], r1[n_e:n_e + tiny_net.n_nodes]
    tail, head = tiny_net.tails[0], tiny_net.heads[0]
    # the drop row for the perturbed edge changes too; mass rows change
    # by exactly +-delta at the edge's endpoints
    assert mass1[tail] - mass0[tail] == pytest.approx(delta, rel=1e-12)
    assert mass1[head] - mass0[head] == pytest.approx(-delta, rel=1e-12)


def test_residual_matches_dense_oracle():
    g = series_pair()
    zetas = np.array([2.0, 3.0, 4.0])
    rng = np.random.default_rng(5)
    state = HydraulicState(
        edge_flows=rng.uniform(0.1, 2.0, 3),
        node_pressures=rng.uniform(0.0, 10.0, 4),
        edge_drops=rng.uniform(0.0, 5.0, 3),
    )
    bnd = FlowBoundary(plant_flow=1.0)
    r = hydraulic_residual(state, g, zetas, bnd)
    lam = g.incidence
    inj = np.zeros(4)
    inj[g.node_index["a"]] = 1.0
    inj[g.node_index["d"]] = -1.0
    expect = np.concatenate([
        state.edge_drops - zetas * state.edge_flows**2,
        lam @ state.edge_flows - inj,
        lam.T @ state.node_pressures - state.edge_drops,
    ])
    assert np.allclose(r, expect, atol=1e-14)


def test_series_parallel_oracle_equivalence():
    # randomized SP networks against the analytic reduction
    rng = np.random.default_rng(42)
    for trial in range(20):
        tree = random_sp(rng, max_edges=8)
        g, names = to_graph(tree)
        zetas = np.array([e.params.zeta for e in g.edges])
        flow = float(rng.uniform(0.2, 3.0))
        st_ = solve_flows(g, zetas, FlowBoundary(plant_flow=flow))
        flows, drops = {}, {}
        solve_exact(tree, flow, 0.0, flows, drops, iter(names))
        for nm in names:
            j = g.edge_index[nm]
            assert st_.edge_flows[j] == pytest.approx(flows[nm], rel=1e-6), nm
            assert st_.edge_drops[j] == pytest.approx(drops[nm], rel=1e-6, abs=1e-9), nm


def diverging_net(theta1, theta2):
    edges = [
        Edge("F", "ps", "n", EdgeKind.FEEDING, PipeParams(zeta=5.0, volume=0.1, hAs=1.0)),
        Edge("U1", "n", "r", EdgeKind.USER, UserParams(mu=5.74)),
        Edge("U2", "n", "r", EdgeKind.USER, UserParams(mu=5.74)),
        Edge("R", "r", "pr", EdgeKind.RETURN, PipeParams(zeta=5.0, volume=0.1, hAs=1.0)),
    ]
    g = NetworkGraph(edges, "ps", "pr")
    return g, edge_zetas(g, np.array([theta1, theta2]))


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=0.1, max_value=0.9), st.floats(min_value=0.1, max_value=0.9))
def test_diverging_split_equalizes_drops(t1, t2):
    g, zetas = diverging_net(t1, t2)
    st_ = solve_flows(g, zetas, FlowBoundary(plant_flow=1.5))
    # both branches reconverge at r: their drops must agree
    assert st_.edge_drops[1] == pytest.approx(st_.edge_drops[2], rel=1e-8, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=0.15, max_value=0.8), st.floats(min_value=0.02, max_value=0.18))
def test_valve_opening_increases_flow_at_fixed_pressures(t1, dt_):
    g, zetas = diverging_net(t1, 0.5)
    bnd = FlowBoundary(node_pressures={"ps": 50.0})
    base = solve_flows(g, zetas, bnd).edge_flows[1]
    g2, zetas2 = diverging_net(t1 + dt_, 0.5)
    more = solve_flows(g2, zetas2, bnd).edge_flows[1]
    assert more >= base - 1e-10


@settings(max_examples=15, deadline=None)
@given(st.floats(min_value=0.5, max_value=20.0))
def test_zeta_pressure_scaling_invariance(k):
    g, zetas = diverging_net(0.4, 0.6)
    bnd = FlowBoundary(node_pressures={"ps": 40.0})
    f1 = solve_flows(g, zetas, bnd).edge_flows
    bnd2 = FlowBoundary(node_pressures={"ps": 40.0 * k})
    f2 = solve_flows(g, zetas * k, bnd2).edge_flows
    assert np.allclose(f1, f2, rtol=1e-7, atol=1e-10)


def test_nonpositive_zeta_rejected(tiny_net):
    zetas = edge_zetas(tiny_net, np.array([0.5]))
    zetas[0] = 0.0
    with pytest.raises(HydraulicsError, match="resistance"):
        solve_flows(tiny_net, zetas, FlowBoundary(plant_flow=1.0))


def test_unbalanced_node_flows_rejected(tiny_net):
    zetas = edge_zetas(tiny_net, np.array([0.5]))
    with pytest.raises(HydraulicsError, match="balance"):
        solve_flows(tiny_net, zetas, FlowBoundary(node_flows={"n1": 1.0}))
