import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatnet.net import Edge, EdgeKind, FluidProps, NetworkGraph, PipeParams, UserParams
from heatnet.thermal import (
    BoundaryTemps,
    BuildingModel,
    ThermalState,
    mixed_node_temperature,
    step_soe,
    step_temperatures,
    user_heat,
)


@pytest.fixture
def building():
    return BuildingModel(C=2e8, dTb=2.0, qout_profile=np.full(10, 1e5), t_set_return=40.0)


def test_user_heat_zero_flow(building):
    assert user_heat(0.0, 80.0, building, FluidProps()) == 0.0


def test_user_heat_direct_value(building):
    # 0.5 kg/s * 4186 J/(kg K) * (80 - 40) K
    q = user_heat(0.5, 80.0, building, FluidProps(cp=4186.0))
    assert q == pytest.approx(83720.0, rel=1e-12)


def test_user_heat_at_setpoint(building):
    assert user_heat(1.7, 40.0, building, FluidProps()) == pytest.approx(0.0, abs=1e-9)


def test_step_soe_balanced(building):
    assert step_soe(3.0e6, 5e4, 5e4, 600.0) == pytest.approx(3.0e6)


def test_step_soe_surplus_arithmetic():
    assert step_soe(0.0, 2000.0, 1000.0, 600.0) == pytest.approx(6.0e5)


def test_step_soe_envelope_crossing_detectable(building):
    # a constant deficit walks the state below the envelope; the caller
    # (closed loop) is responsible for flagging it
    soe = 0.0
    for _ in range(12):
        soe = float(step_soe(soe, 0.0, building.qout_profile[0], 600.0))
    assert soe < -building.envelope


def test_step_soe_requires_positive_dt():
    with pytest.raises(ValueError):
        step_soe(0.0, 1.0, 1.0, 0.0)


def test_building_rejects_negative_demand():
    with pytest.raises(ValueError, match="demand"):
        BuildingModel(C=1e7, dTb=1.0, qout_profile=np.array([1e4, -5.0]))


def single_pipe_net(volume=0.005, hAs=2.0):
    edges = [
        Edge("f", "ps", "n", EdgeKind.FEEDING, PipeParams(zeta=1.0, volume=volume, hAs=hAs)),
        Edge("u", "n", "r", EdgeKind.USER, UserParams(mu=5.74)),
        Edge("b", "r", "pr", EdgeKind.RETURN, PipeParams(zeta=1.0, volume=volume, hAs=hAs)),
    ]
    return NetworkGraph(edges, "ps", "pr")


def test_step_zero_flow_decays_to_ambient(tiny_net):
    state = ThermalState(T=np.array([70.0, 60.0, 50.0]), soe=np.zeros(1))
    for _ in range(4000):
        state = step_temperatures(state, np.zeros(4), tiny_net, FluidProps(),
                                  80.0, 40.0, 9.0, 600.0)
    assert np.allclose(state.T, 9.0, atol=1e-3)


def test_step_lossless_chain_reaches_supply():
    g = single_pipe_net(volume=0.4, hAs=0.0)
    state = ThermalState(T=np.array([20.0, 20.0]), soe=np.zeros(1))
    flows = np.full(3, 1.0)
    for _ in range(500):
        state = step_temperatures(state, flows, g, FluidProps(), 80.0, 40.0, 10.0, 600.0)
    assert state.T[0] == pytest.approx(80.0, abs=1e-6)
    assert state.T[1] == pytest.approx(40.0, abs=1e-6)  # fed by the user branch


def test_steady_state_analytic_value():
    # dT/dt = c1*m*Tin + c2*Tamb - (c1*m + c2)*T with c1=0.1, c2=0.01:
    # T_inf = (0.1*80 + 0.01*10) / 0.11; c1 = 1/(rho V) with rho=10, V=1,
    # c2 = hAs/(rho cp V) with cp=1, hAs=0.1
    edges = [
        Edge("f", "ps", "n", EdgeKind.FEEDING, PipeParams(zeta=1.0, volume=1.0, hAs=0.1)),
        Edge("u", "n", "r", EdgeKind.USER, UserParams(mu=5.74)),
        Edge("b", "r", "pr", EdgeKind.RETURN, PipeParams(zeta=1.0, volume=1.0, hAs=0.0)),
    ]
    g = NetworkGraph(edges, "ps", "pr")
    fluid = FluidProps(rho=10.0, cp=1.0)
    state = ThermalState(T=np.array([50.0, 50.0]), soe=np.zeros(1))
    flows = np.full(3, 1.0)
    for _ in range(20000):
        state = step_temperatures(state, flows, g, fluid, 80.0, 40.0, 10.0, 10.0)
    assert state.T[0] == pytest.approx((0.1 * 80 + 0.01 * 10) / 0.11, rel=1e-6)


def test_implicit_euler_matches_exponential_stiff():
    # single pipe at lambda*dt >> 1: one implicit step lands within 1% of
    # the exact exponential's step change at dt = 600 s
    g = single_pipe_net(volume=0.005, hAs=2.0)
    fluid = FluidProps()
    m = 1.0
    c1 = 1.0 / (fluid.rho * 0.005)
    c2 = 2.0 / (fluid.rho * fluid.cp * 0.005)
    lam = c1 * m + c2
    T_in, Tamb, T0v = 80.0, 10.0, 30.0
    T_inf = (c1 * m * T_in + c2 * Tamb) / lam
    dt = 600.0
    state = ThermalState(T=np.array([T0v, 50.0]), soe=np.zeros(1))
    out = step_temperatures(state, np.full(3, m), g, fluid, T_in, 40.0, Tamb, dt)
    exact = T_inf + (T0v - T_inf) * np.exp(-lam * dt)
    step_change = abs(exact - T0v)
    assert abs(out.T[0] - exact) <= 0.01 * step_change


def test_implicit_euler_second_order_refinement():
    # halving dt must shrink the one-step-per-dt global error ~quadratically
    g = single_pipe_net(volume=0.5, hAs=20.0)
    fluid = FluidProps()
    m = 1.0
    c1 = 1.0 / (fluid.rho * 0.5)
    c2 = 20.0 / (fluid.rho * fluid.cp * 0.5)
    lam = c1 * m + c2
    T_inf = (c1 * m * 80.0 + c2 * 10.0) / lam
    horizon = 600.0

    def integrate(steps):
        state = ThermalState(T=np.array([30.0, 50.0]), soe=np.zeros(1))
        for _ in range(steps):
            state = step_temperatures(state, np.full(3, m), g, fluid, 80.0,
                                      40.0, 10.0, horizon / steps)
        return state.T[0]

    exact = T_inf + (30.0 - T_inf) * np.exp(-lam * horizon)
    e1 = abs(integrate(1) - exact)
    e2 = abs(integrate(2) - exact)
    e4 = abs(integrate(4) - exact)
    assert e2 < e1 and e4 < e2
    # asymptotically first-order per step, halving at least ~1.8x per level
    assert e4 <= e1 / 3.0


@settings(max_examples=15, deadline=None)
@given(st.floats(min_value=0.0, max_value=2.0), st.integers(min_value=1, max_value=40))
def test_comparison_principle(flow, steps):
    g = single_pipe_net(volume=0.2, hAs=8.0)
    state = ThermalState(T=np.array([55.0, 47.0]), soe=np.zeros(1))
    lo, hi = min(10.0, 40.0), 80.0
    for _ in range(steps):
        state = step_temperatures(state, np.full(3, flow), g, FluidProps(),
                                  80.0, 40.0, 10.0, 600.0)
        assert np.all(state.T >= lo - 1e-9)
        assert np.all(state.T <= hi + 1e-9)


def test_energy_audit_single_step(tiny_net):
    # plant enthalpy in = user heat + pipe losses + pipe storage change
    fluid = FluidProps()
    from heatnet.hydraulics import FlowBoundary, edge_zetas, solve_flows

    zetas = edge_zetas(tiny_net, np.array([0.5]))
    hyd = solve_flows(tiny_net, zetas, FlowBoundary(plant_flow=0.9))
    flows = hyd.edge_flows
    state = ThermalState(T=np.array([74.0, 70.0, 52.0]), soe=np.zeros(1))
    dt = 600.0
    T0v, tset, tamb = 80.0, 40.0, 10.0
    nxt = step_temperatures(state, flows, tiny_net, fluid, T0v, tset, tamb, dt)

    vols = np.array([e.params.volume for e in tiny_net.edges if not e.kind.is_user])
    hAs = np.array([e.params.hAs for e in tiny_net.edges if not e.kind.is_user])
    storage = float(np.sum(fluid.rho * vols * fluid.cp * (nxt.T - state.T)))
    losses = float(np.sum(hAs * (nxt.T - tamb))) * dt
    t_user_in = mixed_node_temperature(tiny_net, tiny_net.node_index["n1"], flows,
                                       nxt.T, T0v, tset, tamb)
    q_user = user_heat(flows[1], t_user_in, BuildingModel(C=1e8, dTb=2.0,
                       qout_profile=np.zeros(2), t_set_return=tset), fluid) * dt
    t_ret = mixed_node_temperature(tiny_net, tiny_net.node_index["pr"], flows,
                                   nxt.T, T0v, tset, tamb)
    plant_in = flows[0] * fluid.cp * (T0v - t_ret) * dt
    assert plant_in == pytest.approx(storage + losses + q_user,
                                     rel=1e-6, abs=1e-3)
