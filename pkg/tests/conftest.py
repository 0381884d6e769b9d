import numpy as np
import pytest

from heatnet.net import Edge, EdgeKind, FluidProps, NetworkGraph, PipeParams, UserParams
from heatnet.thermal import BuildingModel, ThermalState
from heatnet.ocp import CostSpec, Forecasts, Horizon, PlantModel


@pytest.fixture
def tiny_net():
    """Plant, one user, one bypass: the smallest closed loop."""
    edges = [
        Edge("F1", "ps", "n1", EdgeKind.FEEDING, PipeParams(zeta=300.0, volume=0.4, hAs=15.0)),
        Edge("U1", "n1", "r1", EdgeKind.USER, UserParams(mu=5.74, theta_min=0.01)),
        Edge("By", "n1", "r1", EdgeKind.BYPASS, PipeParams(zeta=30000.0, volume=0.05, hAs=4.0)),
        Edge("R1", "r1", "pr", EdgeKind.RETURN, PipeParams(zeta=300.0, volume=0.4, hAs=15.0)),
    ]
    return NetworkGraph(edges, "ps", "pr")


@pytest.fixture
def tiny_model(tiny_net):
    b = BuildingModel(C=5e7, dTb=2.0, qout_profile=np.full(30, 120e3), t_set_return=40.0)
    return PlantModel(graph=tiny_net, fluid=FluidProps(), buildings={"U1": b},
                      T0=80.0, p_plant_min=100.0)


@pytest.fixture
def tiny_state():
    return ThermalState(T=np.array([75.0, 70.0, 50.0]), soe=np.zeros(1))


@pytest.fixture
def tiny_forecasts():
    return Forecasts(qout=np.full((6, 1), 120e3), tamb=np.full(6, 10.0))


@pytest.fixture
def horizon6():
    return Horizon(N=6, dt=600.0)


@pytest.fixture
def case_cost():
    return CostSpec(loss_weight=1.0, flex_weight=400.0)
