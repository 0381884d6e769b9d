"""Compare the compiled kernel core against the numpy fallback.

Times the three hot paths (constraint/Jacobian fill, Lagrangian Hessian
fill, interior-point QP iteration) on a representative local subproblem
and on a full-network problem, then a short closed-loop segment end to
end. Run:

    python benchmarks/bench_kernels.py
"""

import os
import sys
import time

import numpy as np


def bench(fn, reps):
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def kernel_benchmarks():
    from heatnet.harness import load_scenario, scenario_path
    from heatnet.kernels import _pure
    from heatnet.ocp import transcribe
    from heatnet.thermal import ThermalState
    from heatnet.net import EdgeKind

    try:
        from heatnet.kernels import _core
    except ImportError:
        print("compiled core not available; build it with `pip install -e .`")
        return

    cfg = load_scenario(scenario_path("six_sub_18ish"))
    model = cfg.plant_model()
    g = cfg.graph
    state = ThermalState(
        T=np.array([cfg.T0 if g.edges[j].kind is not EdgeKind.RETURN else 60.0
                    for j in g.nonuser_edges]),
        soe=np.zeros(len(g.user_edges)))

    rows = []
    for label, partition in [("local (partition 6)", cfg.partitions[-1]),
                             ("full network", None)]:
        prob = transcribe(model, cfg.horizon, cfg.cost, partition=partition,
                          pin_plant_root=partition is not None)
        if partition is not None:
            from heatnet.ocp import Coupling, Forecasts
            gidx = g.node_index
            cpl = Coupling(
                pressure_pins={v: np.full(cfg.horizon.N, 500.0)
                               for v in prob.cs.pin_nodes_g if v != prob.cs.gauge_g},
                fixed_node_flows={},
                boundary_temps={v: np.full(cfg.horizon.N, 75.0)
                                for v in prob.cs.root_nodes_g
                                if v != prob.cs.plant_root_g},
            )
        else:
            from heatnet.ocp import Coupling, Forecasts
            cpl = Coupling()
        from heatnet.ocp import Forecasts
        fc_full = cfg.forecasts(0)
        user_slot = {j: u for u, j in enumerate(g.user_edges)}
        fc = Forecasts(qout=fc_full.qout[:, [user_slot[j] for j in prob.cs.users_g]],
                       tamb=fc_full.tamb)
        prob.set_params(state, fc, cpl)
        cs = prob.cs
        rng = np.random.default_rng(0)
        x = np.abs(rng.normal(1.0, 0.3, cs.n))
        c = np.empty(cs.m)
        J = np.empty((cs.m, cs.n))
        H = np.empty((cs.n, cs.n))
        w = rng.normal(size=cs.m)

        t_pure = bench(lambda: _pure.fill_constraints(cs, prob.params, x, c, J), 50)
        t_core = bench(lambda: _core.fill_constraints(cs, prob.params, x, c, J), 200)
        rows.append((f"fill_constraints [{label}] n={cs.n}", t_pure, t_core))
        t_pure = bench(lambda: _pure.fill_lagrangian_hessian(cs, prob.params, x, w, H), 20)
        t_core = bench(lambda: _core.fill_lagrangian_hessian(cs, prob.params, x, w, H), 200)
        rows.append((f"fill_hessian     [{label}] n={cs.n}", t_pure, t_core))

    # QP core on a mid-size reduced problem
    rng = np.random.default_rng(1)
    nf, m = 140, 110
    A = rng.normal(size=(nf, nf))
    Bf = np.ascontiguousarray(A @ A.T / nf + np.eye(nf))
    gf = rng.normal(size=nf)
    Jf = np.ascontiguousarray(rng.normal(size=(m, nf)))
    cf = rng.normal(size=m) * 0.1
    lbs, ubs = np.full(nf, -2.0), np.full(nf, 2.0)
    hlb = np.ones(nf, bool)
    hub = np.ones(nf, bool)

    def run(impl):
        start = [np.full(nf, 0.1), np.maximum(1, np.abs(cf)),
                 np.maximum(1, np.abs(cf)), np.zeros(m), np.ones(nf), np.ones(nf)]
        return impl.ip_qp_core(Bf, gf, Jf, cf, lbs, ubs, hlb, hub, *start,
                               100.0, 1e-10, 60, 1e-10)

    t_pure = bench(lambda: run(_pure), 10)
    t_core = bench(lambda: run(_core), 30)
    rows.append((f"ip_qp_core       [nf={nf}, m={m}]", t_pure, t_core))

    print(f"{'kernel':46s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s}")
    for name, tp, tc in rows:
        print(f"{name:46s} {tp*1e3:9.2f}ms {tc*1e3:9.2f}ms {tp/tc:7.1f}x")


def closed_loop_benchmark():
    from heatnet.harness import load_scenario, run_closed_loop, scenario_path

    results = {}
    for backend, env in [("cython", None), ("numpy", "1")]:
        if env is None:
            os.environ.pop("HEATNET_PURE_KERNELS", None)
        else:
            os.environ["HEATNET_PURE_KERNELS"] = env
        # kernels select the backend at import; respawn for a clean switch
        import subprocess
        code = (
            "from heatnet.harness import load_scenario, run_closed_loop, scenario_path\n"
            "import heatnet.kernels as k, time\n"
            "cfg = load_scenario(scenario_path('six_sub_18ish'))\n"
            "cfg.sim_steps = 4\n"
            "t0 = time.perf_counter()\n"
            "run_closed_loop(cfg, 'distributed')\n"
            "print(k.BACKEND, time.perf_counter() - t0)\n"
        )
        out = subprocess.run([sys.executable, "-c", code], capture_output=True,
                             text=True, env=os.environ.copy())
        if out.returncode == 0:
            name, secs = out.stdout.split()[-2:]
            results[name] = float(secs)
        else:
            print(out.stderr)
    os.environ.pop("HEATNET_PURE_KERNELS", None)
    if len(results) == 2:
        print(f"\nclosed loop, 4 distributed steps of the 6-partition case:")
        for name, secs in results.items():
            print(f"  {name:8s} {secs:6.1f} s")
        print(f"  end-to-end speedup {results['python'] / results['cython']:.2f}x"
              if "python" in results and "cython" in results else "")


if __name__ == "__main__":
    kernel_benchmarks()
    closed_loop_benchmark()
