"""Smoke test for the glovebox extension module.

Build and install first:  maturin develop -m crates/py/Cargo.toml
Run with pytest or directly:  python python/smoke_test.py
"""

import math
import os
import tempfile

import glovebox


def test_default_run():
    sc = glovebox.Scenario.default()
    assert sc.weights == (1e3, 1e2, 1e6)
    assert len(sc.waypoints()) == 9
    sim = sc.run()
    assert sim.converged and sim.failure is None
    assert len(sim) == 9
    for r in sim.records:
        assert math.hypot(r.wp[0] - r.obj[0], r.wp[1] - r.obj[1]) <= sc.object_radius + 1e-6
        assert math.hypot(*r.zmp) <= sc.safe_radius + 1e-6
    assert max(max(r.gamma) for r in sim.records) > 1.0
    assert len(sim.torques()[0]) == 8
    text = sim.csv()
    assert text.splitlines()[0] == glovebox.CSV_HEADER
    assert text == sc.run().csv()


def test_outputs():
    sim = glovebox.Scenario.from_toml("[task]\nwaypoints = 2\nlength = 0.05\n").run()
    assert sim.converged
    with tempfile.TemporaryDirectory() as d:
        sim.write_csv(os.path.join(d, "out", "trace.csv"))
        sim.write_plots(os.path.join(d, "plots"))
        assert sorted(os.listdir(os.path.join(d, "plots"))) == ["forces.svg", "path.svg", "zmp.svg"]
        with open(os.path.join(d, "out", "trace.csv")) as f:
            assert len(f.read().splitlines()) == 3


def test_scenario_errors():
    try:
        glovebox.Scenario.from_toml("[balance]\nsafe_radius = -1.0\n")
    except ValueError as e:
        assert "balance.safe_radius must be > 0" in str(e)
    else:
        raise AssertionError("expected ValueError")
    sc = glovebox.Scenario.from_toml("[task]\nwaypoints = 5\n")
    ys = [w[1] for w in sc.waypoints()]
    assert all(abs(b - a - 0.1) < 1e-12 for a, b in zip(ys, ys[1:]))
    again = glovebox.Scenario.from_toml(sc.to_toml())
    assert again.to_toml() == sc.to_toml()


def test_helpers():
    pts = glovebox.forward_kinematics((0.0, 0.0), [0.3, 0.3, 0.25, 0.15], [0.0, 0.0, 0.0, 0.0])
    assert abs(pts[-1][0] - 1.0) < 1e-12
    jac = glovebox.point_jacobian((0.0, 0.0), [0.3, 0.3, 0.25, 0.15], [0.0] * 4, 3, 1.0)
    assert abs(jac[1][0] - 1.0) < 1e-12
    gap, _, _, _ = glovebox.signed_gap((0.5, 0.1), (0.0, 0.0), (1.0, 0.0), 0.04)
    assert abs(gap - 0.06) < 1e-12
    poly = [(-0.2, -0.15), (0.2, -0.15), (0.2, 0.15), (-0.2, 0.15)]
    zmp, in_circle, in_sp = glovebox.compute_zmp(50.0, (0.05, -0.02, 0.8), [], poly, 0.15)
    assert abs(zmp[0] - 0.05) < 1e-12 and abs(zmp[1] + 0.02) < 1e-12
    assert in_circle and in_sp
    assert glovebox.pseudo_inverse([[2.0, 0.0], [0.0, 0.0]]) == [[0.5, 0.0], [0.0, 0.0]]
    ns = glovebox.nullspace_projector([[0.0] * 8] * 2)
    assert all(ns[i][j] == (1.0 if i == j else 0.0) for i in range(8) for j in range(8))


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"{name}: ok")
