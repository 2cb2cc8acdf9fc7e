import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoparam import flowsim
from geoparam.flowsim import FlowScenario, TransportState, Well


def random_binary_perm(rng, n=32, logk1=1.0):
    return np.exp(logk1 * (rng.random((n, n)) < 0.3))


# ---------------------------------------------------------------- assembly

def test_interior_stencil_homogeneous():
    sys_ = flowsim.assemble_pressure(np.ones((6, 6)), flowsim.uniform_flow())
    A = sys_.matrix.toarray()
    row = 2 * 6 + 3
    # on the unit square with square cells the transmissibility is a * dy/dx = 1
    assert A[row, row] == pytest.approx(4.0)
    nbrs = [row - 1, row + 1, row - 6, row + 6]
    np.testing.assert_allclose(A[row, nbrs], -1.0)
    assert np.count_nonzero(A[row]) == 5


def test_harmonic_face_weight():
    assert flowsim.harmonic_mean(1.0, 3.0) == pytest.approx(1.5)


def test_matrix_symmetric():
    rng = np.random.default_rng(0)
    A = flowsim.assemble_pressure(random_binary_perm(rng, 12, 5.0), flowsim.quarter_five()).matrix
    assert abs(A - A.T).max() == 0


def test_rejects_nonpositive_permeability():
    with pytest.raises(ValueError):
        flowsim.assemble_pressure(np.zeros((4, 4)), flowsim.uniform_flow())


def test_unbalanced_wells_rejected():
    sc = FlowScenario(kind=flowsim.WELLS, wells=[Well(0, 0, 1.0), Well(3, 3, -0.5)])
    with pytest.raises(ValueError, match="balanced"):
        sc.sources(4, 4)


# ---------------------------------------------------------------- pressure

def test_uniform_flow_linear_pressure():
    n = 64
    flow = flowsim.solve_flow(np.ones((n, n)), flowsim.uniform_flow())
    np.testing.assert_allclose(flow.fx, 1.0 / n, atol=1e-8)
    np.testing.assert_allclose(flow.fy, 0.0, atol=1e-8)
    x = (np.arange(n) + 0.5) / n
    expected = flow.pressure[:, :1] - (x - x[0])[None, :]
    assert np.abs(flow.pressure - expected).max() < 1e-8


def test_quarter_five_diagonal_symmetry():
    flow = flowsim.solve_flow(np.ones((32, 32)), flowsim.quarter_five())
    assert np.abs(flow.pressure - flow.pressure.T).max() < 1e-8


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from([flowsim.UNIFORM, flowsim.QUARTER_FIVE]))
def test_random_field_mass_balance(seed, kind):
    perm = random_binary_perm(np.random.default_rng(seed), 24, 5.0)
    flow = flowsim.solve_flow(perm, FlowScenario(kind=kind))
    assert np.abs(flow.mass_balance()).max() < 1e-8


def test_velocity_invariant_under_permeability_scaling():
    rng = np.random.default_rng(1)
    perm = random_binary_perm(rng, 24)
    for sc in (flowsim.uniform_flow(), flowsim.quarter_five()):
        f1 = flowsim.solve_flow(perm, sc)
        f2 = flowsim.solve_flow(7.5 * perm, sc)
        np.testing.assert_allclose(f2.fx, f1.fx, atol=1e-9)
        np.testing.assert_allclose(f2.pressure * 7.5, f1.pressure, atol=1e-8)


def test_zero_source_gives_zero_pressure():
    flow = flowsim.solve_flow(np.ones((8, 8)), flowsim.uniform_flow(rate=0.0))
    assert not flow.pressure.any()


def test_cg_iteration_cap_raises():
    rng = np.random.default_rng(2)
    system = flowsim.assemble_pressure(random_binary_perm(rng, 32, 5.0), flowsim.quarter_five())
    with pytest.raises(flowsim.ConvergenceError):
        flowsim.solve_pressure(system, max_iter=2)


# ---------------------------------------------------------------- transport

def test_no_flow_leaves_saturation():
    sc = flowsim.uniform_flow(rate=0.0)
    flow = flowsim.solve_flow(np.ones((8, 8)), sc)
    s0 = np.random.default_rng(3).random((8, 8))
    out = flowsim.advance_saturation(TransportState(s0.copy()), flow, sc, 0.3)
    np.testing.assert_array_equal(out.s, s0)


def test_one_pore_volume_displaces():
    sc = flowsim.uniform_flow(t_end=0.2, snapshots=(0.2,))
    rec = flowsim.simulate(np.ones((64, 64)), sc)
    assert rec.snapshots[0.2].mean() >= 0.95


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from([flowsim.UNIFORM, flowsim.QUARTER_FIVE]))
def test_global_water_balance_and_bounds(seed, kind):
    perm = random_binary_perm(np.random.default_rng(seed), 16, 5.0)
    rec = flowsim.simulate(perm, FlowScenario(kind=kind, t_end=0.3, n_report=30))
    np.testing.assert_allclose(rec.water_stored, rec.water_in - rec.water_out, atol=1e-8)
    assert rec.watercut.min() >= 0.0
    assert rec.watercut.max() <= 1.0 + 1e-8


def test_saturation_bounded_many_fields():
    rng = np.random.default_rng(4)
    for _ in range(50):
        perm = np.exp(rng.uniform(0, 5) * (rng.random((12, 12)) < rng.uniform(0.1, 0.6)))
        sc = FlowScenario(kind=rng.choice([flowsim.UNIFORM, flowsim.QUARTER_FIVE]), t_end=0.2,
                          snapshots=(0.2,), n_report=5)
        s = flowsim.simulate(perm, sc).snapshots[0.2]
        assert s.min() >= -1e-10 and s.max() <= 1 + 1e-8


def test_breakthrough_converges_with_refinement():
    times = []
    for n in (8, 16, 32, 64):
        rec = flowsim.simulate(np.ones((n, n)), flowsim.uniform_flow(t_end=0.3, n_report=300))
        times.append(flowsim.breakthrough_time(rec)[0])
    assert all(b > a for a, b in zip(times, times[1:]))
    assert all(t < 1.0 for t in times)


# ---------------------------------------------------------------- driver

def test_simulate_defaults():
    sc = FlowScenario()
    assert (sc.porosity, sc.t_end, sc.snapshots) == (0.2, 0.4, (0.1,))


def test_zero_rate_record():
    rec = flowsim.simulate(np.ones((8, 8)), flowsim.uniform_flow(rate=0.0, n_report=10))
    assert not rec.watercut.any()


def test_simulate_deterministic():
    perm = random_binary_perm(np.random.default_rng(5), 16)
    a = flowsim.simulate(perm, flowsim.quarter_five(n_report=20))
    b = flowsim.simulate(perm, flowsim.quarter_five(n_report=20))
    assert np.array_equal(a.watercut, b.watercut)
    assert np.array_equal(a.snapshots[0.1], b.snapshots[0.1])


def test_pvi_examples():
    sc = flowsim.uniform_flow()
    assert flowsim.pvi(0.1, sc) == pytest.approx(0.5, abs=0)
    assert flowsim.pvi(0.0, sc) == 0.0
    assert flowsim.pvi(0.4, sc) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        flowsim.pvi(0.1, flowsim.uniform_flow(rate=0.0))


def test_crossing_examples():
    assert flowsim.crossing_time([0, 1, 2], [0, 0, 0.02]) == pytest.approx(1.5)
    assert flowsim.crossing_time([0, 1, 2], [0, 0, 0]) is None


def test_five_producer_layout():
    sc = flowsim.five_producer_wells(32, 32)
    assert sc.injection_rate() == pytest.approx(1.0)
    assert [w.rate for w in sc.wells].count(-0.2) == 5
    assert len(sc.producers(32, 32)) == 5
    rec = flowsim.simulate(np.ones((32, 32)), flowsim.five_producer_wells(32, 32, t_end=0.1, n_report=20))
    assert rec.watercut.shape == (21, 5)


def test_scenario_text_roundtrip(tmp_path):
    sc = flowsim.five_producer_wells(16, 16, t_end=0.25)
    (tmp_path / "s.txt").write_text(sc.dumps())
    back = FlowScenario.load(tmp_path / "s.txt")
    assert back.kind == sc.kind and back.t_end == 0.25
    assert [(w.i, w.j, w.rate) for w in back.wells] == [(w.i, w.j, w.rate) for w in sc.wells]


def test_record_csv(tmp_path):
    rec = flowsim.simulate(np.ones((8, 8)), flowsim.quarter_five(n_report=4))
    rec.to_csv(tmp_path / "r.csv")
    table = np.loadtxt(tmp_path / "r.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(table[:, 0], rec.times)
