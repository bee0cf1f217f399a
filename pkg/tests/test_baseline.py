import json

import numpy as np
import pytest

from gnnopf.baseline import SolveConfig, batch_solve, read_results, solve_instance, write_results
from gnnopf.case_io import LoadDataset
from gnnopf.grid import generation_cost

# tests/oracles/two_bus_lattice.py: nested 50^4 lattice search over (Pg, v1, v2, δ2)
LATTICE_COST = 644.2794908413375

ONE = SolveConfig(restarts=1)


@pytest.fixture(scope="module")
def two_bus_solution(two_bus_model):
    return solve_instance(two_bus_model, two_bus_model.ref_demand, ONE)


@pytest.fixture(scope="module")
def case30_solution(case30_model):
    return solve_instance(case30_model, case30_model.ref_demand, ONE)


def test_two_bus_matches_lattice_oracle(two_bus_solution):
    r = two_bus_solution
    assert r.converged
    assert abs(r.report.generation_cost - LATTICE_COST) <= 0.01 * LATTICE_COST


def test_converged_result_invariants(two_bus_model, two_bus_solution):
    r = two_bus_solution
    assert r.report.max_residual <= ONE.residual_tolerance
    assert r.report.violation_rate == 0
    assert all(v == 0 for v in r.report.max_relative_error.values())
    assert r.state.shape == (2, 4)


def test_capacity_shortfall_not_converged(two_bus_model):
    r = solve_instance(two_bus_model, 6 * two_bus_model.ref_demand, ONE)
    assert not r.converged
    assert r.report.max_residual > ONE.residual_tolerance


def test_case30_reference_converges(case30_model, case30_solution):
    r = case30_solution
    assert r.converged
    assert r.report.max_residual <= 1e-4 and r.report.violation_rate == 0
    s_g = r.state[:, :2] + case30_model.ref_demand
    assert generation_cost(case30_model, s_g) == r.report.generation_cost


def test_gauge_invariance(two_bus_model, two_bus_solution):
    shifted = solve_instance(two_bus_model, two_bus_model.ref_demand, ONE, initial_angles=np.full(2, 0.4))
    assert shifted.converged
    assert abs(shifted.report.generation_cost - two_bus_solution.report.generation_cost) <= 1e-6


def test_best_restart_has_min_loss(two_bus_model):
    cfg = SolveConfig(restarts=3, max_iters=40)
    best = solve_instance(two_bus_model, two_bus_model.ref_demand, cfg)
    singles = [solve_instance(two_bus_model, two_bus_model.ref_demand,
                              SolveConfig(restarts=k + 1, max_iters=40)) for k in range(3)]
    assert best.loss == singles[-1].loss
    if not best.converged:
        assert best.loss <= min(s.loss for s in singles)


def test_demand_shape_error(two_bus_model):
    with pytest.raises(ValueError):
        solve_instance(two_bus_model, np.zeros((3, 2)))


def test_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(residual_tolerance=0)
    with pytest.raises(ValueError):
        SolveConfig(optimizer="lbfgs")


def _dataset(model, samples):
    return LoadDataset(case_name="two_bus", seed=0, samples=list(samples), low=1.0, high=1.0,
                       n_buses=model.n_buses)


def test_batch_copies_identical(two_bus_model, tmp_path):
    cfg = SolveConfig(restarts=1, max_iters=60)
    ds = _dataset(two_bus_model, [two_bus_model.ref_demand] * 3)
    batch = batch_solve(two_bus_model, ds, cfg)
    states = [r.state.tobytes() for r in batch["results"]]
    assert len(set(states)) == 1
    assert 0 <= batch["convergence_fraction"] <= 1
    write_results(tmp_path, batch, cfg)
    doc = read_results(tmp_path)
    assert [e["sample_id"] for e in doc["results"]] == [0, 1, 2]
    assert doc["discarded"] == batch["discarded"]
    back = np.loadtxt(tmp_path / "states" / "000001.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back, batch["results"][1].state)
    json.dumps(doc)


def test_batch_workers_match_serial(two_bus_model):
    cfg = SolveConfig(restarts=1, max_iters=30)
    ds = _dataset(two_bus_model, [two_bus_model.ref_demand, 0.9 * two_bus_model.ref_demand])
    a = batch_solve(two_bus_model, ds, cfg)
    b = batch_solve(two_bus_model, ds, cfg, workers=2)
    assert all(np.array_equal(x.state, y.state) for x, y in zip(a["results"], b["results"]))


def test_empty_batch(two_bus_model):
    batch = batch_solve(two_bus_model, _dataset(two_bus_model, []))
    assert batch["results"] == [] and batch["discarded"] == []
