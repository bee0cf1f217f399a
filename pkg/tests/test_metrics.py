import cmath

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnnopf.gnn import GnnConfig, gnn_forward, zero_params
from gnnopf.metrics import (ConstraintMargin, MetricsError, absolute_error, batch_feasibility,
                            feasibility_report, inequality_margins, normalizers, relative_errors,
                            violation_rate, write_error_csv)


def test_absolute_error_examples():
    assert absolute_error(5.0, 0.0, 4.0) == 1.0
    assert absolute_error(-1.0, 0.0, 4.0) == 1.0
    assert absolute_error(2.0, 0.0, 4.0) == 0.0
    assert absolute_error(7.0, upper=4.0) == 3.0
    assert absolute_error(7.0, lower=4.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(a=st.floats(-1e3, 1e3), b=st.floats(-1e3, 1e3), lo=st.floats(-10, 0), w=st.floats(0, 10))
def test_absolute_error_lipschitz(a, b, lo, w):
    ea, eb = absolute_error(a, lo, lo + w), absolute_error(b, lo, lo + w)
    assert ea >= 0 and abs(ea - eb) <= abs(a - b) * (1 + 1e-12) + 1e-12


def test_relative_error_examples():
    m = [ConstraintMargin("voltage_mag", 0, 1.005, 0.9, 1.0)]
    assert relative_errors(m)[0] == pytest.approx(0.05, rel=1e-12)
    m = [ConstraintMargin("gen_p", 0, 0.51, 0.5, 0.5), ConstraintMargin("gen_p", 1, 0.1, 0.0, 0.2)]
    assert relative_errors(m) == pytest.approx([0.05, 0.0], rel=1e-12)
    m = [ConstraintMargin("gen_q", i, 0.0, -1.0, 1.0) for i in range(4)]
    assert relative_errors(m) == [0.0] * 4


def test_normalizer_fallback_and_error():
    np.testing.assert_allclose(normalizers([0, 1, 2], [0.2, 1, 2.4]), [0.2, 0.3, 0.4], rtol=1e-15)
    with pytest.raises(MetricsError):
        normalizers([1.0], [1.0])


def test_margin_validation():
    with pytest.raises(MetricsError):
        ConstraintMargin("gen_p", 0, 1.0, None, None)
    with pytest.raises(MetricsError):
        ConstraintMargin("gen_p", 0, 1.0, 2.0, 1.0)


def test_violation_rate_examples():
    assert violation_rate([0.0] * 5) == 0.0
    assert violation_rate([0.0] * 9 + [1e-3]) == 0.1
    with pytest.raises(MetricsError):
        violation_rate([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=50), st.floats(0.01, 100))
def test_violation_rate_invariants(errs, scale):
    r = violation_rate(errs)
    assert 0 <= r <= 1
    assert (r == 0) == all(e == 0 for e in errs)
    assert violation_rate([e * scale for e in errs]) == r


def test_unrated_branch_emits_no_rate_margin(case30, case30_model):
    x = np.zeros((30, 4))
    x[:, 2] = 1.0
    kinds = {(m.kind, m.element_id) for m in inequality_margins(case30_model, x, case30_model.ref_demand)}
    unrated = np.flatnonzero(~case30_model.rate_mask)
    for j in unrated:
        assert ("rate_fwd", j) not in kinds
    assert sum(k == "rate_fwd" for k, _ in kinds) == case30_model.rate_mask.sum()


def test_overloaded_two_bus_rate(two_bus_model):
    x = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, -0.3]])
    y = 1 / complex(0.01, 0.1)
    vi, vj = 1.0, cmath.exp(-0.3j)
    s_fwd = (y + 0.01j).conjugate() * abs(vi) ** 2 - y.conjugate() * vi * vj.conjugate()
    margins = {m.kind: m for m in inequality_margins(two_bus_model, x, two_bus_model.ref_demand)}
    assert margins["rate_fwd"].value == pytest.approx(abs(s_fwd), rel=1e-14)
    assert margins["rate_fwd"].upper == 1.5
    report = feasibility_report(two_bus_model, x, two_bus_model.ref_demand)
    assert report.violation_counts["rate_fwd"] == 1
    assert report.max_relative_error["rate_fwd"] == pytest.approx((abs(s_fwd) - 1.5) / 1.5, rel=1e-13)


def test_zero_taps_golden_report(case30_model):
    m = case30_model
    x = gnn_forward(zero_params(GnnConfig()), m, m.ref_demand)
    before = x.copy()
    r = feasibility_report(m, x, m.ref_demand)
    assert np.array_equal(x, before)
    assert (r.n_instances, r.n_violations) == (124, 2)
    assert r.violation_rate == 2 / 124
    assert r.violation_counts == {"gen_p": 0, "gen_q": 0, "voltage_mag": 0, "rate_fwd": 1, "rate_rev": 1}
    assert r.max_relative_error["rate_fwd"] == pytest.approx(2.4938562148434213, rel=1e-12)
    assert r.max_relative_error["rate_rev"] == pytest.approx(2.5812026202145018, rel=1e-12)
    assert r.mean_relative_error["rate_rev"] == pytest.approx(0.06295616146864638, rel=1e-12)
    assert r.max_residual == pytest.approx(1.1739356881873884, rel=1e-12)
    assert r.generation_cost == pytest.approx(490.36962500000004, rel=1e-13)
    assert not r.equality_ok
    assert feasibility_report(m, x, m.ref_demand) == r


def test_feasible_state_all_zero(two_bus_model):
    x = np.array([[0.6, 0.2, 1.0, 0.0], [0.0, 0.0, 1.0, -0.05]])
    r = feasibility_report(two_bus_model, x, two_bus_model.ref_demand)
    assert r.violation_rate == 0
    assert all(v == 0 for v in r.max_relative_error.values())


def test_batch_matches_single(case30_model):
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 0.5, (4, 30, 2)), rng.uniform(0.9, 1.1, (4, 30, 1)),
                        rng.normal(0, 0.1, (4, 30, 1))], axis=-1)
    s_d = np.broadcast_to(case30_model.ref_demand, (4, 30, 2))
    reports, _, _ = batch_feasibility(case30_model, x, s_d)
    for b in range(4):
        assert reports[b] == feasibility_report(case30_model, x[b], s_d[b])


def test_error_csv(case30_model, tmp_path):
    x = gnn_forward(zero_params(GnnConfig()), case30_model, case30_model.ref_demand)
    _, groups, rels = batch_feasibility(case30_model, x, case30_model.ref_demand)
    path = tmp_path / "e.csv"
    write_error_csv(path, groups, rels, sample_ids=[7])
    lines = path.read_text().splitlines()
    assert lines[0] == "sample_id,kind,element_id,rel_error"
    assert len(lines) == 125 and all(line.startswith("7,") for line in lines[1:])
