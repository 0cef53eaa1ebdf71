import math

import pytest

from cavitylab import thresholds
from cavitylab.bethe import EstimateWithError
from cavitylab.errors import ParameterError
from cavitylab.models import make_model
from cavitylab.popdyn import InitKind
from cavitylab.thresholds import (BetheOptions, DecidedBy, Decision, GapResult, PopdynOptions,
                                  coloring_cond_asymptotic, coloring_first_moment_bound, decide,
                                  default_coloring_range, find_beta_cond, find_d_cond_coloring,
                                  find_d_inf, gap)

QUICK_POPDYN = PopdynOptions(N=500, max_sweeps=30, window=2)
QUICK_BETHE = BetheOptions(M=10_000)


def fake_gap(center, stderr=0.01):
    def _gap(model, d, popdyn_opts=None, bethe_opts=None, seed=0, threads=None):
        return GapResult(EstimateWithError(d - center, stderr, 20, bethe_opts.M),
                         InitKind.PLANTED, 0.0)
    return _gap


def fake_beta_gap(center, stderr=0.01):
    def _gap(model, d, popdyn_opts=None, bethe_opts=None, seed=0, threads=None):
        return GapResult(EstimateWithError(model.params["beta"] - center, stderr, 20, bethe_opts.M),
                         InitKind.PLANTED, 0.0)
    return _gap


def test_decide_bands():
    assert decide(0.31, 0.1) == Decision.POSITIVE
    assert decide(0.25, 0.1) == Decision.UNDECIDED
    assert decide(0.2, 0.1) == Decision.NON_POSITIVE
    assert decide(-1.0, 0.1) == Decision.NON_POSITIVE
    assert decide(1e-12, 0.0) == Decision.NON_POSITIVE
    assert decide(1e-6, 0.0) == Decision.POSITIVE


def test_gap_at_zero_degree_is_exact():
    model = make_model({"kind": "potts", "q": 3, "c": 0.5})
    result = gap(model, 0.0)

    assert result.estimate.mean == 0.0
    assert result.estimate.stderr == 0.0
    assert result.fixed_point_kind == InitKind.TRIVIAL
    assert result.rs_value == pytest.approx(math.log(3))


def test_gap_below_threshold_is_not_positive():
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    result = gap(model, 1.0, QUICK_POPDYN, QUICK_BETHE, seed=4)

    assert set(result.bethe) == {"trivial", "planted"}
    assert result.bethe["trivial"].mean == pytest.approx(result.rs_value, abs=1e-9)
    assert decide(result.estimate.mean, result.estimate.stderr) == Decision.NON_POSITIVE


def test_bisection_on_a_known_crossing(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_gap(2.5))
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    result = find_d_inf(model, 0.0, 5.0, scan_steps=6, bisect_iters=5, bethe_opts=QUICK_BETHE)

    assert result.decided_by == DecidedBy.SIGN_CHANGE
    assert result.ci_lo == pytest.approx(2.5)
    assert result.ci_hi == pytest.approx(2.53125)
    assert result.location == pytest.approx(2.515625)
    assert len(result.scan_trace) == 4 + 5
    assert [entry.decision for entry in result.scan_trace[:4]] == [
        "non_positive", "non_positive", "non_positive", "positive"]
    assert len(result.trace_rows()) == len(result.scan_trace)


def test_undecided_point_doubles_samples_then_stops(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_gap(2.45, stderr=0.02))
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    result = find_d_inf(model, 0.0, 5.0, scan_steps=6, bisect_iters=4, bethe_opts=QUICK_BETHE)

    # the midpoint 2.5 sits 2.5 stderr above zero both times
    last_two = result.scan_trace[-2:]
    assert [entry.M for entry in last_two] == [10_000, 20_000]
    assert all(entry.decision == "undecided" for entry in last_two)
    assert (result.ci_lo, result.ci_hi) == (2.0, 3.0)


def test_undecided_scan_point_is_requeried_and_skipped(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_gap(2.45, stderr=0.02))
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    result = find_d_inf(model, 0.0, 5.0, scan_steps=11, bisect_iters=0, bethe_opts=QUICK_BETHE)

    at_middle = [entry for entry in result.scan_trace if entry.param == 2.5]
    assert [entry.M for entry in at_middle] == [10_000, 20_000]
    assert all(entry.decision == "undecided" for entry in at_middle)
    assert result.decided_by == DecidedBy.SIGN_CHANGE
    assert (result.ci_lo, result.ci_hi) == (2.0, 3.0)


def test_undecided_lower_end_does_not_close_the_bracket(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_gap(-0.05, stderr=0.02))
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    result = find_d_inf(model, 0.0, 5.0, scan_steps=5, bisect_iters=4, bethe_opts=QUICK_BETHE)

    assert result.decided_by == DecidedBy.UNDECIDED
    assert (result.ci_lo, result.ci_hi) == (0.0, 1.25)
    assert result.location == pytest.approx(0.625)
    assert [entry.decision for entry in result.scan_trace] == ["undecided", "undecided", "positive"]
    assert result.to_dict()["decided_by"] == "undecided"


def test_range_exhausted(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_gap(10.0))
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    result = find_d_inf(model, 0.0, 5.0, scan_steps=4, bisect_iters=3, bethe_opts=QUICK_BETHE)

    assert result.decided_by == DecidedBy.RANGE_EXHAUSTED
    assert result.ci_lo == 5.0
    assert result.ci_hi == math.inf
    assert result.to_dict()["ci_hi"] is None
    assert len(result.scan_trace) == 4


def test_positive_lower_end_is_rejected(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_gap(1.0))
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    with pytest.raises(ParameterError):
        find_d_inf(model, 3.0, 5.0, bethe_opts=QUICK_BETHE)


def test_locate_validates_arguments():
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    with pytest.raises(ParameterError):
        find_d_inf(model, 2.0, 1.0)
    with pytest.raises(ParameterError):
        find_d_inf(model, 0.0, 1.0, scan_steps=3)
    with pytest.raises(ParameterError):
        find_d_inf(model, -1.0, 1.0)


def test_scan_seeds_depend_on_the_point_only(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_gap(10.0))
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    coarse = find_d_inf(model, 0.0, 3.0, scan_steps=4, bethe_opts=QUICK_BETHE, seed=1)
    fine = find_d_inf(model, 0.0, 3.0, scan_steps=7, bethe_opts=QUICK_BETHE, seed=1)

    seeds = {entry.param: entry.seed for entry in fine.scan_trace}
    for entry in coarse.scan_trace:
        assert seeds[entry.param] == entry.seed


def test_coloring_bounds():
    assert coloring_first_moment_bound(3) == pytest.approx(5 * math.log(3))
    assert coloring_cond_asymptotic(3) == pytest.approx(5 * math.log(3) - 2 * math.log(2))
    lo, hi = default_coloring_range(3)
    assert lo < 4.0 < hi


def test_coloring_details(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_gap(4.0))
    result = find_d_cond_coloring(3, 3.0, 5.0, scan_steps=5, bisect_iters=3,
                                  bethe_opts=QUICK_BETHE)

    assert result.target == "d_cond_coloring"
    assert result.details["first_moment_bound"] == pytest.approx(5 * math.log(3))
    assert 4.0 <= result.location <= 4.5


def test_beta_condensation_bisects_in_beta(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_beta_gap(1.1, stderr=0.001))
    result = find_beta_cond(2, 4.0, 0.5, 2.0, scan_steps=4, bisect_iters=4, bethe_opts=QUICK_BETHE)

    assert result.target == "beta_cond"
    assert result.decided_by == DecidedBy.SIGN_CHANGE
    assert result.ci_lo <= 1.1 <= result.ci_hi
    assert result.ci_hi - result.ci_lo == pytest.approx(0.5 / 16)


def test_beta_condensation_range_exhausted(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_beta_gap(5.0))
    result = find_beta_cond(2, 4.0, 0.5, 2.0, scan_steps=4, bethe_opts=QUICK_BETHE)

    assert result.decided_by == DecidedBy.RANGE_EXHAUSTED
    assert result.ci_lo == 2.0
    assert result.ci_hi == math.inf


def test_beta_condensation_rejects_positive_lower_end(monkeypatch):
    monkeypatch.setattr(thresholds, "gap", fake_beta_gap(0.2))
    with pytest.raises(ParameterError):
        find_beta_cond(2, 4.0, 0.5, 2.0, bethe_opts=QUICK_BETHE)


def test_beta_condensation_needs_positive_beta():
    with pytest.raises(ParameterError):
        find_beta_cond(2, 4.0, 0.0, 2.0)


def test_coloring_gap_is_positive_beyond_the_first_moment_bound():
    model = make_model({"kind": "coloring_closed_form", "q": 3})
    result = gap(model, 8.0, PopdynOptions(N=2_000, max_sweeps=60, window=5),
                 BetheOptions(M=10_000), seed=2)

    assert result.fixed_point_kind == InitKind.PLANTED
    assert decide(result.estimate.mean, result.estimate.stderr) == Decision.POSITIVE


@pytest.mark.slow
def test_sbm_two_groups_threshold():
    model = make_model({"kind": "sbm", "q": 2, "beta": math.log(3)})
    result = find_d_inf(model, 3.0, 5.0, scan_steps=9, bisect_iters=6,
                        popdyn_opts=PopdynOptions(N=100_000), bethe_opts=BetheOptions(M=100_000),
                        seed=0)
    assert 3.8 <= result.location <= 4.2


@pytest.mark.slow
def test_three_coloring_condensation():
    result = find_d_cond_coloring(3, 3.0, 5.0, scan_steps=9, bisect_iters=6,
                                  popdyn_opts=PopdynOptions(N=100_000),
                                  bethe_opts=BetheOptions(M=100_000), seed=0)
    assert 3.7 <= result.location <= 4.3


@pytest.mark.slow
def test_ten_coloring_condensation_near_asymptotic():
    result = find_d_cond_coloring(10, popdyn_opts=PopdynOptions(N=20_000),
                                  bethe_opts=BetheOptions(M=50_000), seed=0)
    assert abs(result.location - coloring_cond_asymptotic(10)) <= 2


@pytest.mark.slow
def test_two_group_condensation_in_beta():
    result = find_beta_cond(2, 4.0, 0.6, 1.6, scan_steps=9, bisect_iters=5,
                            popdyn_opts=PopdynOptions(N=20_000),
                            bethe_opts=BetheOptions(M=50_000), seed=0)
    assert result.location == pytest.approx(math.log(3), abs=0.25)
