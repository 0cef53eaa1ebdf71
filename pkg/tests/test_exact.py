import math

import numpy as np
import pytest

from cavitylab.errors import BudgetExceededError, ParameterError
from cavitylab.exact import (chi_square_statistic, configurations, exact_partition,
                             first_moment_closed_form, first_moment_identity, nishimori_exact_check,
                             null_constraint_law, teacher_constraint_law)
from cavitylab.graphs import Assignment, FactorGraphInstance, gen_null, gen_teacher, pin
from cavitylab.models import make_model

POTTS3 = {"kind": "potts", "q": 3, "c": 0.5}


def test_configurations_order():
    rows = configurations(2, 3)
    assert rows.shape == (9, 2)
    assert rows[0].tolist() == [0, 0]
    assert rows[1].tolist() == [0, 1]
    assert rows[-1].tolist() == [2, 2]
    assert np.array_equal(configurations(2, 3, 4, 6), rows[4:6])


def test_single_potts_edge():
    model = make_model(POTTS3)
    result = exact_partition(FactorGraphInstance(2, [0], [[0, 1]]), model, pair_marginals=True)

    assert math.exp(result.log_z) == pytest.approx(7.5)
    assert np.allclose(result.marginals, 1 / 3)
    assert result.pair_marginals[0, 1, 0, 0] == pytest.approx(0.5 / 7.5)
    assert result.pair_marginals[0, 1, 0, 1] == pytest.approx(1 / 7.5)
    assert result.configurations == 9


def test_empty_graph():
    model = make_model({"kind": "ldgm", "k": 3, "eta": 0.3})
    result = exact_partition(FactorGraphInstance(4, [], []), model)
    assert result.log_z == pytest.approx(4 * math.log(2))
    assert np.allclose(result.marginals, 0.5)


def test_fully_pinned_instance():
    model = make_model(POTTS3)
    instance = FactorGraphInstance(2, [0], [[0, 1]], pinned=[[0, 1], [1, 1]])
    result = exact_partition(instance, model)

    assert result.log_z == pytest.approx(math.log(0.5))
    assert np.allclose(result.marginals, [[0, 1, 0], [0, 1, 0]])


def test_zero_partition():
    coloring = make_model({"kind": "coloring_closed_form", "q": 2})
    result = exact_partition(FactorGraphInstance(1, [0], [[0, 0]]), coloring)

    assert result.zero_partition
    assert result.log_z == -math.inf
    assert np.isnan(result.marginals).all()
    assert result.to_dict()["log_z"] is None
    assert result.to_dict()["marginals"] is None


def test_chunked_enumeration_matches_threads():
    model = make_model({"kind": "naesat", "k": 3, "beta": 1.2})
    instance = gen_null(15, model, seed=6, d=3.0)
    serial = exact_partition(instance, model, threads=1)
    threaded = exact_partition(instance, model, threads=4)

    assert serial.configurations == 2 ** 15
    assert serial.log_z == threaded.log_z
    assert np.array_equal(serial.marginals, threaded.marginals)


def test_budget():
    model = make_model(POTTS3)
    with pytest.raises(BudgetExceededError) as info:
        exact_partition(FactorGraphInstance(5, [], []), model, budget=100)
    assert info.value.details["required"] == 243
    with pytest.raises(BudgetExceededError):
        nishimori_exact_check(3, 3, model, budget=1000)


def test_first_moment_identity():
    result = first_moment_identity(3, 2, make_model({"kind": "potts", "q": 2, "c": 0.5}))
    assert result["average_z"] == pytest.approx(98 / 27, rel=1e-12)
    assert result["relative_error"] < 1e-12
    assert result["annealed"] == pytest.approx(4.5)
    assert result["annealed_ratio"] < 1

    ksat = first_moment_identity(2, 2, make_model({"kind": "ksat", "k": 2, "beta": 0.8}))
    assert ksat["relative_error"] < 1e-12
    assert ksat["annealed_ratio"] == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("spec,n,m", [
    ({"kind": "potts", "q": 3, "c": 0.3}, 3, 2),
    ({"kind": "ldgm", "k": 2, "eta": 0.25}, 3, 2),
    ({"kind": "naesat", "k": 3, "beta": 1.0}, 3, 1),
    ({"kind": "hypergraph_potts", "q": 2, "k": 3, "beta": 0.7}, 3, 1),
])
def test_first_moment_closed_form_matches_enumeration(spec, n, m):
    model = make_model(spec)
    result = first_moment_identity(n, m, model)

    assert result["expected"] == pytest.approx(first_moment_closed_form(n, m, model), rel=1e-15)
    assert result["relative_error"] < 1e-12
    assert result["annealed_ratio"] <= 1 + 1e-12


def test_first_moment_without_constraints():
    model = make_model(POTTS3)
    assert first_moment_closed_form(4, 0, model) == pytest.approx(81.0)
    with pytest.raises(ParameterError):
        first_moment_identity(0, 1, model)


def test_constraint_laws_are_normalised():
    model = make_model({"kind": "ksat", "k": 3, "beta": 1.0})
    null = null_constraint_law(model, 4)
    planted = teacher_constraint_law(model, Assignment([0, 1, 1, 0], 2))

    assert len(null) == 8 * 4 ** 3
    assert math.fsum(null.probs) == pytest.approx(1.0)
    assert math.fsum(planted.probs) == pytest.approx(1.0)
    assert np.array_equal(null.neighbors, planted.neighbors)


def test_chi_square_statistic():
    exact = chi_square_statistic([25, 25, 50], [0.25, 0.25, 0.5])
    assert exact.statistic == pytest.approx(0.0)
    assert exact.dof == 2

    impossible = chi_square_statistic([1, 10, 10], [0.0, 0.5, 0.5])
    assert impossible.statistic == math.inf
    assert not impossible.within()

    with pytest.raises(ParameterError):
        chi_square_statistic([1, 2], [1.0])


@pytest.mark.parametrize("spec,n,m", [
    ({"kind": "potts", "q": 2, "c": 0.5}, 2, 2),
    ({"kind": "potts", "q": 3, "c": 0.4}, 2, 1),
    ({"kind": "ldgm", "k": 2, "eta": 0.2}, 3, 1),
    ({"kind": "ksat", "k": 2, "beta": 1.0}, 2, 2),
    ({"kind": "coloring_closed_form", "q": 3}, 2, 1),
])
def test_nishimori_identity(spec, n, m):
    report = nishimori_exact_check(n, m, make_model(spec))

    assert report.passed
    assert report.tv_distance < 1e-10
    assert report.to_dict()["pass"] is True


def test_nishimori_without_constraints():
    report = nishimori_exact_check(2, 0, make_model(POTTS3))
    assert report.graphs == 1
    assert report.tv_distance == pytest.approx(0.0, abs=1e-15)


def test_every_variable_pinned_leaves_the_truth():
    model = make_model(POTTS3)
    instance = gen_teacher(5, model, seed=2, m=6)
    pinned = pin(instance, 5.0, seed=2, theta=5.0)
    truth = instance.truth.spins

    expected = math.fsum(math.log(model.weights[p](*truth[list(nb)])) for p, nb in instance.constraints)
    result = exact_partition(pinned, model)
    assert len(pinned.pinned) == 5
    assert result.log_z == pytest.approx(expected, abs=1e-12)
