import math

import numpy as np
import pytest

from cavitylab.bethe import (EstimateWithError, FieldPopulation, bethe_functional, bethe_potts,
                             fields_from_population, ldgm_bethe, ldgm_displayed_constant,
                             ldgm_information_constant, mutual_info, population_from_fields)
from cavitylab.errors import ParameterError, UnsupportedModelError
from cavitylab.models import make_model, rs_value, xi
from cavitylab.popdyn import init_population


def test_trivial_population_gives_rs_value():
    for spec, d in (({"kind": "potts", "q": 3, "c": 0.5}, 2.0),
                    ({"kind": "hypergraph_potts", "q": 2, "k": 3, "c": 0.7}, 3.5),
                    ({"kind": "ldgm", "k": 3, "eta": 0.2}, 4.0)):
        model = make_model(spec)
        trivial = init_population("trivial", model, 100)
        estimate = bethe_functional(trivial, model, d, M=10_000, seed=1)
        assert estimate.mean == pytest.approx(rs_value(model, d), abs=1e-9)
        assert estimate.stderr < 1e-9


def test_potts_closed_form_on_trivial_population():
    q, c, d = 3, 0.6, 5.0
    model = make_model({"kind": "potts", "q": q, "c": c})
    trivial = init_population("trivial", model, 100)

    closed = bethe_potts(q, d, c, trivial, M=10_000, seed=2)
    general = bethe_functional(trivial, model, d, M=10_000, seed=2)
    expected = math.log(q) + d / 2 * math.log(1 - c / q)
    assert closed.mean == pytest.approx(expected, abs=1e-9)
    assert general.mean == pytest.approx(expected, abs=1e-9)


def test_coloring_trivial_value():
    q, d = 3, 4.0
    trivial = init_population("trivial", make_model({"kind": "coloring_closed_form", "q": q}), 50)
    estimate = bethe_potts(q, d, 1.0, trivial, M=10_000, seed=0)
    assert estimate.mean == pytest.approx(math.log(q) + d / 2 * math.log(1 - 1 / q), abs=1e-9)


def test_zero_degree_is_exact():
    model = make_model({"kind": "naesat", "k": 3, "beta": 2.0})
    population = init_population("planted", model, 100, seed=1)

    estimate = bethe_functional(population, model, 0.0, M=10_000, seed=0)
    assert estimate.mean == math.log(2)
    assert estimate.stderr == 0.0
    assert mutual_info(model, 0.0, estimate).mean == pytest.approx(0.0, abs=1e-15)


def test_requires_enough_samples():
    model = make_model({"kind": "potts", "q": 2, "c": 0.5})
    population = init_population("trivial", model, 10)
    with pytest.raises(ParameterError):
        bethe_functional(population, model, 1.0, M=500, seed=0)
    with pytest.raises(ParameterError):
        bethe_potts(2, 1.0, 0.5, population, M=9_999, seed=0)
    with pytest.raises(UnsupportedModelError):
        coloring = make_model({"kind": "coloring_closed_form", "q": 2})
        bethe_functional(population, coloring, 1.0, M=10_000, seed=0)


def test_deterministic_across_threads():
    model = make_model({"kind": "ldgm", "k": 3, "eta": 0.1})
    population = init_population("planted", model, 500, seed=3)

    serial = bethe_functional(population, model, 2.0, M=20_000, seed=3, threads=1, chunk_size=1000)
    threaded = bethe_functional(population, model, 2.0, M=20_000, seed=3, threads=4, chunk_size=1000)
    assert serial.mean == threaded.mean
    assert serial.stderr == threaded.stderr


def test_ldgm_field_and_general_evaluators_agree():
    k, d, eta = 3, 2.5, 0.1
    model = make_model({"kind": "ldgm", "k": k, "eta": eta})
    population = init_population("planted", model, 2_000, seed=7)
    fields = fields_from_population(population)

    general = bethe_functional(population, model, d, M=40_000, seed=7)
    field = ldgm_bethe(k, d, eta, fields, M=40_000, seed=8)
    assert abs(general.mean - field.mean) < 6 * general.combined_stderr(field) + 1e-6


def test_ldgm_trivial_fields():
    estimate = ldgm_bethe(3, 2.0, 0.2, np.zeros(100), M=10_000, seed=0)
    assert estimate.mean == pytest.approx(math.log(2), abs=1e-12)


def test_field_population_conversion():
    fields = FieldPopulation([0.5, -1.0, 0.0])
    population = population_from_fields(fields)

    assert np.allclose(population.members, [[0.75, 0.25], [0.0, 1.0], [0.5, 0.5]])
    assert np.allclose(fields_from_population(population).values, fields.values)
    with pytest.raises(ParameterError):
        FieldPopulation([1.5])


def test_ldgm_constants():
    k, eta = 3, 0.11
    entropy = -(eta * math.log(eta) + (1 - eta) * math.log(1 - eta))

    assert ldgm_information_constant(k, 0.0, eta) == pytest.approx(math.log(2))
    assert ldgm_displayed_constant(k, 0.0, eta) - math.log(2) == pytest.approx(-entropy)
    assert ldgm_information_constant(k, 1.5, eta) == pytest.approx(
        math.log(2) + 0.5 * (math.log(2) - entropy))


def test_mutual_info_trivial_ldgm():
    k, d, eta = 3, 2.0, 0.1
    model = make_model({"kind": "ldgm", "k": k, "eta": eta})
    sup = EstimateWithError.exact(math.log(2))

    value = mutual_info(model, d, sup).mean
    assert value == pytest.approx(ldgm_information_constant(k, d, eta) - math.log(2))
    assert xi(model) == pytest.approx(1.0)


def test_estimate_from_samples():
    constant = EstimateWithError.from_samples(np.full(1000, 2.5), batches=10)
    assert constant.mean == 2.5
    assert constant.stderr == 0.0
    assert constant.batches == 10
    assert constant.samples == 1000

    with pytest.raises(ParameterError):
        EstimateWithError.from_samples(np.array([1.0, np.nan]))


def test_log_space_matches_direct_evaluation():
    model = make_model({"kind": "potts", "q": 3, "c": 0.7})
    population = init_population("planted", model, 1_000, seed=5)

    logged = bethe_functional(population, model, 5.0, M=10_000, seed=5, log_space=True)
    direct = bethe_functional(population, model, 5.0, M=10_000, seed=5, log_space=False)
    assert logged.mean == pytest.approx(direct.mean, rel=1e-10)

    dense = bethe_functional(population, model, 30.0, M=10_000, seed=5)
    assert math.isfinite(dense.mean)
    assert math.isfinite(dense.stderr)


def test_potts_population_must_match_q():
    population = init_population("trivial", make_model({"kind": "potts", "q": 3, "c": 0.5}), 50)
    with pytest.raises(ParameterError):
        bethe_potts(4, 2.0, 0.5, population, M=1_000, seed=0)


def test_ldgm_fields_must_be_mean_zero():
    with pytest.raises(ParameterError):
        ldgm_bethe(3, 2.0, 0.2, np.full(100, 0.5), M=1_000, seed=0)
    with pytest.raises(ParameterError):
        FieldPopulation([])
