import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavitylab.errors import ParameterError, UnsupportedModelError
from cavitylab.experiments import ZOO
from cavitylab.models import make_model
from cavitylab.popdyn import (InitKind, Population, cavity_sample, init_population,
                              order_parameter, potts_sweep, run_to_fixed_point, sweep, w1_distance)
from cavitylab.rng import stream


def test_init_population():
    model = make_model({"kind": "potts", "q": 3, "c": 0.5})

    trivial = init_population("trivial", model, 10)
    assert np.all(trivial.members == 1.0 / 3)

    planted = init_population(InitKind.PLANTED, model, 50, epsilon=0.1, seed=4)
    assert np.allclose(planted.members.sum(axis=1), 1.0)
    assert np.allclose(planted.members.max(axis=1), 0.9 + 0.1 / 3)

    with pytest.raises(ParameterError):
        init_population("planted", model, 10, epsilon=1.5)
    with pytest.raises(ParameterError):
        init_population("trivial", model, 0)


def test_trivial_population_is_a_fixed_point():
    for spec in ({"kind": "potts", "q": 3, "c": 0.5},
                 {"kind": "ldgm", "k": 3, "eta": 0.2},
                 {"kind": "naesat", "k": 3, "beta": 1.0}):
        model = make_model(spec)
        q = model.omega_size
        out = sweep(init_population("trivial", model, 300), model, 2.5, seed=1, chunk_size=64)
        assert out.generation == 1
        assert np.allclose(out.members, 1.0 / q, atol=1e-12)


def test_sweep_keeps_mean_near_uniform():
    model = make_model({"kind": "hypergraph_potts", "q": 3, "k": 3, "c": 0.8})
    population = init_population("planted", model, 6000, seed=2)
    out = sweep(population, model, 3.0, seed=2)

    assert np.allclose(out.members.sum(axis=1), 1.0)
    assert np.allclose(out.mean(), 1.0 / 3, atol=0.05)


@pytest.mark.parametrize("name", sorted(ZOO))
def test_planted_sweeps_stay_mean_uniform(name):
    model = make_model(ZOO[name])
    q, N = model.omega_size, 10_000
    population = init_population("planted", model, N, seed=5)
    for t in range(20):
        population = sweep(population, model, 3.0, seed=t)
        assert np.abs(population.mean() - 1.0 / q).max() <= 5 / np.sqrt(N)


def test_sweep_is_thread_independent():
    model = make_model({"kind": "potts", "q": 3, "c": 0.7})
    population = init_population("planted", model, 500, seed=9)

    serial = sweep(population, model, 4.0, seed=9, threads=1, chunk_size=100)
    threaded = sweep(population, model, 4.0, seed=9, threads=4, chunk_size=100)
    again = sweep(population, model, 4.0, seed=9, threads=1, chunk_size=100)

    assert np.array_equal(serial.members, threaded.members)
    assert np.array_equal(serial.members, again.members)


def test_potts_sweep_matches_trivial_fixed_point():
    population = Population(np.full((200, 3), 1.0 / 3))
    out = potts_sweep(population, 3, 1.0, 3.0, seed=0)
    assert np.allclose(out.members, 1.0 / 3, atol=1e-12)

    with pytest.raises(ParameterError):
        potts_sweep(population, 4, 0.5, 3.0, seed=0)


def test_cavity_sample_replay():
    model = make_model({"kind": "ksat", "k": 3, "beta": 1.5})
    population = init_population("planted", model, 100, seed=3)
    rng = stream(3, "test.cavity_sample")

    for _ in range(20):
        sample = cavity_sample(population, model, 3.0, rng)
        assert sample.degree == len(sample.slots)
        assert np.allclose(sample.replay(model), sample.output, atol=1e-10)


def test_coloring_uses_closed_form_sweep():
    model = make_model({"kind": "coloring_closed_form", "q": 3})
    with pytest.raises(UnsupportedModelError):
        sweep(init_population("trivial", model, 10), model, 2.0, seed=0)

    result = run_to_fixed_point("trivial", model, 2.0, N=200, max_sweeps=5, tol=1e-3, window=2,
                                seed=0)
    assert result.converged
    assert result.sweeps == 2
    assert len(result.trace_rows()) == 2


def test_w1_distance():
    a = np.array([[1.0, 0.0]] * 4)
    b = np.array([[0.0, 1.0]] * 4)
    assert w1_distance(a, b) == pytest.approx(1.0)
    assert w1_distance(a, a) == 0.0

    model = make_model({"kind": "potts", "q": 4, "c": 0.5})
    population = init_population("planted", model, 300, seed=1)
    assert w1_distance(population, population, projections=8) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ParameterError):
        w1_distance(a, population)


def test_order_parameter():
    assert order_parameter(Population(np.full((5, 4), 0.25))) == pytest.approx(0.25)
    assert order_parameter(Population(np.eye(3))) == pytest.approx(1.0)


def test_run_to_fixed_point_rejects_short_window():
    model = make_model({"kind": "potts", "q": 3, "c": 0.5})
    with pytest.raises(ParameterError):
        run_to_fixed_point("trivial", model, 1.0, N=10, max_sweeps=5, tol=1e-3, window=1, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=5, max_size=5), min_size=3, max_size=3))
def test_w1_triangle_inequality(values):
    a, b, c = (np.stack([np.array(v), 1 - np.array(v)], axis=1) for v in values)
    assert w1_distance(a, c) <= w1_distance(a, b) + w1_distance(b, c) + 1e-12
    assert w1_distance(a, b) == pytest.approx(w1_distance(b, a), abs=1e-15)


def test_empty_populations_are_rejected():
    with pytest.raises(ParameterError):
        Population(np.empty((0, 3)))
    with pytest.raises(ParameterError):
        Population(np.empty(0))
    with pytest.raises(ParameterError):
        w1_distance(np.empty((0, 2)), np.array([[0.5, 0.5]]))

    model = make_model({"kind": "potts", "q": 3, "c": 0.5})
    with pytest.raises(ParameterError):
        run_to_fixed_point("trivial", model, 1.0, N=0, max_sweeps=5, tol=1e-3, window=2, seed=0)
