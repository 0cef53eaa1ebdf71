import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Union

import numpy as np
from scipy.special import logsumexp, xlogy

from .config import DEFAULT_CONFIG
from .errors import ParameterError, UnsupportedModelError
from .models import Model, entropy_term, expected_weight, xi
from .parallel import map_chunks
from .popdyn import Population, factor_messages
from .rng import stream
from .tracing import get_tracer

tracer = get_tracer(__name__)

MIN_SAMPLES = 10_000


@dataclass
class EstimateWithError:
    mean: float
    stderr: float
    batches: int
    samples: int

    @classmethod
    def from_samples(cls, values: np.ndarray, batches: int = DEFAULT_CONFIG.bethe_batches) -> "EstimateWithError":
        """Batch-means estimate: mean of the batch means, stderr from their spread."""
        values = np.asarray(values, dtype=np.float64)
        if np.isnan(values).any():
            raise ParameterError("Monte-Carlo samples contain NaN")
        batches = max(1, min(batches, len(values)))
        means = np.array([chunk.mean() for chunk in np.array_split(values, batches)])
        stderr = float(means.std(ddof=1) / math.sqrt(batches)) if batches > 1 else 0.0
        return cls(float(means.mean()), stderr, batches, len(values))

    @classmethod
    def exact(cls, value: float) -> "EstimateWithError":
        return cls(float(value), 0.0, 0, 0)

    def combined_stderr(self, other: "EstimateWithError") -> float:
        return math.hypot(self.stderr, other.stderr)

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean, "stderr": self.stderr, "batches": self.batches,
                "samples": self.samples}


@dataclass(frozen=True, eq=False)
class FieldPopulation:
    """Population of symmetric fields theta = mu(+1) - mu(-1) in [-1, 1]."""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if values.size == 0:
            raise ParameterError("field population is empty")
        if np.any(np.abs(values) > 1 + 1e-12):
            raise ParameterError("fields must lie in [-1, 1]", max=float(np.abs(values).max()))
        values = np.clip(values, -1.0, 1.0)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_size(self) -> int:
        return len(self.values)


def fields_from_population(population: Population) -> FieldPopulation:
    if population.omega_size != 2:
        raise ParameterError("fields need a binary population", q=population.omega_size)
    return FieldPopulation(2 * population.members[:, 0] - 1)


def population_from_fields(fields: FieldPopulation) -> Population:
    theta = fields.values
    return Population(np.stack([(1 + theta) / 2, (1 - theta) / 2], axis=1))


def _check_samples(M: int, d: float):
    if M < MIN_SAMPLES:
        raise ParameterError(f"need at least {MIN_SAMPLES} Monte-Carlo samples", M=M)
    if d < 0 or math.isnan(d):
        raise ParameterError("d must be non-negative", d=d)


def _first_term(log_x: np.ndarray, gamma: np.ndarray, log_xi: float, q: int) -> np.ndarray:
    """xi^-gamma Lambda(X) / q from ln X, with Lambda(0) = 0."""
    with np.errstate(invalid="ignore", over="ignore"):
        scaled = np.exp(log_x - gamma * log_xi) * log_x
    return np.where(np.isneginf(log_x), 0.0, scaled) / q


def _bethe_chunk(members: np.ndarray, model: Model, d: float, size: int, rng: np.random.Generator,
                 log_space: bool) -> np.ndarray:
    N, q = members.shape
    k = model.arity
    xi_value = xi(model)
    log_xi = math.log(xi_value)

    gamma = rng.poisson(d, size=size)
    owner = np.repeat(np.arange(size), gamma)
    slots = rng.integers(k, size=owner.size)
    psi = rng.choice(model.n_weights, size=owner.size, p=model.prior)
    children = members[rng.integers(N, size=(owner.size, k - 1))]
    messages = factor_messages(model, psi, slots, children)

    if log_space:
        logs = np.zeros((size, q))
        np.add.at(logs, owner, np.log(messages))
        term1 = _first_term(logsumexp(logs, axis=1), gamma, log_xi, q)
    else:
        products = np.ones((size, q))
        np.multiply.at(products, owner, messages)
        x = products.sum(axis=1)
        term1 = xi_value ** (-gamma.astype(np.float64)) * xlogy(x, x) / q
    # Control variate with known mean: E[(gamma - d) ln xi] = 0
    term1 = term1 - (gamma - d) * log_xi

    psi2 = rng.choice(model.n_weights, size=size, p=model.prior)
    mus = members[rng.integers(N, size=(size, k))]
    s = expected_weight(model.flat_tables[psi2], mus)
    term2 = -d * (k - 1) / (k * xi_value) * xlogy(s, s)
    return term1 + term2


@tracer.start_as_current_span("bethe.bethe_functional")
def bethe_functional(population: Population, model: Model, d: float, M: int, seed: int,
                     batches: int = DEFAULT_CONFIG.bethe_batches, log_space: bool = True,
                     threads: int = None, chunk_size: int = None) -> EstimateWithError:
    if not model.is_soft:
        raise UnsupportedModelError("use bethe_potts for hard Potts constraints", kind=model.kind.value)
    _check_samples(M, d)
    if population.omega_size != model.omega_size:
        raise ParameterError("population and model disagree on q")
    if d == 0:
        return EstimateWithError.exact(math.log(model.omega_size))
    members = population.members

    def work(chunk: int, start: int, stop: int) -> np.ndarray:
        rng = stream(seed, "bethe.functional", chunk)
        return _bethe_chunk(members, model, d, stop - start, rng, log_space)

    values = np.concatenate(map_chunks(work, M, chunk_size, threads))
    return EstimateWithError.from_samples(values, batches)


@tracer.start_as_current_span("bethe.bethe_potts")
def bethe_potts(q: int, d: float, c: float, population: Population, M: int, seed: int,
                batches: int = DEFAULT_CONFIG.bethe_batches, threads: int = None,
                chunk_size: int = None) -> EstimateWithError:
    """Potts closed form; c = 1 is graph colouring."""
    if not 0 < c <= 1:
        raise ParameterError("c must lie in (0, 1]", c=c)
    if population.omega_size != q:
        raise ParameterError("population does not live on q spins", q=q,
                             population_q=population.omega_size)
    _check_samples(M, d)
    if d == 0:
        return EstimateWithError.exact(math.log(q))
    members = population.members
    N = population.n_size
    log_xi = math.log1p(-c / q)

    def work(chunk: int, start: int, stop: int) -> np.ndarray:
        rng = stream(seed, "bethe.potts", chunk)
        size = stop - start
        gamma = rng.poisson(d, size=size)
        owner = np.repeat(np.arange(size), gamma)
        children = members[rng.integers(N, size=owner.size)]
        logs = np.zeros((size, q))
        with np.errstate(divide="ignore", invalid="ignore"):
            np.add.at(logs, owner, np.log(1 - c * children))
            log_x = logsumexp(logs, axis=1)
        term1 = _first_term(log_x, gamma, log_xi, q) - (gamma - d) * log_xi
        pair = members[rng.integers(N, size=(size, 2))]
        s = np.maximum(1 - c * np.sum(pair[:, 0] * pair[:, 1], axis=1), 0.0)
        term2 = -d * xlogy(s, s) / (2 * (1 - c / q))
        return term1 + term2

    values = np.concatenate(map_chunks(work, M, chunk_size, threads))
    return EstimateWithError.from_samples(values, batches)


@tracer.start_as_current_span("bethe.ldgm_bethe")
def ldgm_bethe(k: int, d: float, eta: float, fields: Union[FieldPopulation, np.ndarray], M: int,
               seed: int, batches: int = DEFAULT_CONFIG.bethe_batches, threads: int = None,
               chunk_size: int = None) -> EstimateWithError:
    """LDGM functional in the field parametrisation theta = 2 mu(+1) - 1."""
    if not 0 < eta < 1:
        raise ParameterError("eta must lie in (0, 1)", eta=eta)
    if k < 2:
        raise ParameterError("k must be at least 2", k=k)
    _check_samples(M, d)
    if d == 0:
        return EstimateWithError.exact(math.log(2))
    if not isinstance(fields, FieldPopulation):
        fields = FieldPopulation(fields)
    theta = fields.values
    N = fields.n_size
    # LDGM fixed points are mean-zero; |theta| <= 1 bounds the standard error
    if abs(theta.mean()) > 5 / math.sqrt(N):
        raise ParameterError("field population is not mean-zero", mean=float(theta.mean()),
                             tolerance=5 / math.sqrt(N))
    strength = 1 - 2 * eta

    def work(chunk: int, start: int, stop: int) -> np.ndarray:
        rng = stream(seed, "bethe.ldgm", chunk)
        size = stop - start
        gamma = rng.poisson(d, size=size)
        owner = np.repeat(np.arange(size), gamma)
        signs = 1 - 2 * rng.integers(2, size=owner.size)
        a = strength * signs * theta[rng.integers(N, size=(owner.size, k - 1))].prod(axis=1)
        logs = np.zeros((size, 2))
        np.add.at(logs, owner, np.log(np.stack([1 + a, 1 - a], axis=1)))
        log_x = logsumexp(logs, axis=1)
        term1 = np.exp(log_x) * log_x / 2
        sign = 1 - 2 * rng.integers(2, size=size)
        s = 1 + strength * sign * theta[rng.integers(N, size=(size, k))].prod(axis=1)
        term2 = -d * (k - 1) / k * xlogy(s, s)
        return term1 + term2

    values = np.concatenate(map_chunks(work, M, chunk_size, threads))
    return EstimateWithError.from_samples(values, batches)


@tracer.start_as_current_span("bethe.mutual_info")
def mutual_info(model: Model, d: float, sup_bethe: EstimateWithError) -> EstimateWithError:
    """ln q + (d / (k xi q^k)) sum_tau E[Lambda(Psi(tau))] - sup B; stderr carried over."""
    value = math.log(model.omega_size) + entropy_term(model, d) - sup_bethe.mean
    if value < -3 * sup_bethe.stderr - 1e-12:
        logging.warning(f"Mutual information {value:.6g} is negative beyond 3 stderr "
                        f"({sup_bethe.stderr:.3g}); a fixed point may have been missed")
    return EstimateWithError(value, sup_bethe.stderr, sup_bethe.batches, sup_bethe.samples)


def ldgm_information_constant(k: int, d: float, eta: float) -> float:
    """ln 2 + (d/k)[ln 2 + eta ln eta + (1 - eta) ln(1 - eta)], the implemented constant."""
    return math.log(2) + (d / k) * (math.log(2) + float(xlogy(eta, eta) + xlogy(1 - eta, 1 - eta)))


def ldgm_displayed_constant(k: int, d: float, eta: float) -> float:
    """(1 + d/k) ln 2 + eta ln eta + (1 - eta) ln(1 - eta).

    Keeps the noise entropy outside the d/k factor, so the mutual information at d = 0
    comes out as -H(eta) instead of 0.
    """
    return (1 + d / k) * math.log(2) + float(xlogy(eta, eta) + xlogy(1 - eta, 1 - eta))
