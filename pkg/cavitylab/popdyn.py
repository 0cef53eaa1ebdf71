"""Population dynamics for the distributional BP operator.

A distribution pi on P(Omega) is represented by N members. One sweep draws N
fresh cavity messages against the frozen input population:

  BP1 root spin uniform,
  BP2 degree ~ Po(d) and a uniform slot per factor,
  BP3 (weight function, neighbour spins) ~ p(psi) psi(...) given the root spin,
  BP4 child messages drawn size-biased by mu(child spin),
  BP5 product of factor messages, normalised.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import wasserstein_distance

from .errors import (DegenerateMessageError, DegeneratePopulationError, ParameterError,
                     UnsupportedModelError)
from .models import Model, ModelKind
from .parallel import map_chunks
from .rng import stream
from .tracing import get_tracer, instrument_span

tracer = get_tracer(__name__)

ProbVec = np.ndarray

LOG_TINY = np.log(1e-300)
MAX_REDRAWS = 100
REJECTION_ROUNDS_PER_SPIN = 1000


class InitKind(Enum):
    TRIVIAL = "trivial"
    PLANTED = "planted"


@dataclass(frozen=True, eq=False)
class Population:
    members: np.ndarray
    generation: int = 0

    def __post_init__(self):
        members = np.array(self.members, dtype=np.float64, ndmin=2)
        if members.ndim != 2 or 0 in members.shape:
            raise ParameterError("a population needs at least one member of shape (q,)",
                                 shape=list(members.shape))
        members.setflags(write=False)
        object.__setattr__(self, "members", members)

    @property
    def n_size(self) -> int:
        return self.members.shape[0]

    @property
    def omega_size(self) -> int:
        return self.members.shape[1]

    def mean(self) -> ProbVec:
        return self.members.mean(axis=0)

    def order_parameter(self) -> float:
        return order_parameter(self)


def order_parameter(population: Population) -> float:
    """Mean of sum_s mu(s)^2 over the members."""
    return float(np.mean(np.sum(population.members ** 2, axis=1)))


@dataclass
class CavitySample:
    root_spin: int
    degree: int
    slots: np.ndarray
    weight_draws: np.ndarray
    child_spins: np.ndarray
    child_messages: np.ndarray
    factor_messages: np.ndarray
    output: ProbVec
    redraws: int = 0

    def replay(self, model: Model) -> ProbVec:
        """Recompute BP5 from the stored draws by direct tensor contraction."""
        log_out = np.zeros(model.omega_size)
        for b in range(self.degree):
            msg = np.moveaxis(model.tables[self.weight_draws[b]], int(self.slots[b]), 0)
            for mu in self.child_messages[b]:
                msg = np.tensordot(msg, mu, axes=([1], [0]))
            log_out += np.log(msg / msg.sum())
        return np.exp(log_out - logsumexp(log_out))


@dataclass
class FixedPointResult:
    population: Population
    init_kind: InitKind
    converged: bool
    sweeps: int
    distance_trace: List[float] = field(default_factory=list)
    order_param_trace: List[float] = field(default_factory=list)

    def trace_rows(self) -> List[Dict[str, Any]]:
        return [{"sweep": i + 1, "order_param": op, "w1": w1}
                for i, (op, w1) in enumerate(zip(self.order_param_trace, self.distance_trace))]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "init_kind": self.init_kind.value,
            "converged": self.converged,
            "sweeps": self.sweeps,
            "n_size": self.population.n_size,
            "order_param": self.population.order_parameter(),
            "population_mean": self.population.mean().tolist(),
            "distance_trace": self.distance_trace,
            "order_param_trace": self.order_param_trace,
        }


def init_population(kind: Union[InitKind, str], model: Model, N: int, epsilon: float = 0.05,
                    seed: int = 0) -> Population:
    kind = InitKind(kind)
    if N < 1:
        raise ParameterError("population size must be positive", N=N)
    if not 0 <= epsilon <= 1:
        raise ParameterError("epsilon must lie in [0, 1]", epsilon=epsilon)
    q = model.omega_size
    if kind is InitKind.TRIVIAL:
        return Population(np.full((N, q), 1.0 / q))
    omega = stream(seed, "popdyn.init").integers(q, size=N)
    members = np.full((N, q), epsilon / q)
    members[np.arange(N), omega] += 1 - epsilon
    return Population(members)


def _require_soft(model: Model):
    if not model.is_soft:
        raise UnsupportedModelError(
            "hard constraints are only supported through the Potts closed-form path",
            kind=model.kind.value)


def factor_messages(model: Model, psi_idx: np.ndarray, slots: np.ndarray,
                    child_messages: np.ndarray) -> np.ndarray:
    """Unnormalised factor-to-variable messages.

    out[b, s] = sum_tau 1{tau_h = s} psi_b(tau) prod_{j != h} mu_bj(tau_j), with the
    k - 1 child messages of factor b given in ascending slot order.
    """
    n_factors = len(psi_idx)
    q, k = model.omega_size, model.arity
    out = np.empty((n_factors, q))
    if n_factors == 0:
        return out
    outer = child_messages[:, 0]
    for j in range(1, k - 1):
        outer = (outer[:, :, None] * child_messages[:, j][:, None, :]).reshape(n_factors, -1)
    keys = np.asarray(slots) * model.n_weights + np.asarray(psi_idx)
    for key in np.unique(keys):
        sel = keys == key
        h, p = divmod(int(key), model.n_weights)
        out[sel] = outer[sel] @ model.slot_tables[h, p].T
    return out


def _draw_patterns(model: Model, slots: np.ndarray, root_spins: np.ndarray,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """BP3: (psi, other spins) ~ p(psi) psi(tau) given tau_h = root spin."""
    q, k = model.omega_size, model.arity
    rest = q ** (k - 1)
    weights = model.prior[None, :, None, None] * model.slot_tables
    weights = np.moveaxis(weights, 2, 1).reshape(k * q, -1)
    cdf = np.cumsum(weights, axis=1)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0
    row = cdf.shape[1]
    flat = (cdf + np.arange(k * q)[:, None]).ravel()

    group = slots * q + root_spins
    pos = np.searchsorted(flat, group + rng.random(len(group)), side="right") - group * row
    pos = np.clip(pos, 0, row - 1)
    psi, tail = np.divmod(pos, rest)
    spins = np.stack([(tail // q ** (k - 2 - j)) % q for j in range(k - 1)], axis=1)
    return psi, spins.reshape(len(group), k - 1)


def _size_biased(members: np.ndarray, spins: np.ndarray, rng: np.random.Generator,
                 sample_ids: np.ndarray) -> np.ndarray:
    """BP4 by rejection: uniform member, accepted with probability mu(spin)."""
    N, q = members.shape
    chosen = np.empty(len(spins), dtype=np.int64)
    pending = np.arange(len(spins))
    rounds = 0
    while pending.size:
        rounds += 1
        if rounds > REJECTION_ROUNDS_PER_SPIN * q:
            raise DegeneratePopulationError(
                "size-biased draw exhausted its rejection budget",
                sample=int(sample_ids[pending[0]]), spin=int(spins[pending[0]]), attempts=rounds - 1)
        idx = rng.integers(N, size=pending.size)
        accept = rng.random(pending.size) < members[idx, spins[pending]]
        chosen[pending[accept]] = idx[accept]
        pending = pending[~accept]
    return chosen


def _combine(messages: np.ndarray, owner: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """BP5 in log space: normalised product of each owner's factor messages."""
    q = messages.shape[1]
    logs = np.zeros((size, q))
    with np.errstate(divide="ignore", invalid="ignore"):
        np.add.at(logs, owner, np.log(messages))
        lognorm = logsumexp(logs, axis=1)
        out = np.exp(logs - lognorm[:, None])
    return out, lognorm


def _cavity_batch(members: np.ndarray, model: Model, d: float, rng: np.random.Generator,
                  sample_ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Dict[str, Any]]:
    size = len(sample_ids)
    q, k = model.omega_size, model.arity
    root = rng.integers(q, size=size)
    degree = rng.poisson(d, size=size)
    owner = np.repeat(np.arange(size), degree)
    slots = rng.integers(k, size=owner.size)
    psi, child_spins = _draw_patterns(model, slots, root[owner], rng)
    picks = _size_biased(members, child_spins.ravel(), rng, np.repeat(sample_ids[owner], k - 1))
    child_messages = members[picks].reshape(owner.size, k - 1, q)
    messages = factor_messages(model, psi, slots, child_messages)
    messages /= messages.sum(axis=1, keepdims=True)
    out, lognorm = _combine(messages, owner, size)
    parts = {"root": root, "degree": degree, "slots": slots, "psi": psi,
             "child_spins": child_spins, "child_messages": child_messages, "messages": messages}
    return out, lognorm, parts


def _potts_batch(members: np.ndarray, q: int, c: float, d: float, rng: np.random.Generator,
                 sample_ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    size = len(sample_ids)
    root = rng.integers(q, size=size)
    degree = rng.poisson(d, size=size)
    owner = np.repeat(np.arange(size), degree)
    # BP3: the neighbour repeats the root spin with probability (1 - c) / (q - c)
    same = rng.random(owner.size) < (1 - c) / (q - c)
    other = (root[owner] + 1 + rng.integers(q - 1, size=owner.size)) % q
    child_spins = np.where(same, root[owner], other)
    picks = _size_biased(members, child_spins, rng, sample_ids[owner])
    messages = 1 - c * members[picks]
    messages /= messages.sum(axis=1, keepdims=True)
    return _combine(messages, owner, size)


def _with_redraws(batch: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
                  sample_ids: np.ndarray) -> np.ndarray:
    out, lognorm = batch(sample_ids)
    bad = np.flatnonzero(~(lognorm >= LOG_TINY))
    redraws = 0
    while bad.size:
        redraws += 1
        if redraws > MAX_REDRAWS:
            raise DegenerateMessageError("cavity message normaliser vanished on every re-draw",
                                         sample=int(sample_ids[bad[0]]), redraws=MAX_REDRAWS)
        redo, relog = batch(sample_ids[bad])
        out[bad] = redo
        bad = bad[~(relog >= LOG_TINY)]
    return out


def cavity_sample(population: Population, model: Model, d: float,
                  rng: np.random.Generator) -> CavitySample:
    _require_soft(model)
    if population.n_size < 1:
        raise ParameterError("population is empty")
    ids = np.zeros(1, dtype=np.int64)
    for redraws in range(MAX_REDRAWS + 1):
        out, lognorm, parts = _cavity_batch(population.members, model, d, rng, ids)
        if lognorm[0] >= LOG_TINY:
            return CavitySample(
                root_spin=int(parts["root"][0]), degree=int(parts["degree"][0]),
                slots=parts["slots"], weight_draws=parts["psi"],
                child_spins=parts["child_spins"], child_messages=parts["child_messages"],
                factor_messages=parts["messages"], output=out[0], redraws=redraws)
    raise DegenerateMessageError("cavity message normaliser vanished on every re-draw",
                                 sample=0, redraws=MAX_REDRAWS)


@tracer.start_as_current_span("popdyn.sweep")
def sweep(population: Population, model: Model, d: float, seed: int,
          threads: int = None, chunk_size: int = None) -> Population:
    """One synchronous application of the operator to a frozen population."""
    _require_soft(model)
    if d < 0:
        raise ParameterError("d must be non-negative", d=d)
    members = population.members

    def work(chunk: int, start: int, stop: int) -> np.ndarray:
        rng = stream(seed, "popdyn.sweep", population.generation, chunk)
        return _with_redraws(lambda ids: _cavity_batch(members, model, d, rng, ids)[:2],
                             np.arange(start, stop))

    outs = map_chunks(work, population.n_size, chunk_size, threads)
    return Population(np.concatenate(outs), population.generation + 1)


@tracer.start_as_current_span("popdyn.potts_sweep")
def potts_sweep(population: Population, q: int, c: float, d: float, seed: int,
                threads: int = None, chunk_size: int = None) -> Population:
    """Sweep for the pair Potts weight 1 - c 1{s = t}; accepts c = 1 (colouring)."""
    if not 0 < c <= 1:
        raise ParameterError("c must lie in (0, 1]", c=c)
    if d < 0:
        raise ParameterError("d must be non-negative", d=d)
    if population.omega_size != q:
        raise ParameterError("population and model disagree on q", q=q,
                             population_q=population.omega_size)
    members = population.members

    def work(chunk: int, start: int, stop: int) -> np.ndarray:
        rng = stream(seed, "popdyn.potts_sweep", population.generation, chunk)
        return _with_redraws(lambda ids: _potts_batch(members, q, c, d, rng, ids),
                             np.arange(start, stop))

    outs = map_chunks(work, population.n_size, chunk_size, threads)
    return Population(np.concatenate(outs), population.generation + 1)


def _members(pop: Union[Population, np.ndarray]) -> np.ndarray:
    return pop.members if isinstance(pop, Population) else np.atleast_2d(np.asarray(pop, dtype=np.float64))


def w1_distance(pop_a: Union[Population, np.ndarray], pop_b: Union[Population, np.ndarray],
                projections: int = 32, seed: int = 0) -> float:
    """Exact W1 on mu(0) for q = 2, sliced W1 over random unit directions otherwise."""
    a, b = _members(pop_a), _members(pop_b)
    if a.size == 0 or b.size == 0:
        raise ParameterError("W1 needs non-empty populations", n_a=len(a), n_b=len(b))
    if a.shape[1] != b.shape[1]:
        raise ParameterError("populations live on different simplices",
                             q_a=a.shape[1], q_b=b.shape[1])
    if a.shape[1] == 2:
        return float(wasserstein_distance(a[:, 0], b[:, 0]))
    directions = stream(seed, "popdyn.w1").normal(size=(projections, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return float(np.mean([wasserstein_distance(a @ v, b @ v) for v in directions]))


def _stepper(model: Model) -> Callable[..., Population]:
    if model.kind is ModelKind.COLORING:
        q, c = model.omega_size, model.params["c"]
        return lambda pop, d, seed, threads: potts_sweep(pop, q, c, d, seed, threads)
    return lambda pop, d, seed, threads: sweep(pop, model, d, seed, threads)


def run_to_fixed_point(init_kind: Union[InitKind, str], model: Model, d: float, N: int,
                       max_sweeps: int, tol: float, window: int, seed: int,
                       epsilon: float = 0.05, projections: int = 32,
                       threads: int = None) -> FixedPointResult:
    if N < 1:
        raise ParameterError("population size must be positive", N=N)
    if not max_sweeps >= window >= 2:
        raise ParameterError("need max_sweeps >= window >= 2", max_sweeps=max_sweeps, window=window)
    init_kind = InitKind(init_kind)
    with tracer.start_as_current_span("popdyn.run_to_fixed_point") as span:
        instrument_span(span, "popdyn", kind=model.kind.value, d=d, N=N,
                        init=init_kind.value, seed=seed)
        step = _stepper(model)
        population = init_population(init_kind, model, N, epsilon, seed)
        history = deque([population], maxlen=window + 1)
        order_trace: List[float] = []
        distance_trace: List[float] = []
        converged = False
        for t in range(1, max_sweeps + 1):
            population = step(population, d, seed, threads)
            history.append(population)
            order_trace.append(order_parameter(population))
            distance_trace.append(w1_distance(population, history[0], projections, seed))
            if t >= window:
                recent = order_trace[-window:]
                if max(recent) - min(recent) < tol and distance_trace[-1] < 5 * tol:
                    converged = True
                    break
        span.set_attribute("cavitylab.converged", converged)
        logging.info(f"{init_kind.value} population at d={d:.4f}: converged={converged} after "
                     f"{len(order_trace)} sweeps, order parameter {order_trace[-1]:.6f}")
        return FixedPointResult(population, init_kind, converged, len(order_trace),
                                distance_trace, order_trace)
