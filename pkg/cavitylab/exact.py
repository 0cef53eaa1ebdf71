"""Exhaustive oracles for tiny instances.

Everything here enumerates configurations (and, for the first-moment and
Nishimori checks, whole graph ensembles) exactly, so the results serve as
ground truth for the Monte-Carlo and message-passing code.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chisquare

from .conditions import bal_value, simplex_grid
from .config import DEFAULT_CONFIG
from .errors import BudgetExceededError, InfeasibleTruthError, ParameterError
from .graphs import Assignment, FactorGraphInstance
from .models import Model, xi
from .parallel import map_chunks
from .tracing import get_tracer, instrument_span

tracer = get_tracer(__name__)

ENUMERATION_CHUNK = 1 << 14


@dataclass
class ExactResult:
    log_z: float
    marginals: np.ndarray
    pair_marginals: Optional[np.ndarray] = None
    zero_partition: bool = False
    configurations: int = 0

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "log_z": self.log_z if math.isfinite(self.log_z) else None,
            "marginals": None if self.zero_partition else self.marginals.tolist(),
            "zero_partition": self.zero_partition,
            "configurations": self.configurations,
        }
        if self.pair_marginals is not None and not self.zero_partition:
            out["pair_marginals"] = self.pair_marginals.tolist()
        return out


def configurations(n: int, q: int, start: int = 0, stop: int = None) -> np.ndarray:
    """Rows are the base-q digits of start..stop-1, variable 0 most significant."""
    stop = q ** n if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    powers = q ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return (idx[:, None] // powers[None, :]) % q


def configuration_log_weights(instance: FactorGraphInstance, model: Model,
                              spins: np.ndarray) -> np.ndarray:
    """ln psi_G(sigma) for each row of spins, pins included; -inf where the weight is 0."""
    q, k = model.omega_size, model.arity
    log_tables = np.log(np.where(model.flat_tables > 0, model.flat_tables, 1.0))
    zero = model.flat_tables == 0
    powers = q ** np.arange(k - 1, -1, -1)
    out = np.zeros(len(spins))
    dead = np.zeros(len(spins), dtype=bool)
    for p, nb in zip(instance.psi_idx, instance.neighbors):
        flat = spins[:, nb] @ powers
        out += log_tables[p, flat]
        dead |= zero[p, flat]
    for v, s in instance.pinned:
        dead |= spins[:, v] != s
    out[dead] = -np.inf
    return out


def _check_budget(required: int, budget: int, what: str):
    if required > budget:
        raise BudgetExceededError(f"{what} needs {required} terms, budget is {budget}",
                                  required=int(required), budget=int(budget))


@tracer.start_as_current_span("exact.exact_partition")
def exact_partition(instance: FactorGraphInstance, model: Model, pair_marginals: bool = False,
                    budget: int = DEFAULT_CONFIG.enumeration_budget,
                    threads: int = None) -> ExactResult:
    """Z(G) and the Gibbs marginals by summing over all q^n configurations in log space."""
    instance.check_model(model)
    n, q = instance.n_vars, model.omega_size
    total = q ** n
    _check_budget(total, budget, "exact partition function")

    def work(chunk: int, start: int, stop: int):
        spins = configurations(n, q, start, stop)
        logw = configuration_log_weights(instance, model, spins)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_z = logsumexp(logw)
            log_marg = np.stack([logsumexp(np.where(spins == s, logw[:, None], -np.inf), axis=0)
                                 for s in range(q)], axis=1)
            log_pair = None
            if pair_marginals:
                log_pair = np.empty((n, n, q, q))
                for s in range(q):
                    for t in range(q):
                        mask = (spins[:, :, None] == s) & (spins[:, None, :] == t)
                        log_pair[:, :, s, t] = logsumexp(
                            np.where(mask, logw[:, None, None], -np.inf), axis=0)
        return log_z, log_marg, log_pair

    parts = map_chunks(work, total, ENUMERATION_CHUNK, threads)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_z = float(logsumexp([p[0] for p in parts]))
        log_marg = logsumexp(np.stack([p[1] for p in parts]), axis=0)
        log_pair = logsumexp(np.stack([p[2] for p in parts]), axis=0) if pair_marginals else None

    if not math.isfinite(log_z):
        logging.info(f"Every configuration of the {n}-variable instance has weight 0")
        nan = np.full((n, q), np.nan)
        return ExactResult(-math.inf, nan, None, zero_partition=True, configurations=total)
    marginals = np.exp(log_marg - log_z)
    pairs = np.exp(log_pair - log_z) if pair_marginals else None
    return ExactResult(log_z, marginals, pairs, configurations=total)


@dataclass
class ConstraintLaw:
    """Law of a single constraint: probability of every (psi, neighbour tuple)."""
    psi_idx: np.ndarray
    neighbors: np.ndarray
    probs: np.ndarray

    def __len__(self) -> int:
        return len(self.probs)


def _all_options(n: int, model: Model):
    tuples = configurations(model.arity, n)
    psi = np.repeat(np.arange(model.n_weights), len(tuples))
    return psi, np.tile(tuples, (model.n_weights, 1))


def null_constraint_law(model: Model, n: int) -> ConstraintLaw:
    psi, neighbors = _all_options(n, model)
    probs = model.prior[psi] / n ** model.arity
    return ConstraintLaw(psi, neighbors, probs)


def teacher_constraint_law(model: Model, truth: Assignment) -> ConstraintLaw:
    """Exact planted law p(psi) psi(truth(y)) / normaliser over every (psi, y)."""
    psi, neighbors = _all_options(truth.n, model)
    q, k = model.omega_size, model.arity
    flat = truth.spins[neighbors] @ (q ** np.arange(k - 1, -1, -1))
    weights = model.prior[psi] * model.flat_tables[psi, flat]
    total = math.fsum(weights)
    if not total > 0:
        raise InfeasibleTruthError("no constraint has positive weight under the truth")
    return ConstraintLaw(psi, neighbors, weights / total)


@dataclass
class ChiSquareResult:
    statistic: float
    dof: int
    p_value: float

    @property
    def z_score(self) -> float:
        """Deviation of the statistic from its mean, in standard deviations."""
        return (self.statistic - self.dof) / math.sqrt(2 * self.dof) if self.dof > 0 else 0.0

    def within(self, sigmas: float = 4.0) -> bool:
        return self.z_score < sigmas

    def to_dict(self) -> Dict[str, Any]:
        return {"statistic": self.statistic, "dof": self.dof, "p_value": self.p_value,
                "z_score": self.z_score}


def chi_square_statistic(observed: np.ndarray, expected_probs: np.ndarray) -> ChiSquareResult:
    """Pearson goodness of fit; cells of zero probability must stay empty."""
    observed = np.asarray(observed, dtype=np.float64).ravel()
    expected_probs = np.asarray(expected_probs, dtype=np.float64).ravel()
    if observed.shape != expected_probs.shape:
        raise ParameterError("observed and expected differ in shape")
    support = expected_probs > 0
    if observed[~support].sum() > 0:
        return ChiSquareResult(math.inf, int(support.sum()) - 1, 0.0)
    counts = observed[support]
    expected = expected_probs[support] / expected_probs[support].sum() * counts.sum()
    result = chisquare(counts, expected)
    return ChiSquareResult(float(result.statistic), len(counts) - 1, float(result.pvalue))


def _option_weights(law: ConstraintLaw, model: Model, spins: np.ndarray) -> np.ndarray:
    """W[o, config] = psi_o(config on the neighbours of option o)."""
    q, k = model.omega_size, model.arity
    flat = spins[:, law.neighbors] @ (q ** np.arange(k - 1, -1, -1))
    return model.flat_tables[law.psi_idx[None, :], flat].T


def _enumerate_graphs(n_options: int, m: int) -> np.ndarray:
    """Every ordered sequence of m constraint options, shape (n_options^m, m)."""
    return np.array(list(itertools.product(range(n_options), repeat=m)), dtype=np.int64)


def first_moment_closed_form(n: int, m: int, model: Model) -> float:
    """E[Z] = sum_sigma F(lambda_sigma)^m, grouped by the spin counts of sigma.

    F is the BAL functional; lambda_sigma is the empirical spin distribution, so the
    placements of a constraint may repeat a variable exactly as gen_null allows.
    """
    q = model.omega_size
    lam = simplex_grid(q, n)
    counts = np.rint(lam * n).astype(np.int64)
    multiplicity = [math.factorial(n) // math.prod(math.factorial(int(c)) for c in row)
                    for row in counts]
    return math.fsum(w * float(f) ** m for w, f in zip(multiplicity, bal_value(model, lam)))


@tracer.start_as_current_span("exact.first_moment_identity")
def first_moment_identity(n: int, m: int, model: Model,
                          budget: int = DEFAULT_CONFIG.nishimori_budget) -> Dict[str, float]:
    """Average Z over every null graph with m constraints, against its closed form.

    The annealed value q^n xi^m is the maximum of the summand at uniform lambda; it
    bounds the average from above whenever BAL holds and is reached exactly when F is
    constant on the simplex (k-SAT, LDGM).
    """
    if n < 1 or m < 0:
        raise ParameterError("need n >= 1 and m >= 0", n=n, m=m)
    q = model.omega_size
    law = null_constraint_law(model, n)
    _check_budget(len(law) ** m * q ** n, budget, "first moment enumeration")
    W = _option_weights(law, model, configurations(n, q))
    graphs = _enumerate_graphs(len(law), m)
    z = np.prod(W[graphs], axis=1).sum(axis=1)
    average = math.fsum(np.prod(law.probs[graphs], axis=1) * z)
    expected = first_moment_closed_form(n, m, model)
    annealed = q ** n * xi(model) ** m
    return {"n": n, "m": m, "average_z": average, "expected": expected,
            "relative_error": abs(average - expected) / expected,
            "annealed": annealed, "annealed_ratio": average / annealed}


@dataclass
class NishimoriReport:
    tv_distance: float
    n: int
    m: int
    graphs: int
    assignments: int
    tolerance: float = 1e-10

    @property
    def passed(self) -> bool:
        return self.tv_distance < self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {"tv_distance": self.tv_distance, "pass": self.passed, "n": self.n, "m": self.m,
                "graphs": self.graphs, "assignments": self.assignments}


def nishimori_exact_check(n: int, m: int, model: Model,
                          budget: int = DEFAULT_CONFIG.nishimori_budget,
                          tolerance: float = 1e-10) -> NishimoriReport:
    """Compare the planted joint law of (graph, assignment) with the reweighted-graph/Gibbs one.

    Route one draws the assignment proportional to its average weight and then each
    constraint from the planted law. Route two draws the graph proportional to Z(G) times
    its null probability and then the assignment from the Gibbs measure of that graph.
    """
    if n < 1 or m < 0:
        raise ParameterError("need n >= 1 and m >= 0", n=n, m=m)
    q = model.omega_size
    null = null_constraint_law(model, n)
    spins = configurations(n, q)
    _check_budget(len(null) ** m * len(spins), budget, "Nishimori enumeration")

    with tracer.start_as_current_span("exact.nishimori_exact_check") as span:
        instrument_span(span, "exact", n=n, m=m, kind=model.kind.value)
        graphs = _enumerate_graphs(len(null), m)

        # route one: assignment by average weight, then planted constraints
        avg_weight = null.probs @ _option_weights(null, model, spins)
        if not np.any(avg_weight > 0):
            raise InfeasibleTruthError("every assignment has average weight 0")
        assignment_law = avg_weight ** m / np.sum(avg_weight ** m)
        planted = np.zeros((len(spins), len(null)))
        for c in np.flatnonzero(assignment_law > 0):
            planted[c] = teacher_constraint_law(model, Assignment(spins[c], q)).probs
        route_one = assignment_law[None, :] * np.prod(planted[:, graphs], axis=2).T

        # route two: graph reweighted by its partition function, then a Gibbs sample
        null_probs = np.prod(null.probs[graphs], axis=1)
        log_z = np.empty(len(graphs))
        gibbs = np.zeros((len(graphs), len(spins)))
        for i, g in enumerate(graphs):
            instance = FactorGraphInstance(n, null.psi_idx[g], null.neighbors[g])
            log_z[i] = exact_partition(instance, model).log_z
            if math.isfinite(log_z[i]):
                gibbs[i] = np.exp(configuration_log_weights(instance, model, spins) - log_z[i])
        weighted = null_probs * np.exp(log_z)
        route_two = (weighted / math.fsum(weighted))[:, None] * gibbs

        tv = 0.5 * math.fsum(np.abs(route_one - route_two).ravel())
        span.set_attribute("cavitylab.tv_distance", tv)
    logging.info(f"Nishimori check n={n} m={m}: total variation {tv:.3e} over "
                 f"{len(graphs)} graphs x {len(spins)} assignments")
    return NishimoriReport(tv, n, m, len(graphs), len(spins), tolerance)
