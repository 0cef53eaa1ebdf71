import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import DEFAULT_CONFIG
from .errors import ParameterError
from .models import Model, expected_weight
from .rng import stream
from .tracing import get_tracer, instrument_span

tracer = get_tracer(__name__)

MEAN_UNIFORM_TOL = 1e-9


class Condition(Enum):
    SYM = "SYM"
    BAL = "BAL"
    POS = "POS"


class Verdict(Enum):
    PASS = "pass"
    FAIL = "fail"
    INCONCLUSIVE = "inconclusive"


@dataclass
class ConditionReport:
    condition: Condition
    verdict: Verdict
    max_residual: float
    witness: Optional[Dict[str, Any]] = None
    samples_used: int = 0
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict is Verdict.PASS

    def to_dict(self) -> Dict[str, Any]:
        return {
            "condition": self.condition.value,
            "verdict": self.verdict.value,
            "max_residual": self.max_residual,
            "witness": self.witness,
            "samples_used": self.samples_used,
            "details": self.details,
        }


# --- SYM ---------------------------------------------------------------------

@tracer.start_as_current_span("conditions.check_sym")
def check_sym(model: Model, tol: float = DEFAULT_CONFIG.sym_tol) -> ConditionReport:
    k = model.arity
    mean = model.mean_table
    # sums[i, s] = sum_tau E[Psi(tau)] 1{tau_i = s}
    sums = np.stack([mean.sum(axis=tuple(a for a in range(k) if a != i)) for i in range(k)])
    residual = float(sums.max() - sums.min())
    report = ConditionReport(Condition.SYM, Verdict.PASS if residual < tol else Verdict.FAIL,
                             residual, details={"sums": sums.tolist(), "tol": tol})
    if not report.passed:
        hi = np.unravel_index(np.argmax(sums), sums.shape)
        lo = np.unravel_index(np.argmin(sums), sums.shape)
        report.witness = {
            "max": {"position": int(hi[0]), "spin": int(hi[1]), "value": float(sums[hi])},
            "min": {"position": int(lo[0]), "spin": int(lo[1]), "value": float(sums[lo])},
        }
    return report


# --- BAL ---------------------------------------------------------------------

def bal_value(model: Model, mu: np.ndarray) -> np.ndarray:
    """F(mu) = sum_tau E[Psi(tau)] prod_i mu(tau_i) for a batch of mu (B, q)."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    B, q = mu.shape
    out = np.broadcast_to(model.mean_table.reshape(1, -1), (B, q ** model.arity))
    return expected_weight(out, np.repeat(mu[:, None, :], model.arity, axis=1))


def simplex_grid(q: int, resolution: int) -> np.ndarray:
    """All points of the simplex with coordinates in (1/resolution) Z (stars and bars)."""
    bars = np.array(list(itertools.combinations(range(resolution + q - 1), q - 1)), dtype=np.int64)
    bars = bars.reshape(-1, q - 1)
    edges = np.concatenate([np.full((len(bars), 1), -1), bars,
                            np.full((len(bars), 1), resolution + q - 1)], axis=1)
    return (np.diff(edges, axis=1) - 1) / resolution


@tracer.start_as_current_span("conditions.check_bal")
def check_bal(model: Model, grid_resolution: int = 20, random_trials: int = 1000, seed: int = 0,
              tol: float = DEFAULT_CONFIG.bal_tol,
              max_grid_points: int = DEFAULT_CONFIG.max_grid_points) -> ConditionReport:
    if grid_resolution < 10 or random_trials < 100:
        raise ParameterError("need grid_resolution >= 10 and random_trials >= 100",
                             grid_resolution=grid_resolution, random_trials=random_trials)
    q = model.omega_size
    grid_size = math.comb(grid_resolution + q - 1, q - 1)
    details = {"grid_resolution": grid_resolution, "grid_points": grid_size,
               "random_trials": random_trials, "seed": seed, "tol": tol}
    if grid_size > max_grid_points:
        logging.warning(f"BAL grid of {grid_size} points exceeds {max_grid_points}; skipping")
        return ConditionReport(Condition.BAL, Verdict.INCONCLUSIVE, float("nan"), details=details)

    rng = stream(seed, "conditions.bal")
    points = np.concatenate([
        simplex_grid(q, grid_resolution),
        rng.dirichlet(np.ones(q), size=random_trials),
        rng.dirichlet(np.full(q, 0.2), size=random_trials),
    ])
    uniform = np.full(q, 1.0 / q)
    f_uniform = float(bal_value(model, uniform)[0])
    values = bal_value(model, points)

    excess = values - f_uniform
    worst = int(np.argmax(excess))

    a = rng.integers(len(points), size=random_trials)
    b = rng.integers(len(points), size=random_trials)
    midpoints = bal_value(model, (points[a] + points[b]) / 2)
    concavity_gap = (values[a] + values[b]) / 2 - midpoints
    worst_pair = int(np.argmax(concavity_gap))

    residual = max(0.0, float(excess[worst]), float(concavity_gap[worst_pair]))
    report = ConditionReport(Condition.BAL, Verdict.PASS, residual,
                             samples_used=len(points) + random_trials, details=details)
    if excess[worst] > tol:
        report.verdict = Verdict.FAIL
        report.witness = {"kind": "maximum", "mu": points[worst].tolist(),
                          "value": float(values[worst]), "uniform_value": f_uniform}
    elif concavity_gap[worst_pair] > tol:
        report.verdict = Verdict.FAIL
        report.witness = {"kind": "concavity", "mu": points[a[worst_pair]].tolist(),
                          "nu": points[b[worst_pair]].tolist(),
                          "gap": float(concavity_gap[worst_pair])}
    return report


# --- POS ---------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteLaw:
    """pi as a finite mixture of atoms."""
    atoms: np.ndarray
    weights: np.ndarray
    label: str = "discrete"

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.atoms[rng.choice(len(self.atoms), size=size, p=self.weights)]

    def describe(self) -> Dict[str, Any]:
        return {"label": self.label, "atoms": self.atoms.tolist(), "weights": self.weights.tolist()}


@dataclass(frozen=True)
class DirichletShiftLaw:
    """Dirichlet(alpha) composed with a uniformly random cyclic relabelling of the spins."""
    alpha: np.ndarray
    label: str = "dirichlet"

    def mean(self) -> np.ndarray:
        base = self.alpha / self.alpha.sum()
        q = len(base)
        return np.mean([np.roll(base, s) for s in range(q)], axis=0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        q = len(self.alpha)
        draws = rng.dirichlet(self.alpha, size=size)
        shifts = rng.integers(q, size=size)
        cols = (np.arange(q)[None, :] - shifts[:, None]) % q
        return np.take_along_axis(draws, cols, axis=1)

    def describe(self) -> Dict[str, Any]:
        return {"label": self.label, "alpha": self.alpha.tolist()}


def polarized_law(q: int, eps: float) -> DiscreteLaw:
    """(1 - eps) delta_w + eps * uniform with w uniform."""
    atoms = (1 - eps) * np.eye(q) + eps / q
    return DiscreteLaw(atoms, np.full(q, 1.0 / q), label=f"polarized(eps={eps})")


def stress_family(q: int, rng: np.random.Generator) -> List[Any]:
    """Mean-uniform laws on P(Omega) used as POS test distributions."""
    uniform_atom = DiscreteLaw(np.full((1, q), 1.0 / q), np.ones(1), label="uniform_atom")
    half = DiscreteLaw(np.vstack([np.full((1, q), 1.0 / q), np.eye(q)]),
                       np.concatenate([[0.5], np.full(q, 0.5 / q)]), label="uniform_or_vertex")
    return [
        uniform_atom,
        polarized_law(q, 0.0),
        polarized_law(q, 0.3),
        polarized_law(q, 0.7),
        half,
        DirichletShiftLaw(np.full(q, 0.5), label="dirichlet(0.5)"),
        DirichletShiftLaw(rng.gamma(1.0, 1.0, size=q) + 0.1, label="dirichlet(random)"),
    ]


def validate_mean_uniform(family: Sequence[Any], q: int):
    for i, law in enumerate(family):
        deviation = float(np.max(np.abs(law.mean() - 1.0 / q)))
        if deviation > MEAN_UNIFORM_TOL:
            raise ParameterError("test distribution is not mean-uniform", index=i,
                                 deviation=deviation, law=law.describe())


def _pos_samples(model: Model, law_a, law_b, same: bool, outer_samples: int,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(1 - S_pi, 1 - S_pi', 1 - S_i) for one cell; S_i has shape (n, k)."""
    k, q = model.arity, model.omega_size
    psi = rng.choice(model.n_weights, size=outer_samples, p=model.prior)
    tables = model.flat_tables[psi]
    mu_a = law_a.sample(rng, outer_samples * k).reshape(outer_samples, k, q)
    # The expectation is linear, so a diagonal pair may share one sample set
    mu_b = mu_a if same else law_b.sample(rng, outer_samples * k).reshape(outer_samples, k, q)
    s_a = expected_weight(tables, mu_a)
    s_b = expected_weight(tables, mu_b)
    s_mixed = np.empty((outer_samples, k))
    for i in range(k):
        mixed = mu_b.copy()
        mixed[:, i] = mu_a[:, i]
        s_mixed[:, i] = expected_weight(tables, mixed)
    return 1 - s_a, 1 - s_b, 1 - s_mixed


def _pos_estimates(model: Model, l_values: Sequence[int], samples) -> List[Tuple[float, float]]:
    k = model.arity
    d_a, d_b, d_mixed = samples
    n = len(d_a)
    out = []
    for l in l_values:
        integrand = d_a ** l + (k - 1) * d_b ** l - (d_mixed ** l).sum(axis=1)
        stderr = float(integrand.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        out.append((float(integrand.mean()), stderr))
    return out


def _pairs(family_size: int, n_pairs: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    pairs = [(a, b) for a in range(family_size) for b in range(family_size)]
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order[:n_pairs]]


def pos_cell(model: Model, l: int, pair_index: int, outer_samples: int, seed: int,
             pi_family_size: int = 8, family: Optional[Sequence[Any]] = None) -> Dict[str, Any]:
    """Re-evaluate a single POS cell exactly as check_pos does."""
    family, pairs = _family_and_pairs(model, pi_family_size, seed, family)
    a, b = pairs[pair_index]
    rng = stream(seed, "conditions.pos", pair_index)
    samples = _pos_samples(model, family[a], family[b], a == b, outer_samples, rng)
    estimate, stderr = _pos_estimates(model, [l], samples)[0]
    return {"l": l, "pair_index": pair_index, "estimate": estimate, "stderr": stderr,
            "pi": family[a].describe(), "pi_prime": family[b].describe(), "seed": seed}


def _family_and_pairs(model: Model, pi_family_size: int, seed: int, family):
    rng = stream(seed, "conditions.pos.family")
    if family is None:
        family = stress_family(model.omega_size, rng)
    validate_mean_uniform(family, model.omega_size)
    return family, _pairs(len(family), pi_family_size, rng)


@tracer.start_as_current_span("conditions.check_pos")
def check_pos(model: Model, l_max: int = 6, outer_samples: int = 10_000, pi_family_size: int = 8,
              seed: int = 0, family: Optional[Sequence[Any]] = None,
              pass_sigmas: float = DEFAULT_CONFIG.pos_pass_sigmas,
              fail_sigmas: float = DEFAULT_CONFIG.pos_fail_sigmas,
              atol: float = DEFAULT_CONFIG.pos_atol) -> ConditionReport:
    if l_max < 2 or outer_samples < 10_000:
        raise ParameterError("need l_max >= 2 and outer_samples >= 10^4",
                             l_max=l_max, outer_samples=outer_samples)
    family, pairs = _family_and_pairs(model, pi_family_size, seed, family)
    l_values = list(range(2, l_max + 1))

    cells = []
    for pair_index, (a, b) in enumerate(pairs):
        rng = stream(seed, "conditions.pos", pair_index)
        samples = _pos_samples(model, family[a], family[b], a == b, outer_samples, rng)
        for l, (estimate, stderr) in zip(l_values, _pos_estimates(model, l_values, samples)):
            cells.append({"l": l, "pair_index": pair_index, "pair": [a, b],
                          "estimate": estimate, "stderr": stderr})

    worst = min(cells, key=lambda c: c["estimate"] + fail_sigmas * c["stderr"])
    failing = worst["estimate"] < -fail_sigmas * worst["stderr"] - atol
    passing = all(c["estimate"] >= -pass_sigmas * c["stderr"] - atol for c in cells)
    verdict = Verdict.FAIL if failing else Verdict.PASS if passing else Verdict.INCONCLUSIVE

    report = ConditionReport(
        Condition.POS, verdict,
        max_residual=max(0.0, -min(c["estimate"] for c in cells)),
        samples_used=outer_samples * len(pairs),
        details={"family": [law.describe() for law in family], "cells": cells,
                 "l_max": l_max, "seed": seed,
                 "note": "pass means no violation found on this family"},
    )
    if failing:
        a, b = worst["pair"]
        report.witness = {"l": worst["l"], "pair_index": worst["pair_index"],
                          "estimate": worst["estimate"], "stderr": worst["stderr"],
                          "pi": family[a].describe(), "pi_prime": family[b].describe(),
                          "outer_samples": outer_samples, "seed": seed}
    logging.info(f"POS {verdict.value} on {len(cells)} cells for {model.kind.value}")
    return report


def check_all(model: Model, seed: int = 0, grid_resolution: int = 20, random_trials: int = 1000,
              l_max: int = 6, outer_samples: int = 10_000,
              pi_family_size: int = 8) -> List[ConditionReport]:
    with tracer.start_as_current_span("conditions.check_all") as span:
        instrument_span(span, "conditions", kind=model.kind.value, seed=seed)
        return [
            check_sym(model),
            check_bal(model, grid_resolution, random_trials, seed),
            check_pos(model, l_max, outer_samples, pi_family_size, seed),
        ]
