import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .bethe import EstimateWithError, bethe_functional, bethe_potts
from .config import DEFAULT_CONFIG
from .errors import ParameterError
from .models import POTTS_KINDS, Model, make_model, rs_value
from .popdyn import InitKind, Population, run_to_fixed_point
from .rng import derive_seed, param_key
from .tracing import get_tracer, instrument_span

tracer = get_tracer(__name__)


@dataclass
class PopdynOptions:
    N: int = 10_000
    max_sweeps: int = 200
    tol: float = 1e-3
    window: int = 10
    epsilon: float = 0.05
    projections: int = 32


@dataclass
class BetheOptions:
    M: int = 100_000
    batches: int = DEFAULT_CONFIG.bethe_batches


class Decision(Enum):
    POSITIVE = "positive"
    NON_POSITIVE = "non_positive"
    UNDECIDED = "undecided"


class DecidedBy(Enum):
    SIGN_CHANGE = "sign_change"
    RANGE_EXHAUSTED = "range_exhausted"
    UNDECIDED = "undecided"


def decide(estimate: float, stderr: float,
           decision_sigmas: float = DEFAULT_CONFIG.decision_sigmas,
           undecided_sigmas: float = DEFAULT_CONFIG.undecided_sigmas,
           atol: float = DEFAULT_CONFIG.decision_atol) -> Decision:
    """Positive above 3 stderr, non-positive at or below 2 stderr, undecided in between."""
    if estimate > decision_sigmas * stderr + atol:
        return Decision.POSITIVE
    if estimate <= undecided_sigmas * stderr + atol:
        return Decision.NON_POSITIVE
    return Decision.UNDECIDED


@dataclass
class GapResult:
    estimate: EstimateWithError
    fixed_point_kind: InitKind
    rs_value: float
    bethe: Dict[str, EstimateWithError] = field(default_factory=dict)
    converged: Dict[str, bool] = field(default_factory=dict)
    populations: Dict[str, Population] = field(default_factory=dict, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gap": self.estimate.to_dict(),
            "fixed_point_kind": self.fixed_point_kind.value,
            "rs_value": self.rs_value,
            "bethe": {k: v.to_dict() for k, v in self.bethe.items()},
            "converged": self.converged,
        }


def evaluate_bethe(model: Model, d: float, population: Population, options: BetheOptions,
                   seed: int, threads: int = None) -> EstimateWithError:
    """B(d, pi) through the Potts closed form where it applies, the general functional otherwise."""
    if model.kind in POTTS_KINDS:
        return bethe_potts(model.omega_size, d, model.params["c"], population, options.M, seed,
                           options.batches, threads)
    return bethe_functional(population, model, d, options.M, seed, options.batches, threads=threads)


def gap(model: Model, d: float, popdyn_opts: PopdynOptions = None, bethe_opts: BetheOptions = None,
        seed: int = 0, threads: int = None) -> GapResult:
    """max over discovered fixed points of B(d, pi), minus the RS value."""
    popdyn_opts = popdyn_opts or PopdynOptions()
    bethe_opts = bethe_opts or BetheOptions()
    if d == 0:
        return GapResult(EstimateWithError.exact(0.0), InitKind.TRIVIAL, math.log(model.omega_size))

    with tracer.start_as_current_span("thresholds.gap") as span:
        instrument_span(span, "thresholds", kind=model.kind.value, d=d, seed=seed)
        rs = rs_value(model, d)
        popdyn_seed = derive_seed(seed, "thresholds.popdyn")
        bethe_seed = derive_seed(seed, "thresholds.bethe")
        result = GapResult(EstimateWithError.exact(0.0), InitKind.TRIVIAL, rs)
        for kind in InitKind:
            fp = run_to_fixed_point(kind, model, d, popdyn_opts.N, popdyn_opts.max_sweeps,
                                    popdyn_opts.tol, popdyn_opts.window, popdyn_seed,
                                    popdyn_opts.epsilon, popdyn_opts.projections, threads)
            if not fp.converged:
                logging.warning(f"{kind.value} population at d={d} did not converge "
                                f"within {popdyn_opts.max_sweeps} sweeps")
            result.converged[kind.value] = fp.converged
            result.populations[kind.value] = fp.population
            # Both fixed points share bethe_seed: common random numbers
            result.bethe[kind.value] = evaluate_bethe(model, d, fp.population, bethe_opts,
                                                      bethe_seed, threads)

        trivial, planted = result.bethe["trivial"], result.bethe["planted"]
        margin = DEFAULT_CONFIG.decision_sigmas * planted.combined_stderr(trivial)
        winner = InitKind.PLANTED if planted.mean - trivial.mean > margin else InitKind.TRIVIAL
        best = result.bethe[winner.value]
        result.fixed_point_kind = winner
        result.estimate = EstimateWithError(best.mean - rs, best.stderr, best.batches, best.samples)
        span.set_attribute("cavitylab.gap", result.estimate.mean)
        return result


@dataclass
class TraceEntry:
    param: float
    gap: float
    stderr: float
    fp_kind: str
    decision: str
    seed: int
    M: int

    def row(self) -> Dict[str, Any]:
        return {"param": self.param, "gap": self.gap, "stderr": self.stderr, "fp_kind": self.fp_kind}


@dataclass
class ThresholdResult:
    target: str
    location: float
    ci_lo: float
    ci_hi: float
    scan_trace: List[TraceEntry]
    decided_by: DecidedBy
    details: Dict[str, Any] = field(default_factory=dict)

    def trace_rows(self) -> List[Dict[str, Any]]:
        return [entry.row() for entry in self.scan_trace]

    def to_dict(self) -> Dict[str, Any]:
        def finite(x: float) -> Optional[float]:
            return x if math.isfinite(x) else None
        return {
            "target": self.target,
            "location": finite(self.location),
            "ci_lo": finite(self.ci_lo),
            "ci_hi": finite(self.ci_hi),
            "decided_by": self.decided_by.value,
            "scan_trace": [asdict(entry) for entry in self.scan_trace],
            "details": self.details,
        }


def _locate(target: str, build: Callable[[float], Tuple[Model, float]], lo: float, hi: float,
            scan_steps: int, bisect_iters: int, popdyn_opts: PopdynOptions,
            bethe_opts: BetheOptions, seed: int, threads: int) -> ThresholdResult:
    """Sequential scan for the first positive gap, then noisy bisection of the bracket.

    Undecided points are re-queried once with 2M samples before they count.
    """
    if not lo < hi:
        raise ParameterError("empty range", lo=lo, hi=hi)
    if scan_steps < 4:
        raise ParameterError("need at least 4 scan steps", scan_steps=scan_steps)
    popdyn_opts = popdyn_opts or PopdynOptions()
    bethe_opts = bethe_opts or BetheOptions()
    trace: List[TraceEntry] = []

    def query(param: float, M: int) -> Decision:
        model, d = build(param)
        point_seed = derive_seed(seed, "thresholds.point", param_key(param))
        result = gap(model, d, popdyn_opts, replace(bethe_opts, M=M), point_seed, threads)
        decision = decide(result.estimate.mean, result.estimate.stderr)
        trace.append(TraceEntry(float(param), result.estimate.mean, result.estimate.stderr,
                                result.fixed_point_kind.value, decision.value, point_seed, M))
        logging.info(f"{target} at {param:.5f}: gap {result.estimate.mean:.3e} "
                     f"+/- {result.estimate.stderr:.1e} -> {decision.value}")
        return decision

    def settle(param: float) -> Decision:
        decision = query(param, bethe_opts.M)
        if decision is Decision.UNDECIDED:
            decision = query(param, 2 * bethe_opts.M)
        return decision

    details = {"seed": seed, "range": [lo, hi], "scan_steps": scan_steps,
               "bisect_iters": bisect_iters, "popdyn": asdict(popdyn_opts),
               "bethe": asdict(bethe_opts), "sup_over": "max over discovered fixed points"}

    grid = np.linspace(lo, hi, scan_steps)
    first = settle(grid[0])
    if first is Decision.POSITIVE:
        raise ParameterError("gap is already positive at the lower end of the range",
                             lower=float(grid[0]))
    # only a decided non-positive point may close the bracket from below
    lower = float(grid[0]) if first is Decision.NON_POSITIVE else None
    upper = None
    for cur in grid[1:]:
        decision = settle(cur)
        if decision is Decision.POSITIVE:
            upper = float(cur)
            break
        if decision is Decision.NON_POSITIVE:
            lower = float(cur)
    if upper is None:
        return ThresholdResult(target, float(hi), float(hi), math.inf, trace,
                               DecidedBy.RANGE_EXHAUSTED, details)
    if lower is None:
        logging.info(f"{target}: no decided non-positive point below {upper:.5f}")
        return ThresholdResult(target, (lo + upper) / 2, float(lo), upper, trace,
                               DecidedBy.UNDECIDED, details)

    a, b = lower, upper
    for _ in range(bisect_iters):
        mid = (a + b) / 2
        decision = settle(mid)
        if decision is Decision.POSITIVE:
            b = mid
        elif decision is Decision.NON_POSITIVE:
            a = mid
        else:
            logging.info(f"{target}: undecided at {mid:.5f} after doubling M; keeping [{a}, {b}]")
            break
    return ThresholdResult(target, (a + b) / 2, a, b, trace, DecidedBy.SIGN_CHANGE, details)


@tracer.start_as_current_span("thresholds.find_d_inf")
def find_d_inf(model: Model, d_lo: float, d_hi: float, scan_steps: int = 8, bisect_iters: int = 6,
               popdyn_opts: PopdynOptions = None, bethe_opts: BetheOptions = None,
               seed: int = 0, threads: int = None) -> ThresholdResult:
    if d_lo < 0:
        raise ParameterError("d must be non-negative", d_lo=d_lo)
    return _locate("d_inf", lambda d: (model, d), d_lo, d_hi, scan_steps, bisect_iters,
                   popdyn_opts, bethe_opts, seed, threads)


@tracer.start_as_current_span("thresholds.find_beta_cond")
def find_beta_cond(q: int, d: float, beta_lo: float, beta_hi: float, scan_steps: int = 8,
                   bisect_iters: int = 6, popdyn_opts: PopdynOptions = None,
                   bethe_opts: BetheOptions = None, seed: int = 0,
                   threads: int = None) -> ThresholdResult:
    if beta_lo <= 0:
        raise ParameterError("beta must be positive", beta_lo=beta_lo)
    build = lambda beta: (make_model({"kind": "potts", "q": q, "beta": beta}), d)
    return _locate("beta_cond", build, beta_lo, beta_hi, scan_steps, bisect_iters,
                   popdyn_opts, bethe_opts, seed, threads)


def coloring_first_moment_bound(q: int) -> float:
    return (2 * q - 1) * math.log(q)


def coloring_cond_asymptotic(q: int) -> float:
    return (2 * q - 1) * math.log(q) - 2 * math.log(2)


def default_coloring_range(q: int) -> Tuple[float, float]:
    bound = coloring_first_moment_bound(q)
    return max(bound - 3, 0.1), bound + 1


@tracer.start_as_current_span("thresholds.find_d_cond_coloring")
def find_d_cond_coloring(q: int, d_lo: float = None, d_hi: float = None, scan_steps: int = 8,
                         bisect_iters: int = 6, popdyn_opts: PopdynOptions = None,
                         bethe_opts: BetheOptions = None, seed: int = 0,
                         threads: int = None) -> ThresholdResult:
    default_lo, default_hi = default_coloring_range(q)
    model = make_model({"kind": "coloring_closed_form", "q": q})
    result = _locate("d_cond_coloring", lambda d: (model, d),
                     default_lo if d_lo is None else d_lo, default_hi if d_hi is None else d_hi,
                     scan_steps, bisect_iters, popdyn_opts, bethe_opts, seed, threads)
    result.details["first_moment_bound"] = coloring_first_moment_bound(q)
    result.details["asymptotic"] = coloring_cond_asymptotic(q)
    return result
