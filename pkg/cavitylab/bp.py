import logging
import math
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np
from scipy.special import logsumexp

from .errors import ParameterError
from .graphs import FactorGraphInstance
from .models import Model, expected_weight
from .popdyn import factor_messages
from .tracing import get_tracer, instrument_span

tracer = get_tracer(__name__)

TINY = 1e-300


@dataclass
class BPResult:
    log_z: float
    marginals: np.ndarray
    converged: bool
    iterations: int
    reinitialized: bool = False
    zero_normalizer: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "log_z": self.log_z if math.isfinite(self.log_z) else None,
            "marginals": self.marginals.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "reinitialized": self.reinitialized,
            "zero_normalizer": self.zero_normalizer,
        }


class _EdgeLayout:
    """Edge e = a * k + h joins constraint a (slot h) to variable neighbors[a, h]."""

    def __init__(self, instance: FactorGraphInstance, k: int):
        self.m, self.k = instance.m, k
        self.var = instance.neighbors.reshape(-1)
        self.psi = np.repeat(instance.psi_idx, k)
        self.slot = np.tile(np.arange(k), self.m)
        # the other k - 1 edges of the same constraint, ascending slot order
        others = np.array([[j for j in range(k) if j != h] for h in range(k)], dtype=np.int64)
        self.others = (np.arange(self.m)[:, None, None] * k + others[None]).reshape(-1, k - 1)


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / x.sum(axis=1, keepdims=True)


def _variable_logs(layout: _EdgeLayout, log_unary: np.ndarray, log_in: np.ndarray) -> np.ndarray:
    """ln of unary times every incoming factor message, per variable."""
    total = log_unary.copy()
    np.add.at(total, layout.var, log_in)
    return total


def _variable_to_factor(layout: _EdgeLayout, total: np.ndarray, log_in: np.ndarray) -> np.ndarray:
    log_out = total[layout.var] - log_in
    return np.exp(log_out - logsumexp(log_out, axis=1, keepdims=True))


@tracer.start_as_current_span("bp.bp_run")
def bp_run(instance: FactorGraphInstance, model: Model, max_iters: int = 200, damping: float = 0.0,
           tol: float = 1e-12) -> BPResult:
    """Flooding BP with pins as 0/1 unary factors; returns the Bethe log-partition function."""
    if max_iters < 1:
        raise ParameterError("max_iters must be at least 1", max_iters=max_iters)
    if not 0 <= damping < 1:
        raise ParameterError("damping must lie in [0, 1)", damping=damping)
    instance.check_model(model)
    q, k = model.omega_size, model.arity
    layout = _EdgeLayout(instance, k)
    unary = instance.unary(q)
    log_unary = np.log(np.maximum(unary, TINY))

    def initial() -> np.ndarray:
        return _normalize(np.maximum(unary[layout.var], TINY))

    to_factor = initial()
    to_var = np.full((layout.m * k, q), 1.0 / q)
    converged = reinitialized = zero_normalizer = False
    iterations = 0

    for iterations in range(1, max_iters + 1):
        raw = factor_messages(model, layout.psi, layout.slot, to_factor[layout.others])
        sums = raw.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            if reinitialized:
                zero_normalizer = True
                logging.warning(f"BP factor normaliser vanished again after re-initialisation "
                                f"at iteration {iterations}")
                break
            reinitialized = True
            logging.info(f"BP factor normaliser vanished at iteration {iterations}; re-initialising")
            to_factor = initial()
            to_var = np.full((layout.m * k, q), 1.0 / q)
            continue
        new = (1 - damping) * raw / sums + damping * to_var
        delta = float(np.abs(new - to_var).max()) if new.size else 0.0
        to_var = new
        log_in = np.log(np.maximum(to_var, TINY))
        to_factor = _variable_to_factor(layout, _variable_logs(layout, log_unary, log_in), log_in)
        if delta < tol:
            converged = True
            break

    log_in = np.log(np.maximum(to_var, TINY))
    total = _variable_logs(layout, log_unary, log_in)
    to_factor = _variable_to_factor(layout, total, log_in)
    marginals = np.exp(total - logsumexp(total, axis=1, keepdims=True))

    with tracer.start_as_current_span("bp.bethe_assembly") as span:
        instrument_span(span, "bp", n=instance.n_vars, m=layout.m, converged=converged,
                        iterations=iterations)
        # sum_a ln Z_a + sum_v ln Z_v - sum_e ln Z_e
        log_z = float(np.sum(logsumexp(total, axis=1)))
        if layout.m:
            z_a = expected_weight(model.flat_tables[instance.psi_idx],
                                  to_factor.reshape(layout.m, k, q))
            z_e = np.sum(to_factor * to_var, axis=1)
            with np.errstate(divide="ignore"):
                log_z += float(np.sum(np.log(z_a)) - np.sum(np.log(z_e)))
    return BPResult(log_z, marginals, converged, iterations, reinitialized, zero_normalizer)
