import itertools
from dataclasses import dataclass
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np

from .config import DEFAULT_CONFIG
from .errors import BudgetExceededError, ParameterError
from .graphs import Assignment
from .tracing import get_tracer

tracer = get_tracer(__name__)


@dataclass
class OverlapStats:
    rho: np.ndarray
    agreement: float
    best_permutation: Tuple[int, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {"rho": self.rho.tolist(), "agreement": self.agreement,
                "best_permutation": list(self.best_permutation)}


def _spins(x: Union[Assignment, Sequence[int], np.ndarray]) -> np.ndarray:
    return x.spins if isinstance(x, Assignment) else np.asarray(x, dtype=np.int64).ravel()


@tracer.start_as_current_span("overlap.overlap")
def overlap(sigma: Union[Assignment, Sequence[int]], tau: Union[Assignment, Sequence[int]],
            q: int = None, max_q: int = DEFAULT_CONFIG.max_overlap_q) -> OverlapStats:
    """q x q overlap matrix and the permutation-maximised agreement.

    A = (q max_kappa sum_i rho[i, kappa(i)] - 1) / (q - 1), maximised over all q! permutations.
    """
    s, t = _spins(sigma), _spins(tau)
    if len(s) != len(t) or len(s) == 0:
        raise ParameterError("assignments must be non-empty and of equal length",
                             len_sigma=len(s), len_tau=len(t))
    if q is None:
        q = next((x.q for x in (sigma, tau) if isinstance(x, Assignment)), None)
        q = q or max(2, int(max(s.max(), t.max())) + 1)
    if q < 2:
        raise ParameterError("need q >= 2", q=q)
    if q > max_q:
        raise BudgetExceededError(f"agreement enumerates q! permutations, q is capped at {max_q}",
                                  required=q, budget=max_q)
    if min(s.min(), t.min()) < 0 or max(s.max(), t.max()) >= q:
        raise ParameterError("spins must lie in [0, q)", q=q)

    counts = np.zeros((q, q), dtype=np.int64)
    np.add.at(counts, (s, t), 1)
    n = len(s)
    rows = np.arange(q)
    best_count, best_perm = -1, None
    for perm in itertools.permutations(range(q)):
        matched = int(counts[rows, perm].sum())
        if matched > best_count:
            best_count, best_perm = matched, perm
    # integer arithmetic keeps A(sigma, sigma) exactly 1
    agreement = (q * best_count - n) / ((q - 1) * n)
    return OverlapStats(counts / n, float(agreement), tuple(best_perm))
