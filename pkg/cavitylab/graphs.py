import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson

from .errors import InfeasibleTruthError, ParameterError
from .models import Model
from .rng import stream
from .tracing import get_tracer

tracer = get_tracer(__name__)


@dataclass(frozen=True, eq=False)
class Assignment:
    spins: np.ndarray
    q: int

    def __post_init__(self):
        spins = np.array(self.spins, dtype=np.int64).ravel()
        if spins.size and (spins.min() < 0 or spins.max() >= self.q):
            raise ParameterError("assignment spins must lie in [0, q)", q=self.q)
        spins.setflags(write=False)
        object.__setattr__(self, "spins", spins)

    @property
    def n(self) -> int:
        return len(self.spins)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.spins, minlength=self.q)

    def tolist(self) -> List[int]:
        return self.spins.tolist()


@dataclass(frozen=True, eq=False)
class FactorGraphInstance:
    """Variables 0..n-1, m constraints (psi index, ordered neighbour tuple) and hard pins."""
    n_vars: int
    psi_idx: np.ndarray
    neighbors: np.ndarray
    pinned: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    truth: Optional[Assignment] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_vars < 1:
            raise ParameterError("an instance needs at least one variable", n=self.n_vars)
        psi_idx = np.array(self.psi_idx, dtype=np.int64).ravel()
        neighbors = np.array(self.neighbors, dtype=np.int64)
        if neighbors.size == 0 and neighbors.ndim != 2:
            neighbors = np.zeros((0, 0), dtype=np.int64)
        if neighbors.ndim != 2 or len(neighbors) != len(psi_idx):
            raise ParameterError("neighbors must be an (m, k) array matching psi_idx")
        if neighbors.size and (neighbors.min() < 0 or neighbors.max() >= self.n_vars):
            raise ParameterError("neighbor index out of range", n=self.n_vars)
        pinned = np.array(self.pinned, dtype=np.int64).reshape(-1, 2)
        if pinned.size and (pinned[:, 0].min() < 0 or pinned[:, 0].max() >= self.n_vars or pinned[:, 1].min() < 0):
            raise ParameterError("pinned variable out of range", n=self.n_vars)
        if self.truth is not None:
            if self.truth.n != self.n_vars:
                raise ParameterError("truth length differs from n", n=self.n_vars, truth=self.truth.n)
            if self.metadata.get("pins_from_truth") and pinned.size:
                if np.any(self.truth.spins[pinned[:, 0]] != pinned[:, 1]):
                    raise ParameterError("pins disagree with the stored truth")
        for name, arr in (("psi_idx", psi_idx), ("neighbors", neighbors), ("pinned", pinned)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def m(self) -> int:
        return len(self.psi_idx)

    @property
    def constraints(self) -> List[Tuple[int, Tuple[int, ...]]]:
        return [(int(p), tuple(int(v) for v in nb)) for p, nb in zip(self.psi_idx, self.neighbors)]

    def check_model(self, model: Model):
        if self.m and self.neighbors.shape[1] != model.arity:
            raise ParameterError("constraint arity differs from the model", k=model.arity,
                                 arity=int(self.neighbors.shape[1]))
        if self.m and self.psi_idx.max() >= model.n_weights:
            raise ParameterError("weight function index out of range", n_weights=model.n_weights)
        if self.pinned.size and self.pinned[:, 1].max() >= model.omega_size:
            raise ParameterError("pinned spin out of range", q=model.omega_size)
        if self.truth is not None and self.truth.q != model.omega_size:
            raise ParameterError("truth lives on a different spin set", q=model.omega_size)

    def unary(self, q: int) -> np.ndarray:
        """0/1 unary factors of the pins, shape (n, q)."""
        unary = np.ones((self.n_vars, q))
        for v, s in self.pinned:
            row = np.zeros(q)
            row[s] = 1.0
            unary[v] *= row
        return unary

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n_vars,
            "constraints": [[p, list(nb)] for p, nb in self.constraints],
            "pinned": self.pinned.tolist(),
            "truth": self.truth.tolist() if self.truth is not None else None,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], q: int = None) -> "FactorGraphInstance":
        constraints = data.get("constraints", [])
        truth = data.get("truth")
        if truth is not None:
            q = q or int(max(truth)) + 1
            truth = Assignment(truth, q)
        return cls(
            n_vars=int(data["n"]),
            psi_idx=[c[0] for c in constraints],
            neighbors=[c[1] for c in constraints],
            pinned=data.get("pinned", []),
            truth=truth,
            metadata=dict(data.get("metadata", {})),
        )

    def save(self, path: Union[str, Path]):
        Path(path).write_bytes(orjson.dumps(self.to_dict(), option=orjson.OPT_INDENT_2))

    @classmethod
    def load(cls, path: Union[str, Path], q: int = None) -> "FactorGraphInstance":
        return cls.from_dict(orjson.loads(Path(path).read_bytes()), q)


def _constraint_count(n: int, k: int, m: Optional[int], d: Optional[float],
                      rng: np.random.Generator) -> int:
    if n < 1:
        raise ParameterError("n must be positive", n=n)
    if (m is None) == (d is None):
        raise ParameterError("give exactly one of m and d")
    if m is not None:
        if m < 0:
            raise ParameterError("m must be non-negative", m=m)
        return int(m)
    if d < 0:
        raise ParameterError("d must be non-negative", d=d)
    return int(rng.poisson(d * n / k))


@tracer.start_as_current_span("graphs.gen_null")
def gen_null(n: int, model: Model, seed: int, m: int = None, d: float = None) -> FactorGraphInstance:
    """Null model: uniform ordered neighbourhoods, weight functions drawn from the prior."""
    rng = stream(seed, "graphs.null")
    m = _constraint_count(n, model.arity, m, d, rng)
    neighbors = rng.integers(n, size=(m, model.arity))
    psi = rng.choice(model.n_weights, size=m, p=model.prior)
    return FactorGraphInstance(n, psi, neighbors,
                               metadata={"generator": "null", "seed": seed, "d": d, "m": m})


def teacher_pattern_weights(model: Model, truth: Assignment) -> np.ndarray:
    """p(psi) psi(tau) prod_j |class(tau_j)|, shape (|Psi|, q, ..., q).

    Summing the planted constraint law over the variables of each spin class
    leaves exactly these weights; an empty class zeroes every pattern using it.
    """
    counts = truth.class_counts().astype(np.float64)
    weights = model.prior.reshape((-1,) + (1,) * model.arity) * model.tables
    for j in range(model.arity):
        shape = [1] * (model.arity + 1)
        shape[j + 1] = model.omega_size
        weights = weights * counts.reshape(shape)
    return weights


def _class_members(truth: Assignment) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.argsort(truth.spins, kind="stable")
    counts = truth.class_counts()
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return order, starts, counts


@tracer.start_as_current_span("graphs.gen_teacher")
def gen_teacher(n: int, model: Model, seed: int, m: int = None, d: float = None,
                truth: Union[Assignment, Sequence[int], None] = None) -> FactorGraphInstance:
    """Planted model: each constraint drawn proportional to p(psi) psi(truth on its neighbours)."""
    rng = stream(seed, "graphs.teacher")
    q, k = model.omega_size, model.arity
    if truth is None:
        truth = Assignment(stream(seed, "graphs.truth").integers(q, size=n), q)
    elif not isinstance(truth, Assignment):
        truth = Assignment(truth, q)
    if truth.n != n or truth.q != q:
        raise ParameterError("truth does not match n and q", n=n, q=q)
    m = _constraint_count(n, k, m, d, rng)

    weights = teacher_pattern_weights(model, truth).ravel()
    total = weights.sum()
    if not total > 0:
        raise InfeasibleTruthError("no constraint has positive weight under the truth",
                                   class_counts=truth.class_counts().tolist())
    draws = rng.choice(weights.size, size=m, p=weights / total)
    psi, *pattern = np.unravel_index(draws, (model.n_weights,) + (q,) * k)
    pattern = np.stack(pattern, axis=1)

    # uniform variable within each required spin class
    order, starts, counts = _class_members(truth)
    offsets = np.floor(rng.random((m, k)) * counts[pattern]).astype(np.int64)
    neighbors = order[starts[pattern] + offsets]

    logging.debug(f"Planted {m} constraints on {n} variables")
    return FactorGraphInstance(n, psi, neighbors, truth=truth,
                               metadata={"generator": "teacher", "seed": seed, "d": d, "m": m})


@tracer.start_as_current_span("graphs.pin")
def pin(instance: FactorGraphInstance, T: float, seed: int,
        truth: Assignment = None, theta: float = None) -> FactorGraphInstance:
    """Pin each variable to its truth spin with probability theta / n, theta ~ U[0, T]."""
    truth = truth if truth is not None else instance.truth
    if truth is None:
        raise ParameterError("pinning needs a truth assignment")
    if T < 0:
        raise ParameterError("T must be non-negative", T=T)
    rng = stream(seed, "graphs.pin")
    n = instance.n_vars
    if theta is None:
        theta = float(rng.uniform(0, T)) if T > 0 else 0.0
    elif theta < 0:
        raise ParameterError("theta must be non-negative", theta=theta)
    chosen = np.flatnonzero(rng.random(n) < min(theta / n, 1.0))
    new_pins = np.stack([chosen, truth.spins[chosen]], axis=1)
    metadata = dict(instance.metadata, pins_from_truth=True, theta=theta, T=T, pin_seed=seed)
    return FactorGraphInstance(n, instance.psi_idx, instance.neighbors,
                               np.concatenate([instance.pinned, new_pins]), truth, metadata)


@tracer.start_as_current_span("graphs.gen_tree")
def gen_tree(n: int, model: Model, seed: int) -> FactorGraphInstance:
    """Random (hyper)tree: every new constraint joins one old variable to k - 1 new ones.

    The instance has 1 + f (k - 1) variables with f = (n - 1) // (k - 1), which is n for pairs.
    """
    if n < 1:
        raise ParameterError("n must be positive", n=n)
    rng = stream(seed, "graphs.tree")
    k = model.arity
    f = (n - 1) // (k - 1)
    neighbors = np.empty((f, k), dtype=np.int64)
    size = 1
    for a in range(f):
        fresh = np.arange(size, size + k - 1)
        anchor = rng.integers(size)
        slot = rng.integers(k)
        neighbors[a] = np.insert(fresh, slot, anchor)
        size += k - 1
    psi = rng.choice(model.n_weights, size=f, p=model.prior)
    return FactorGraphInstance(size, psi, neighbors, metadata={"generator": "tree", "seed": seed})
