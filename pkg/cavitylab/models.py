import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import orjson
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError
from scipy.special import xlogy

from .errors import ParameterError, UnsupportedModelError
from .tracing import get_tracer

tracer = get_tracer(__name__)

PRIOR_TOL = 1e-12
WEIGHT_CAP = 2.0


class ModelKind(Enum):
    POTTS = "potts"
    COLORING = "coloring_closed_form"
    SBM = "sbm"
    LDGM = "ldgm"
    KSAT = "ksat"
    NAESAT = "naesat"
    HYPERGRAPH_POTTS = "hypergraph_potts"
    CUSTOM = "custom"


# Kinds whose single weight function is the pair Potts weight 1 - c*1{s=t}
POTTS_KINDS = (ModelKind.POTTS, ModelKind.SBM, ModelKind.COLORING)


class ModelSpec(BaseModel):
    """JSON shape of a model, e.g. {"kind": "potts", "q": 3, "beta": 0.693147}."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: ModelKind
    q: Optional[int] = None
    k: Optional[int] = None
    beta: Optional[float] = None
    c: Optional[float] = None
    eta: Optional[float] = None
    d: Optional[float] = None
    tables: Optional[List[Any]] = None
    prior: Optional[List[float]] = None

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude_none=True)


@dataclass(frozen=True, eq=False)
class WeightFunction:
    """Dense read-only table Omega^k -> [0, 2), axis i is the i-th neighbour."""
    table: np.ndarray

    def __post_init__(self):
        table = np.array(self.table, dtype=np.float64)
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def omega_size(self) -> int:
        return self.table.shape[0]

    @property
    def arity(self) -> int:
        return self.table.ndim

    def __call__(self, *spins: int) -> float:
        return float(self.table[spins])


@dataclass(frozen=True, eq=False)
class Model:
    kind: ModelKind
    omega_size: int
    arity: int
    weights: Tuple[WeightFunction, ...]
    prior: np.ndarray
    params: Dict[str, Any] = field(default_factory=dict)
    spec: Optional[ModelSpec] = None

    def __post_init__(self):
        q, k = self.omega_size, self.arity
        if q < 2 or k < 2:
            raise ParameterError("need q >= 2 and k >= 2", q=q, k=k)
        if not self.weights:
            raise ParameterError("a model needs at least one weight function")
        for i, w in enumerate(self.weights):
            if w.table.shape != (q,) * k:
                raise ParameterError("weight table has the wrong shape", index=i,
                                     shape=list(w.table.shape), expected=[q] * k)

        prior = np.array(self.prior, dtype=np.float64)
        if prior.shape != (len(self.weights),):
            raise ParameterError("prior length must match the number of weight functions")
        if np.any(prior < 0) or abs(math.fsum(prior) - 1.0) > PRIOR_TOL:
            raise ParameterError("prior masses must be non-negative and sum to 1",
                                 prior=prior.tolist())
        prior.setflags(write=False)
        object.__setattr__(self, "prior", prior)

        tables = np.stack([w.table for w in self.weights])
        if self.kind is ModelKind.COLORING:
            if np.any(tables < 0) or np.any(tables > WEIGHT_CAP):
                raise ParameterError("coloring weights must lie in [0, 2]")
        elif np.any(tables <= 0) or np.any(tables >= WEIGHT_CAP):
            raise ParameterError("weight entries must lie in the open interval (0, 2)",
                                 min=float(tables.min()), max=float(tables.max()))
        if self.kind is ModelKind.LDGM and (len(self.weights) != 2 or not np.allclose(prior, 0.5, rtol=0, atol=PRIOR_TOL)):
            raise ParameterError("ldgm needs two weight functions with prior 1/2 each")

    @cached_property
    def tables(self) -> np.ndarray:
        """Stack of shape (|Psi|, q, ..., q)."""
        tables = np.stack([w.table for w in self.weights])
        tables.setflags(write=False)
        return tables

    @cached_property
    def flat_tables(self) -> np.ndarray:
        return self.tables.reshape(len(self.weights), -1)

    @cached_property
    def mean_table(self) -> np.ndarray:
        """E[Psi(tau)] for every tau."""
        mean = np.tensordot(self.prior, self.tables, axes=1)
        mean.setflags(write=False)
        return mean

    @cached_property
    def slot_tables(self) -> np.ndarray:
        """slot_tables[h, p] is table p with axis h moved first, shape (q, q^(k-1))."""
        q, k = self.omega_size, self.arity
        moved = np.stack([
            np.stack([np.moveaxis(t, h, 0).reshape(q, -1) for t in self.tables])
            for h in range(k)
        ])
        moved.setflags(write=False)
        return moved

    @property
    def n_weights(self) -> int:
        return len(self.weights)

    @property
    def is_soft(self) -> bool:
        return self.kind is not ModelKind.COLORING

    @property
    def spin_values(self) -> np.ndarray:
        """Physical spin values; index 0 is +1 for binary models."""
        if self.omega_size == 2 and self.kind in (ModelKind.LDGM, ModelKind.KSAT, ModelKind.NAESAT):
            return np.array([1, -1])
        return np.arange(self.omega_size)

    def to_dict(self) -> Dict[str, Any]:
        return model_spec(self).to_dict()


def model_spec(model: Model) -> ModelSpec:
    """The spec a model was built from; hand-assembled models come back as custom tables."""
    if model.spec is not None:
        return model.spec
    return ModelSpec(kind=ModelKind.CUSTOM, q=model.omega_size, k=model.arity,
                     tables=model.flat_tables.tolist(), prior=model.prior.tolist())


def _coupling(spec: ModelSpec) -> float:
    """c from either c or beta (c = 1 - exp(-beta)); c = 1 is refused."""
    if spec.c is not None and spec.beta is not None:
        raise ParameterError("give either beta or c, not both")
    if spec.c is not None:
        c = spec.c
    elif spec.beta is not None:
        if not spec.beta > 0:
            raise ParameterError("beta must be positive", beta=spec.beta)
        c = -math.expm1(-spec.beta)
    else:
        raise ParameterError(f"{spec.kind.value} needs beta or c")
    if c == 1.0:
        raise UnsupportedModelError(
            "c = 1 is only available through coloring_closed_form", kind=spec.kind.value)
    if not 0 < c < 1:
        raise ParameterError("c must lie in (0, 1)", c=c)
    return c


def _require(spec: ModelSpec, name: str, low: int) -> int:
    value = getattr(spec, name)
    if value is None or value < low:
        raise ParameterError(f"{spec.kind.value} needs {name} >= {low}", **{name: value})
    return value


def _fixed(spec: ModelSpec, name: str, value: int) -> int:
    given = getattr(spec, name)
    if given is not None and given != value:
        raise ParameterError(f"{spec.kind.value} has {name} = {value}", **{name: given})
    return value


def potts_table(q: int, k: int, c: float) -> np.ndarray:
    """1 - c * 1{all k spins equal}."""
    table = np.ones((q,) * k)
    diag = np.arange(q)
    table[(diag,) * k] -= c
    return table


def _sign_patterns(k: int) -> List[Tuple[int, ...]]:
    return list(itertools.product(range(2), repeat=k))


def sbm_degrees(q: int, d: float, beta: float) -> Tuple[float, float]:
    """(d_in, d_out) of the stochastic block model with average degree d."""
    e = math.exp(-beta)
    denom = q - 1 + e
    return d * q * e / denom, d * q / denom


def d_alg(q: int, beta: float) -> float:
    """((q - 1 + e^-beta) / (1 - e^-beta))^2."""
    e = math.exp(-beta)
    return ((q - 1 + e) / -math.expm1(-beta)) ** 2


@tracer.start_as_current_span("models.make_model")
def make_model(spec: Union[ModelSpec, Dict[str, Any]]) -> Model:
    if not isinstance(spec, ModelSpec):
        try:
            spec = ModelSpec.model_validate(spec)
        except ValidationError as e:
            raise ParameterError("invalid model spec", errors=orjson.loads(e.json())) from e

    kind = spec.kind
    params: Dict[str, Any] = {}

    if kind in (ModelKind.POTTS, ModelKind.SBM):
        q = _require(spec, "q", 2)
        k = _fixed(spec, "k", 2)
        c = _coupling(spec)
        params.update(q=q, c=c, beta=spec.beta if spec.beta is not None else -math.log1p(-c))
        if kind is ModelKind.SBM and spec.d is not None:
            if spec.d < 0:
                raise ParameterError("d must be non-negative", d=spec.d)
            d_in, d_out = sbm_degrees(q, spec.d, params["beta"])
            params.update(d=spec.d, d_in=d_in, d_out=d_out)
        weights = [potts_table(q, 2, c)]
        prior = [1.0]
    elif kind is ModelKind.COLORING:
        q = _require(spec, "q", 2)
        k = _fixed(spec, "k", 2)
        if spec.beta is not None or (spec.c is not None and spec.c != 1.0):
            raise ParameterError("coloring_closed_form is the c = 1 Potts model")
        params.update(q=q, c=1.0)
        weights = [potts_table(q, 2, 1.0)]
        prior = [1.0]
    elif kind is ModelKind.LDGM:
        q = _fixed(spec, "q", 2)
        k = _require(spec, "k", 2)
        eta = spec.eta
        if eta is None or not 0 < eta < 1:
            raise ParameterError("ldgm needs eta in (0, 1)", eta=eta)
        params.update(q=2, k=k, eta=eta)
        parity = np.indices((2,) * k).sum(axis=0) % 2
        product = 1 - 2 * parity
        weights = [1 + (1 - 2 * eta) * J * product for J in (1, -1)]
        prior = [0.5, 0.5]
    elif kind in (ModelKind.KSAT, ModelKind.NAESAT):
        q = _fixed(spec, "q", 2)
        k = _require(spec, "k", 2)
        c = _coupling(spec)
        params.update(q=2, k=k, c=c)
        weights = []
        for pattern in _sign_patterns(k):
            table = np.ones((2,) * k)
            table[pattern] -= c
            if kind is ModelKind.NAESAT:
                table[tuple(1 - s for s in pattern)] -= c
            weights.append(table)
        prior = [1.0 / len(weights)] * len(weights)
    elif kind is ModelKind.HYPERGRAPH_POTTS:
        q = _require(spec, "q", 2)
        k = _require(spec, "k", 2)
        c = _coupling(spec)
        params.update(q=q, k=k, c=c)
        weights = [potts_table(q, k, c)]
        prior = [1.0]
    else:
        q = _require(spec, "q", 2)
        k = _require(spec, "k", 2)
        if not spec.tables:
            raise ParameterError("custom models need tables")
        weights = []
        for i, raw in enumerate(spec.tables):
            table = np.asarray(raw, dtype=np.float64)
            if table.size != q ** k:
                raise ParameterError("custom table has the wrong size", index=i,
                                     size=int(table.size), expected=q ** k)
            weights.append(table.reshape((q,) * k))
        prior = spec.prior if spec.prior is not None else [1.0 / len(weights)] * len(weights)
        params.update(q=q, k=k)

    logging.debug(f"Built {kind.value} model with q={q}, k={k}, |Psi|={len(weights)}")
    return Model(kind=kind, omega_size=q, arity=k,
                 weights=tuple(WeightFunction(w) for w in weights),
                 prior=np.asarray(prior, dtype=np.float64), params=params, spec=spec)


def load_model(source: Union[str, Path, Dict[str, Any], ModelSpec]) -> Model:
    """Model from a spec object, a dict, inline JSON, or a JSON/YAML file path."""
    if isinstance(source, (dict, ModelSpec)):
        return make_model(source)
    text = str(source).strip()
    if text.startswith("{"):
        return make_model(orjson.loads(text))
    path = Path(text)
    if not path.exists():
        raise ParameterError("model spec is neither inline JSON nor an existing file", source=text)
    if path.suffix == ".json":
        return make_model(orjson.loads(path.read_bytes()))
    return make_model(yaml.safe_load(path.read_text()))


def weight_sum(model: Model) -> float:
    """sum_tau E[Psi(tau)], exact summation."""
    return math.fsum(model.mean_table.ravel())


def xi(model: Model) -> float:
    return weight_sum(model) / model.omega_size ** model.arity


def rs_value(model: Model, d: float) -> float:
    """(1 - d) ln q + (d / k) ln sum_tau E[Psi(tau)]."""
    if d < 0:
        raise ParameterError("d must be non-negative", d=d)
    q, k = model.omega_size, model.arity
    return (1 - d) * math.log(q) + (d / k) * math.log(weight_sum(model))


def entropy_term(model: Model, d: float) -> float:
    """(d / (k xi q^k)) sum_tau E[Lambda(Psi(tau))]."""
    q, k = model.omega_size, model.arity
    total = math.fsum((model.prior[:, None] * xlogy(model.flat_tables, model.flat_tables)).ravel())
    return d * total / (k * xi(model) * q ** k)


def expected_weight(tables: np.ndarray, messages: np.ndarray) -> np.ndarray:
    """sum_tau psi_b(tau) prod_j mu_bj(tau_j) for a batch.

    tables has shape (B, q^k) (one row per sample), messages (B, k, q).
    """
    B, k, q = messages.shape
    out = tables.reshape(B, -1)
    for j in range(k):
        out = np.einsum("bq,bqr->br", messages[:, j], out.reshape(B, q, -1))
    return out.reshape(B)
