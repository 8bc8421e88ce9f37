"""Relevance metrics between a test instance and training instances.

Every metric reduces to one of three pairwise forms over cached vectors:
negative squared distance, cosine, or dot product. The cache holds the
training-side vectors; the test side is mapped on the fly (features, or a
loss gradient optionally multiplied by a power of the Hessian/Fisher).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .dataset import Dataset, Instance
from .model import FeatureMap, Model, features, per_example_gradients, residuals
from .numerics import (
    DENSE_LIMIT,
    FisherMatrix,
    PsdFactor,
    cg_solve,
    cosine,
    default_damping,
    dense_hessian,
    empirical_fisher,
    hessian_trace,
    norm,
    training_hvp,
)

_TINY = np.finfo(np.float64).tiny


class Family(str, enum.Enum):
    L2 = "l2"
    COS = "cos"
    DOT = "dot"
    IF = "if"
    RIF = "rif"
    FK = "fk"
    GD = "gd"
    GC = "gc"
    L2_IF = "l2-if"
    L2_FK = "l2-fk"
    COS_FK = "cos-fk"
    L2_GRAD = "l2-grad"


SIMILARITY_FAMILIES = frozenset({Family.L2, Family.COS, Family.DOT})
ALIASES = {"cos-if": "rif", "cos-grad": "gc"}

# pairwise form, preconditioner, power applied to the test-side gradient
_GRADIENT_RULES = {
    Family.IF: ("dot", "hessian", None),
    Family.RIF: ("cos", "hessian", -0.5),
    Family.FK: ("dot", "fisher", None),
    Family.GD: ("dot", None, None),
    Family.GC: ("cos", None, None),
    Family.L2_IF: ("l2", "hessian", -0.5),
    Family.L2_FK: ("l2", "fisher", -0.5),
    Family.COS_FK: ("cos", "fisher", -0.5),
    Family.L2_GRAD: ("l2", None, None),
}


@dataclass(frozen=True, order=True)
class MetricId:
    family: Family
    feature_map: FeatureMap | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        fm = None if self.feature_map is None else FeatureMap(self.feature_map)
        object.__setattr__(self, "feature_map", fm)
        if (self.family in SIMILARITY_FAMILIES) != (fm is not None):
            raise ValueError(f"feature map must be given exactly for similarity metrics: {self}")

    @property
    def token(self) -> str:
        if self.feature_map is None:
            return self.family.value
        return f"{self.family.value}@{self.feature_map.value}"

    @property
    def form(self) -> str:
        if self.family in SIMILARITY_FAMILIES:
            return self.family.value
        return _GRADIENT_RULES[self.family][0]

    @property
    def is_gradient_based(self) -> bool:
        return self.family not in SIMILARITY_FAMILIES

    def __str__(self) -> str:
        return self.token


def parse_metric(token: str) -> MetricId:
    tok = token.strip().lower()
    tok = ALIASES.get(tok, tok)
    if "@" in tok:
        fam, fm = tok.split("@", 1)
        try:
            return MetricId(Family(fam), FeatureMap(fm))
        except ValueError:
            raise ValueError(f"unknown metric token {token!r}") from None
    try:
        return MetricId(Family(tok))
    except ValueError:
        raise ValueError(f"unknown metric token {token!r}") from None


def parse_metrics(tokens) -> list[MetricId]:
    if isinstance(tokens, str):
        tokens = [t for t in tokens.split(",") if t.strip()]
    return [parse_metric(t) for t in tokens]


ALL_TOKENS = (
    "l2@x", "l2@last", "l2@all", "cos@x", "cos@last", "cos@all",
    "dot@x", "dot@last", "dot@all", "if", "rif", "fk", "gd", "gc",
    "l2-if", "l2-fk", "cos-fk", "l2-grad",
)


def available_metrics(model_spec) -> list[MetricId]:
    """Metrics applicable to a model; hidden-layer maps need an MLP."""
    out = [parse_metric(t) for t in ALL_TOKENS]
    if model_spec.is_logreg:
        out = [m for m in out if m.feature_map in (None, FeatureMap.INPUT)]
    return out


# ------------------------------------------------------------------- cache


@dataclass(frozen=True)
class NumericsConfig:
    damping: float | None = None  # Hessian; None -> 0.01 * trace / p
    fisher_damping: float | None = None  # None -> same rule on the Fisher
    dense_limit: int = DENSE_LIMIT
    if_solver: str = "dense"  # or "cg"
    cg_tol: float = 1e-10
    cg_max_iter: int = 1000


@dataclass(frozen=True)
class MetricCache:
    metric: MetricId
    model: Model
    train_vectors: np.ndarray  # (N, q)
    phi_norms: np.ndarray  # norms of the dot-form feature map, for analysis
    preconditioner: PsdFactor | FisherMatrix | None = None
    test_power: float | None = None
    damping: float | None = None
    solver: str | None = None
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.train_vectors)

    def scaled(self, index: int, factor: float) -> "MetricCache":
        """Copy with training instance ``index``'s cached vector multiplied by ``factor``."""
        tv = self.train_vectors.copy()
        tv[index] *= factor
        pn = self.phi_norms.copy()
        pn[index] *= abs(factor)
        return replace(self, train_vectors=tv, phi_norms=pn)

    def scores(self, X_test, y_test=None):
        """Shorthand for :func:`score_matrix` on this cache."""
        return score_matrix(self, X_test, y_test)


def _hessian_preconditioner(model, train, cfg: NumericsConfig):
    H = dense_hessian(model, train, cfg.damping, cfg.dense_limit)
    return H, H.damping


def precompute(metric: MetricId, model: Model, train: Dataset,
               cfg: NumericsConfig | None = None) -> MetricCache:
    """Build the training-side vectors that make scoring a pure pairwise map."""
    cfg = cfg or NumericsConfig()
    if not metric.is_gradient_based:
        F = features(model, train.X, metric.feature_map)
        return MetricCache(metric, model, F, np.linalg.norm(F, axis=1))

    form, pre, power = _GRADIENT_RULES[metric.family]
    G = per_example_gradients(model, train.X, train.y)
    if pre is None:
        return MetricCache(metric, model, G, np.linalg.norm(G, axis=1))

    if pre == "hessian" and metric.family is Family.IF and cfg.if_solver == "cg":
        damping = cfg.damping
        if damping is None:
            damping = default_damping(hessian_trace(model, train, cfg.dense_limit), model.param_count)

        def hvp(v):
            return training_hvp(model, train, v)

        rows, unconverged = [], 0
        for g in G:
            res = cg_solve(hvp, g, damping, cfg.cg_tol, cfg.cg_max_iter)
            unconverged += not res.converged
            rows.append(res.x)
        T = np.array(rows)
        norms = np.sqrt(np.maximum(np.einsum("ij,ij->i", G, T), 0.0))
        return MetricCache(metric, model, T, norms, None, None, damping, "cg",
                           {"cg_unconverged": unconverged})

    if pre == "hessian":
        factor, damping = _hessian_preconditioner(model, train, cfg)
    else:
        factor = empirical_fisher(model, train, cfg.fisher_damping, cfg.dense_limit)
        damping = factor.damping
    half = factor.apply(G, -0.5)
    norms = np.linalg.norm(half, axis=1)
    if power is None:
        # dot form <g_test, M^-1 g_i>: the test side stays a raw gradient
        T = factor.apply(G, -1.0)
    else:
        T = half
    return MetricCache(metric, model, T, norms, factor, power, damping, "dense")


def query_vectors(cache: MetricCache, X_test, y_test=None) -> np.ndarray:
    """Map test inputs to the space of ``cache.train_vectors``.

    ``y_test`` must hold the model's predicted classes for gradient metrics.
    """
    X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
    if not cache.metric.is_gradient_based:
        return features(cache.model, X_test, cache.metric.feature_map)
    if y_test is None:
        raise ValueError("gradient-based metrics need test labels (predicted classes)")
    G = per_example_gradients(cache.model, X_test, np.atleast_1d(y_test))
    if cache.test_power is not None:
        G = cache.preconditioner.apply(G, cache.test_power)
    return G


def _pairwise(form: str, T: np.ndarray, V: np.ndarray):
    """Scores (n_test, N) and a per-test degeneracy flag."""
    degenerate = np.zeros(len(T), dtype=bool)
    if form == "dot":
        return T @ V.T, degenerate
    if form == "l2":
        S = np.empty((len(T), len(V)))
        step = max(1, 4_000_000 // max(1, V.size))
        for a in range(0, len(T), step):
            D = T[a : a + step, None, :] - V[None, :, :]
            S[a : a + step] = -np.einsum("ijk,ijk->ij", D, D)
        return S, degenerate
    nt = np.linalg.norm(T, axis=1)
    nv = np.linalg.norm(V, axis=1)
    degenerate = nt <= _TINY
    tn = np.divide(T, nt[:, None], out=np.zeros_like(T), where=nt[:, None] > _TINY)
    vn = np.divide(V, nv[:, None], out=np.zeros_like(V), where=nv[:, None] > _TINY)
    return np.clip(tn @ vn.T, -1.0, 1.0), degenerate


def score_matrix(cache: MetricCache, X_test, y_test=None):
    """Relevance of every training instance to every test row.

    Returns ``(scores, degenerate)``; degenerate rows (zero test vector
    under a cosine form) score 0 everywhere.
    """
    T = query_vectors(cache, X_test, y_test)
    return _pairwise(cache.metric.form, T, cache.train_vectors)


def relevance(metric: MetricId, model: Model, z_test: Instance, i: int,
              cache: MetricCache) -> float:
    """R(z_test, z_train[i]); ``z_test.label`` must be the predicted class."""
    _check_cache(metric, model, cache)
    T = query_vectors(cache, z_test.features, [z_test.label])
    S, _ = _pairwise(metric.form, T, cache.train_vectors[i : i + 1])
    return float(S[0, 0])


def _check_cache(metric, model, cache):
    same_model = cache.model is model or (
        cache.model.spec == model.spec and np.array_equal(cache.model.theta, model.theta)
    )
    if cache.metric != metric or not same_model:
        raise ValueError("cache was built for a different (metric, model)")


class Ranking(NamedTuple):
    order: np.ndarray
    scores: np.ndarray


def rank_scores(scores) -> Ranking:
    """Descending order; exact ties go to the lower training index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return Ranking(order, scores[order])


def rank_training(metric: MetricId, model: Model, z_test: Instance, train: Dataset,
                  cache: MetricCache) -> Ranking:
    _check_cache(metric, model, cache)
    if len(cache) != len(train):
        raise ValueError("cache length does not match training set")
    S, _ = score_matrix(cache, z_test.features, [z_test.label])
    return rank_scores(S[0])


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k training indices with the same tie rule as :func:`rank_scores`."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


# -------------------------------------------------------- analysis helpers


class GCDecomposition(NamedTuple):
    cos_residual: float
    cos_input: float
    degenerate: bool = False
    bias_gap: float = 0.0


def gc_decomposition(model: Model, z: Instance, z2: Instance) -> GCDecomposition:
    """Split Grad-Cos on logistic regression into residual and input cosines.

    Exact for bias-free models. With biases the product matches the
    weight-block cosine; ``bias_gap`` reports full GC minus the product.
    """
    if not model.spec.is_logreg:
        raise ValueError("gc_decomposition is defined for logistic regression only")
    R = residuals(model, np.stack([z.features, z2.features]), [z.label, z2.label])
    cr = cosine(R[0], R[1])
    cx = cosine(z.features, z2.features)
    if cr is None or cx is None:
        return GCDecomposition(0.0, 0.0 if cx is None else cx, True, 0.0)
    G = per_example_gradients(model, np.stack([z.features, z2.features]), [z.label, z2.label])
    gc = cosine(G[0], G[1])
    gap = 0.0 if gc is None else gc - cr * cx
    return GCDecomposition(cr, cx, False, gap)


def dominance_condition(phi_i, phi_j, phi_test) -> bool:
    """|phi_i| < |phi_j| cos(phi_test, phi_j).

    When true, <phi_test, phi_i> < <phi_test, phi_j> follows from
    Cauchy-Schwarz.
    """
    c = cosine(phi_test, phi_j)
    if c is None:
        return False
    return norm(phi_i) < norm(phi_j) * c
