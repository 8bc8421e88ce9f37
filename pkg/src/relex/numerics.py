"""Linear-algebra kernels: similarity primitives, Hessian-vector products,
damped factorizations, conjugate gradient, empirical Fisher, rank
correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable, NamedTuple

import numpy as np
from scipy.stats import rankdata

from .dataset import Dataset
from .model import Model, NumericalError, objective, objective_gradient, per_example_gradients, softmax

DENSE_LIMIT = 4096
DAMPING_SCALE = 0.01
FD_EPS = 1e-5


# --------------------------------------------------------------- primitives


def dot(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    return float(a @ b)


def norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(a @ a))


def cosine(a, b) -> float | None:
    """Cosine similarity clamped to [-1, 1]; ``None`` if either vector is zero."""
    na, nb = norm(a), norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return min(1.0, max(-1.0, dot(a, b) / (na * nb)))


# --------------------------------------------------- Hessian-vector products


def _logreg_hvp(model: Model, X: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Exact Hessian of mean softmax cross entropy on linear logits.

    ``V`` has shape ``(p,)`` or ``(p, k)``.
    """
    spec = model.spec
    C, d = spec.class_count, spec.input_dim
    single = V.ndim == 1
    V2 = V[:, None] if single else V
    k = V2.shape[1]
    n = len(X)
    W, b = model.layers()[0]
    P = softmax(X @ W.T + (0.0 if b is None else b))  # (n, C)
    Vw = V2[: C * d].T.reshape(k, C, d)
    U = np.einsum("nd,kcd->knc", X, Vw)  # logit directional derivatives
    if spec.use_bias:
        U = U + V2[C * d :].T[:, None, :]
    AU = P[None] * U - P[None] * np.sum(P[None] * U, axis=2, keepdims=True)
    out_w = np.einsum("knc,nd->kcd", AU, X).reshape(k, C * d) / n
    parts = [out_w]
    if spec.use_bias:
        parts.append(AU.sum(axis=1) / n)
    out = np.concatenate(parts, axis=1).T
    if spec.l2_penalty:
        out = out + spec.l2_penalty * V2
    return out[:, 0] if single else out


def training_hvp(model: Model, train: Dataset, v) -> np.ndarray:
    """Product of the training-objective Hessian with ``v``.

    Analytic for logistic regression; central differences of the full
    training gradient otherwise, with step ``eps * (1 + |theta|) / |v|``.
    The objective includes the model's L2 penalty when it is nonzero.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != model.param_count:
        raise ValueError("vector length does not match param_count")
    if model.spec.is_logreg:
        return _logreg_hvp(model, train.X, v)
    if v.ndim == 2:
        return np.stack([training_hvp(model, train, v[:, j]) for j in range(v.shape[1])], axis=1)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return np.zeros_like(v)
    h = FD_EPS * (1.0 + np.linalg.norm(model.theta)) / nv
    gp = objective_gradient(model, train.X, train.y, model.theta + h * v)
    gm = objective_gradient(model, train.X, train.y, model.theta - h * v)
    return (gp - gm) / (2.0 * h)


def hessian_matrix(model: Model, train: Dataset, dense_limit: int = DENSE_LIMIT) -> np.ndarray:
    """Symmetrized training Hessian assembled column by column."""
    p = model.param_count
    if p > dense_limit:
        raise ValueError(
            f"param_count {p} exceeds dense_limit {dense_limit}; use cg_solve instead"
        )
    if model.spec.is_logreg:
        H = _logreg_hvp(model, train.X, np.eye(p))
    else:
        H = np.empty((p, p))
        e = np.zeros(p)
        for j in range(p):
            e[j] = 1.0
            H[:, j] = training_hvp(model, train, e)
            e[j] = 0.0
    return 0.5 * (H + H.T)


def hessian_trace(model: Model, train: Dataset, dense_limit: int = DENSE_LIMIT,
                  probes: int = 32, seed: int = 0) -> float:
    """Exact trace when the Hessian fits densely, else a Hutchinson estimate."""
    p = model.param_count
    if p <= dense_limit:
        return float(np.trace(hessian_matrix(model, train, dense_limit)))
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(probes):
        z = rng.choice([-1.0, 1.0], size=p)
        total += float(z @ training_hvp(model, train, z))
    return total / probes


def default_damping(trace: float, param_count: int) -> float:
    lam = DAMPING_SCALE * trace / param_count
    return lam if lam > 0 else 1e-8


# ------------------------------------------------------ damped factorization


@dataclass(frozen=True)
class PsdFactor:
    """Eigen-factorization of a damped symmetric matrix.

    Eigenvalues are sorted descending and clipped from below at the
    damping, so fractional negative powers are always defined.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    damping: float

    @classmethod
    def from_matrix(cls, M: np.ndarray, damping: float) -> "PsdFactor":
        if not damping > 0:
            raise ValueError("damping must be positive")
        M = 0.5 * (M + M.T)
        w, Q = np.linalg.eigh(M + damping * np.eye(len(M)))
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(Q))):
            raise NumericalError("eigendecomposition produced non-finite values")
        order = np.argsort(w)[::-1]
        return cls(np.maximum(w[order], damping), Q[:, order], float(damping))

    def apply(self, v, power: float = -1.0) -> np.ndarray:
        """``M^power @ v``; ``v`` may be a vector or a stack of row vectors."""
        v = np.asarray(v, dtype=np.float64)
        scale = self.eigenvalues**power
        Q = self.eigenvectors
        if v.ndim == 1:
            return Q @ (scale * (Q.T @ v))
        return ((v @ Q) * scale) @ Q.T

    def matrix(self, power: float = 1.0) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues**power) @ self.eigenvectors.T


def dense_hessian(model: Model, train: Dataset, damping: float | None = None,
                  dense_limit: int = DENSE_LIMIT) -> PsdFactor:
    H = hessian_matrix(model, train, dense_limit)
    if damping is None:
        damping = default_damping(float(np.trace(H)), len(H))
    return PsdFactor.from_matrix(H, damping)


# ------------------------------------------------------- conjugate gradient


class CGResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float


def cg_solve(hvp: Callable[[np.ndarray], np.ndarray], b, damping: float,
             tol: float = 1e-10, max_iter: int = 1000) -> CGResult:
    """Solve ``(H + damping I) x = b`` given only products with ``H``.

    Stops once ``|r| <= tol * |b|``; otherwise returns the iterate with
    the smallest residual seen and ``converged=False``.
    """
    if not damping > 0:
        raise ValueError("damping must be positive")
    b = np.asarray(b, dtype=np.float64)
    nb = np.linalg.norm(b)
    x = np.zeros_like(b)
    if nb == 0.0:
        return CGResult(x, True, 0, 0.0)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    best, best_res = x.copy(), math.sqrt(rr)
    for it in range(1, max_iter + 1):
        Ap = hvp(p) + damping * p
        pAp = p @ Ap
        if not (np.isfinite(pAp) and np.all(np.isfinite(Ap))):
            raise NumericalError(f"non-finite value in conjugate gradient at iteration {it}")
        if pAp <= 0:
            # operator is not positive definite along p
            return CGResult(best, False, it, best_res)
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = r @ r
        res = math.sqrt(rr_new)
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol * nb:
            return CGResult(x, True, it, res)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(best, False, max_iter, best_res)


# ---------------------------------------------------------- empirical Fisher


@dataclass(frozen=True)
class FisherMatrix:
    matrix: np.ndarray  # includes damping * I
    damping: float
    factor: PsdFactor

    def apply(self, v, power: float = -1.0) -> np.ndarray:
        return self.factor.apply(v, power)


def empirical_fisher(model: Model, train: Dataset, damping: float | None = None,
                     dense_limit: int = DENSE_LIMIT) -> FisherMatrix:
    """Mean outer product of per-instance loss gradients, plus ``damping * I``."""
    p = model.param_count
    if p > dense_limit:
        raise ValueError(f"param_count {p} exceeds dense_limit {dense_limit}")
    G = per_example_gradients(model, train.X, train.y)
    raw = (G.T @ G) / len(G)
    raw = 0.5 * (raw + raw.T)
    if damping is None:
        damping = default_damping(float(np.trace(raw)), p)
    factor = PsdFactor.from_matrix(raw, damping)
    return FisherMatrix(raw + damping * np.eye(p), float(damping), factor)


# -------------------------------------------------------- Newton refinement


def newton_refine(model: Model, train: Dataset, tol: float = 1e-10, max_iter: int = 100,
                  dense_limit: int = DENSE_LIMIT) -> Model:
    """Damped Newton steps on the training objective until ``|grad| < tol``.

    Intended for strictly convex objectives (logistic regression with a
    positive L2 penalty), where it converges to machine precision.
    """
    X, y = train.X, train.y
    theta = model.theta.copy()
    for _ in range(max_iter):
        g = objective_gradient(model, X, y, theta)
        if np.linalg.norm(g) < tol:
            break
        H = hessian_matrix(model.with_theta(theta), train, dense_limit)
        step = np.linalg.solve(H + 1e-12 * np.eye(len(H)), g)
        f0 = objective(model, X, y, theta)
        t = 1.0
        while t > 1e-10 and objective(model, X, y, theta - t * step) > f0 - 1e-4 * t * (g @ step):
            t *= 0.5
        theta = theta - t * step
    if not np.all(np.isfinite(theta)):
        raise NumericalError("Newton refinement diverged")
    return model.with_theta(theta)


# -------------------------------------------------------- rank correlation


def spearman(a, b) -> float | None:
    """Pearson correlation of average ranks; ``None`` if either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("spearman needs two equal-length vectors of length >= 2")
    rho = spearman_rows(a[None], b[None])[0]
    return None if np.isnan(rho) else float(rho)


def spearman_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise Spearman correlation; NaN marks rows where it is undefined."""
    ra = rankdata(A, method="average", axis=1)
    rb = rankdata(B, method="average", axis=1)
    ra = ra - ra.mean(axis=1, keepdims=True)
    rb = rb - rb.mean(axis=1, keepdims=True)
    den = np.sqrt((ra * ra).sum(axis=1) * (rb * rb).sum(axis=1))
    num = (ra * rb).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return np.clip(rho, -1.0, 1.0)


def spearman_null_ci(n: int, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation interval for Spearman's rho under independence."""
    if n < 10:
        raise ValueError("n must be >= 10")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    half = NormalDist().inv_cdf(0.5 + level / 2) / math.sqrt(n - 1)
    return -half, half
