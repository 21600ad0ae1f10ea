"""Class prototypes: initialization, least-squares estimation, EMA refinement."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import diffcore
from .datamodel import ClassTaxonomy
from .seeding import child_rng

INIT_MODES = ("random", "orthogonal")


@dataclass
class PrototypeSet:
    """K x d prototype matrix (row k is the prototype of class k) and its update settings."""

    matrix: np.ndarray
    init_mode: str = "orthogonal"
    beta: float = 0.999
    ridge: float = 1e-6

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("prototype matrix must be 2-D")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if np.any(np.linalg.norm(self.matrix, axis=1) == 0):
            raise ValueError("a prototype row is the zero vector")

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class HierarchyPrototypes:
    matrix: np.ndarray
    superclass_names: list[str]


def init_prototypes(num_classes: int, dim: int, mode: str = "orthogonal", seed: int = 0,
                    beta: float = 0.999, ridge: float = 1e-6) -> PrototypeSet:
    """Unit-norm prototypes: i.i.d. Gaussian rows, or the first K rows of a QR basis."""
    if dim < 1 or num_classes < 1:
        raise ValueError("num_classes and dim must be positive")
    rng = child_rng(seed, "prototypes", mode)
    if mode == "random":
        m = rng.standard_normal((num_classes, dim))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
    elif mode == "orthogonal":
        if dim < num_classes:
            raise ValueError(f"orthogonal prototypes need dim >= num_classes ({dim} < {num_classes})")
        q, r = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        m = (q * np.sign(np.diag(r))).T.copy()
    else:
        raise ValueError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")
    return PrototypeSet(m, mode, beta, ridge)


def estimate_prototypes(Z, L, ridge: float = 1e-6) -> np.ndarray:
    """Least-squares prototypes ``(L^T L + ridge I)^{-1} L^T Z``.

    With disjoint single-label rows and ``ridge == 0`` this is the per-class mean.
    """
    Z = np.asarray(Z, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if Z.ndim != 2 or L.ndim != 2 or Z.shape[0] != L.shape[0]:
        raise diffcore.ShapeError(f"estimate_prototypes: Z {Z.shape} and L {L.shape} disagree")
    gram = L.T @ L
    if ridge > 0:
        gram = gram + ridge * np.eye(gram.shape[0])
    try:
        return diffcore.solve_spd(gram, L.T @ Z).data
    except diffcore.NumericalError as exc:
        empty = np.flatnonzero(np.diag(L.T @ L) == 0)
        hint = f" (classes without positives: {empty.tolist()})" if empty.size else ""
        raise diffcore.NumericalError(f"L^T L is singular{hint}; use ridge > 0") from exc


def prototype_residual(Z, L, cp) -> float:
    """Frobenius norm of ``Z - L @ CP``."""
    return float(np.linalg.norm(np.asarray(Z) - np.asarray(L, dtype=np.float64) @ np.asarray(cp)))


def ema_update(cp_t: PrototypeSet, cp_star, beta: float | None = None) -> PrototypeSet:
    beta = cp_t.beta if beta is None else beta
    cp_star = np.asarray(cp_star, dtype=np.float64)
    if cp_star.shape != cp_t.matrix.shape:
        raise diffcore.ShapeError(f"ema_update: {cp_star.shape} != {cp_t.matrix.shape}")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    old = cp_t.matrix
    blended = beta * old + (1.0 - beta) * cp_star
    # rounding can step just outside [old, star]; clamping keeps the result a true convex combination
    # and makes cp_star == old an exact fixed point
    return replace(cp_t, matrix=np.clip(blended, np.minimum(old, cp_star), np.maximum(old, cp_star)))


def superclass_prototypes(cp: PrototypeSet | np.ndarray, taxonomy: ClassTaxonomy) -> HierarchyPrototypes:
    """Each superclass row is the unit-normalized mean of its children's rows."""
    if taxonomy.superclass_of is None:
        raise ValueError("taxonomy has no superclass map")
    m = cp.matrix if isinstance(cp, PrototypeSet) else np.asarray(cp, dtype=np.float64)
    rows = []
    for s, name in enumerate(taxonomy.superclass_names):
        children = [k for k, sup in taxonomy.superclass_of.items() if sup == s]
        if not children:
            raise ValueError(f"superclass {name!r} has no children")
        mean = m[children].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise diffcore.DegenerateInputError(f"superclass {name!r}: children cancel to zero")
        rows.append(mean / norm)
    return HierarchyPrototypes(np.array(rows), list(taxonomy.superclass_names))


class PrototypeRefiner(TransformerMixin, BaseEstimator):
    """Estimator form of the prototype update.

    ``fit`` sets prototypes to the least-squares estimate; ``partial_fit``
    blends a fresh estimate in with decay ``beta``; ``transform`` returns
    cosine similarities to every prototype.

    Parameters
    ----------
    beta : float
        EMA decay used by ``partial_fit``.
    ridge : float
        Ridge added to ``L^T L`` before solving.
    """

    def __init__(self, beta: float = 0.999, ridge: float = 1e-6):
        self.beta = beta
        self.ridge = ridge

    def fit(self, X, y):
        X = check_array(X)
        y = check_array(y, ensure_min_features=1)
        self.prototypes_ = estimate_prototypes(X, y, self.ridge)
        self.n_features_in_ = X.shape[1]
        return self

    def partial_fit(self, X, y):
        if not hasattr(self, "prototypes_"):
            return self.fit(X, y)
        X = check_array(X)
        y = check_array(y, ensure_min_features=1)
        star = estimate_prototypes(X, y, self.ridge)
        self.prototypes_ = self.beta * self.prototypes_ + (1.0 - self.beta) * star
        return self

    def transform(self, X):
        check_is_fitted(self, "prototypes_")
        X = check_array(X)
        return diffcore.cosine_matrix(X, self.prototypes_).data
