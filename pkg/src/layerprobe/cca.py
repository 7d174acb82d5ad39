"""Regularized CCA, projection-weighted CCA scores and fold-based evaluation.

Views are row-paired matrices: ``X`` is ``n x d1`` (the representation view)
and ``Y`` is ``n x d2`` (labels or acoustic features).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class CcaError(ValueError):
    pass


class DegenerateCovarianceError(CcaError):
    pass


class ZeroWeightError(CcaError):
    pass


@dataclass(frozen=True)
class CcaConfig:
    reg_epsilon: float = 1e-6
    max_components: int | None = None
    n_folds: int = 10
    n_test_folds: int = 3
    seed: int = 0
    # "test": projection weights from the held-out fold; "train": from the fitting folds
    weights_on: str = "test"
    # optional PCA truncation of X before CCA (SVCCA style); None keeps all dims
    svcca_dims: int | None = None

    def __post_init__(self):
        if not self.reg_epsilon > 0:
            raise CcaError("reg_epsilon must be positive")
        if self.n_folds < 2:
            raise CcaError("n_folds must be >= 2")
        if not 1 <= self.n_test_folds < self.n_folds:
            raise CcaError("n_test_folds must satisfy 1 <= n_test_folds < n_folds")
        if self.max_components is not None and self.max_components < 1:
            raise CcaError("max_components must be >= 1")
        if self.weights_on not in ("test", "train"):
            raise CcaError("weights_on must be 'test' or 'train'")
        if self.svcca_dims is not None and self.svcca_dims < 1:
            raise CcaError("svcca_dims must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CcaModel:
    mean_x: np.ndarray
    mean_y: np.ndarray
    proj_x: np.ndarray  # d1 x k
    proj_y: np.ndarray  # d2 x k
    train_correlations: np.ndarray  # k, non-increasing, in [0, 1]

    @property
    def n_components(self) -> int:
        return self.proj_x.shape[1]


def _inv_sqrt(cov: np.ndarray, floor: float) -> np.ndarray:
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, floor)
    return (evecs / np.sqrt(evals)) @ evecs.T


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise CcaError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def _pca_basis(Xc: np.ndarray, dims: int) -> np.ndarray:
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    return vt[:dims].T


def fit_cca(X, Y, cfg: CcaConfig = CcaConfig()) -> CcaModel:
    """Fit CCA with a ridge of ``reg_epsilon * mean(diag)`` on each view covariance."""
    X, Y = _as_2d(X), _as_2d(Y)
    n = X.shape[0]
    if Y.shape[0] != n:
        raise CcaError(f"row mismatch: X has {n} rows, Y has {Y.shape[0]}")
    if n < 2:
        raise CcaError("need at least 2 rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise CcaError("inputs contain non-finite values")
    mean_x, mean_y = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mean_x, Y - mean_y

    pca = None
    if cfg.svcca_dims is not None and cfg.svcca_dims < Xc.shape[1]:
        pca = _pca_basis(Xc, cfg.svcca_dims)
        Xc = Xc @ pca

    sxx = Xc.T @ Xc / (n - 1)
    syy = Yc.T @ Yc / (n - 1)
    sxy = Xc.T @ Yc / (n - 1)
    eps = []
    for name, s in (("X", sxx), ("Y", syy)):
        scale = float(np.mean(np.diag(s)))
        if not scale > 0:
            raise DegenerateCovarianceError(f"view {name} has zero variance")
        eps.append(cfg.reg_epsilon * scale)
    sxx = sxx + eps[0] * np.eye(sxx.shape[0])
    syy = syy + eps[1] * np.eye(syy.shape[0])
    wx = _inv_sqrt(sxx, eps[0])
    wy = _inv_sqrt(syy, eps[1])

    u, s, vt = np.linalg.svd(wx @ sxy @ wy, full_matrices=False)
    k = min(Xc.shape[1], Yc.shape[1])
    if cfg.max_components is not None:
        k = min(k, cfg.max_components)
    proj_x = wx @ u[:, :k]
    proj_y = wy @ vt[:k].T
    if pca is not None:
        proj_x = pca @ proj_x
    if not (np.all(np.isfinite(proj_x)) and np.all(np.isfinite(proj_y))):
        raise DegenerateCovarianceError("non-finite canonical projections")
    return CcaModel(mean_x, mean_y, proj_x, proj_y, np.clip(s[:k], 0.0, 1.0))


def component_correlations(model: CcaModel, X, Y) -> np.ndarray:
    """Pearson correlation of each canonical pair on the given rows, clipped to [0, 1]."""
    hx = (_as_2d(X) - model.mean_x) @ model.proj_x
    hy = (_as_2d(Y) - model.mean_y) @ model.proj_y
    hx = hx - hx.mean(axis=0)
    hy = hy - hy.mean(axis=0)
    num = np.sum(hx * hy, axis=0)
    den = np.sqrt(np.sum(hx * hx, axis=0) * np.sum(hy * hy, axis=0))
    rho = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(rho, 0.0, 1.0)


def projection_weights(model: CcaModel, X) -> np.ndarray:
    """Normalized weights: how much of centered ``X`` each unit-norm canonical variate accounts for."""
    xc = _as_2d(X) - model.mean_x
    h = xc @ model.proj_x
    norms = np.linalg.norm(h, axis=0)
    h = np.divide(h, norms, out=np.zeros_like(h), where=norms > 0)
    alpha = np.sum(np.abs(h.T @ xc), axis=1)
    total = alpha.sum()
    if not total > 0:
        raise ZeroWeightError("projection weights sum to zero")
    return alpha / total


def pwcca_score(model: CcaModel, X, Y, weight_X=None) -> float:
    """Projection-weighted mean of per-component correlations on ``(X, Y)``.

    Weights come from ``weight_X`` when given (e.g. the fitting rows),
    otherwise from ``X``. Always pass the representation as ``X``.
    """
    rho = component_correlations(model, X, Y)
    alpha = projection_weights(model, X if weight_X is None else weight_X)
    return float(np.sum(alpha * rho))


def fold_indices(n: int, n_folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, n_folds)


def cross_validated_cca(X, Y, cfg: CcaConfig = CcaConfig(), folds: list[np.ndarray] | None = None) -> float:
    """Mean PWCCA over the first ``n_test_folds`` of ``n_folds`` seeded folds."""
    X, Y = _as_2d(X), _as_2d(Y)
    n = X.shape[0]
    if Y.shape[0] != n:
        raise CcaError(f"row mismatch: X has {n} rows, Y has {Y.shape[0]}")
    if n < cfg.n_folds:
        raise CcaError(f"{n} rows cannot fill {cfg.n_folds} folds")
    if folds is None:
        folds = fold_indices(n, cfg.n_folds, cfg.seed)
    scores = []
    for f in range(cfg.n_test_folds):
        test = folds[f]
        if test.size < 2:
            raise CcaError(f"test fold {f} has {test.size} rows; need at least 2")
        train = np.concatenate([folds[g] for g in range(len(folds)) if g != f])
        model = fit_cca(X[train], Y[train], cfg)
        wx = X[train] if cfg.weights_on == "train" else None
        scores.append(pwcca_score(model, X[test], Y[test], weight_X=wx))
    return float(np.mean(scores))


def layerwise_cca_sweep(per_layer_X: Sequence, Y, cfg: CcaConfig = CcaConfig(),
                        jobs: int = 1) -> list[tuple[int, float]]:
    """Cross-validated PWCCA per layer with shared folds; results in layer order."""
    Y = _as_2d(Y)
    mats = [_as_2d(x) for x in per_layer_X]
    for i, m in enumerate(mats):
        if m.shape[0] != Y.shape[0]:
            raise CcaError(f"layer {i} has {m.shape[0]} rows, Y has {Y.shape[0]}")
    if Y.shape[0] < cfg.n_folds:
        raise CcaError(f"{Y.shape[0]} rows cannot fill {cfg.n_folds} folds")
    folds = fold_indices(Y.shape[0], cfg.n_folds, cfg.seed)

    def run(i):
        return cross_validated_cca(mats[i], Y, cfg, folds=folds)

    if jobs > 1 and len(mats) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(run, range(len(mats))))
    else:
        scores = [run(i) for i in range(len(mats))]
    return list(enumerate(scores))
