"""Gaussian mixture over quality features, fitted by EM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from cinet.quality import QualityFeature

COV_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class DegenerateFitError(ValueError):
    pass


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    log_likelihood: float = float("nan")
    n_iter: int = 0
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        k = self.weights.shape[0]
        self.means = np.asarray(self.means, dtype=np.float64).reshape(k, -1)
        d = self.means.shape[1]
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(k, d, d)
        self.shift = np.asarray(self.shift, dtype=np.float64).reshape(d)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(d)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def standardize(self, x) -> np.ndarray:
        return (_as_matrix(x) - self.shift) / self.scale

    def component_log_pdf(self, z: np.ndarray) -> np.ndarray:
        """log N(z | mu_k, Sigma_k) for standardized rows z; shape (n, K)."""
        return _component_log_pdf(z, self.means, self.covariances)

    def log_density_standardized(self, z: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):  # zero-weight components give log 0 = -inf
            return logsumexp(self.component_log_pdf(z) + np.log(self.weights), axis=1)

    def check(self):
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("mixture weights must lie on the simplex")
        if np.min(np.linalg.eigvalsh(self.covariances)) < COV_FLOOR * (1 - 1e-9):
            raise ValueError("covariance eigenvalue below regularization floor")


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, QualityFeature):
        return x.as_array()[None, :]
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], QualityFeature):
        return np.stack([f.as_array() for f in x])
    arr = np.asarray(x, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


def _component_log_pdf(z, means, covs):
    d = means.shape[1]
    chol = np.linalg.cholesky(covs)
    out = np.empty((z.shape[0], means.shape[0]))
    for k in range(means.shape[0]):
        diff = (z - means[k]).T
        sol = np.linalg.solve(chol[k], diff)
        maha = np.sum(sol * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[k])))
        out[:, k] = -0.5 * (d * LOG_2PI + logdet + maha)
    return out


def gmm_density(model: GmmModel, c) -> float | np.ndarray:
    """Mixture density of one feature (float) or many (array)."""
    z = model.standardize(c)
    vals = np.exp(model.log_density_standardized(z))
    return float(vals[0]) if isinstance(c, QualityFeature) or np.ndim(c) == 1 else vals


def gmm_log_density(model: GmmModel, c) -> np.ndarray:
    return model.log_density_standardized(model.standardize(c))


def gmm_responsibilities(model: GmmModel, c) -> np.ndarray:
    """Posterior component probabilities; a (K,) vector for a single feature."""
    z = model.standardize(c)
    logp = model.component_log_pdf(z) + np.log(model.weights)
    gamma = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return gamma[0] if isinstance(c, QualityFeature) or np.ndim(c) == 1 else gamma


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.shape[0])]]
    for _ in range(1, k):
        d2 = np.min(np.sum((x[:, None, :] - np.array(centers)[None]) ** 2, axis=2), axis=1)
        total = d2.sum()
        if total == 0.0:
            idx = rng.integers(x.shape[0])
        else:
            idx = rng.choice(x.shape[0], p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


def _m_step(x, gamma):
    nk = gamma.sum(axis=0)
    nk = np.maximum(nk, 1e-300)
    means = (gamma.T @ x) / nk[:, None]
    d = x.shape[1]
    covs = np.empty((gamma.shape[1], d, d))
    for k in range(gamma.shape[1]):
        diff = x - means[k]
        covs[k] = (gamma[:, k, None] * diff).T @ diff / nk[k]
        covs[k] = 0.5 * (covs[k] + covs[k].T) + COV_FLOOR * np.eye(d)
    weights = nk / x.shape[0]
    weights /= weights.sum()
    return weights, means, covs


def _log_likelihood(x, weights, means, covs):
    logp = _component_log_pdf(x, means, covs) + np.log(weights)
    return float(np.sum(logsumexp(logp, axis=1)))


def gmm_fit(features, K: int = 3, tol: float = 1e-6, max_iter: int = 200, seed: int = 0,
            standardize: bool = True) -> GmmModel:
    """EM from k-means++ seeds until the relative log-likelihood gain < tol.

    With ``standardize`` the features are z-scored first and the transform is
    kept on the model; densities are then reported in standardized space.
    """
    x_raw = _as_matrix(features)
    n, d = x_raw.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > n:
        raise ValueError(f"K={K} exceeds the sample count {n}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if np.all(x_raw == x_raw[0]):
        raise DegenerateFitError("all feature vectors are identical; the mixture fit is singular")
    if standardize:
        shift = x_raw.mean(axis=0)
        scale = x_raw.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        shift, scale = np.zeros(d), np.ones(d)
    x = (x_raw - shift) / scale
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, K, rng)
    assign = np.argmin(np.sum((x[:, None, :] - centers[None]) ** 2, axis=2), axis=1)
    gamma = np.zeros((n, K))
    gamma[np.arange(n), assign] = 1.0
    weights, means, covs = _m_step(x, gamma)
    # Empty hard clusters start at their seed with the pooled covariance.
    empty = np.bincount(assign, minlength=K) == 0
    if np.any(empty):
        pooled = np.cov(x.T, bias=True).reshape(d, d) + COV_FLOOR * np.eye(d)
        means[empty] = centers[empty]
        covs[empty] = pooled
        weights = np.full(K, 1.0 / K)
    ll = _log_likelihood(x, weights, means, covs)
    trace = [ll]
    it = 0
    for it in range(1, max_iter + 1):
        logp = _component_log_pdf(x, means, covs) + np.log(weights)
        gamma = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        weights, means, covs = _m_step(x, gamma)
        new_ll = _log_likelihood(x, weights, means, covs)
        trace.append(new_ll)
        gain = new_ll - ll
        ll = new_ll
        if abs(gain) <= tol * abs(ll):
            break
    model = GmmModel(weights, means, covs, shift, scale, ll, it, trace)
    model.check()
    return model


def bic(model: GmmModel, n: int) -> float:
    k, d = model.n_components, model.dim
    p = k * (1 + d + d * (d + 1) // 2) - 1
    return -2.0 * model.log_likelihood + p * math.log(n)


def select_components_bic(features, K_max: int = 5, seeds=(0, 1, 2), flat_delta: float = 2.0,
                          fallback: int = 3, **fit_kw) -> int:
    """Pick K in 1..K_max by BIC, best of several seeds per K.

    When the BIC spread is below ``flat_delta`` the curve carries no signal
    and ``fallback`` (clamped to K_max) is returned.
    """
    if K_max < 1:
        raise ValueError("K_max must be >= 1")
    x = _as_matrix(features)
    n = x.shape[0]
    scores = []
    for k in range(1, min(K_max, n) + 1):
        best = max((gmm_fit(x, k, seed=s, **fit_kw) for s in seeds), key=lambda m: m.log_likelihood)
        scores.append(bic(best, n))
    scores = np.array(scores)
    if len(scores) > 1 and scores.max() - scores.min() < flat_delta:
        return min(fallback, len(scores))
    return int(np.argmin(scores)) + 1


def save_gmm(model: GmmModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_gmm(model))


def format_gmm(model: GmmModel) -> str:
    f = lambda v: " ".join(f"{x:.17g}" for x in np.ravel(v))  # noqa: E731
    lines = [f"{model.n_components}"]
    for k in range(model.n_components):
        lines.append(f(model.weights[k]))
        lines.append(f(model.means[k]))
        lines.append(f(model.covariances[k]))
    lines.append(f(model.shift))
    lines.append(f(model.scale))
    return "\n".join(lines) + "\n"


def parse_gmm(text: str) -> GmmModel:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    k = int(rows[0][0])
    body = [[float(v) for v in r] for r in rows[1:]]
    if len(body) != 3 * k + 2:
        raise ValueError(f"GMM file: expected {3 * k + 2} data rows for K={k}, got {len(body)}")
    weights = [body[3 * i][0] for i in range(k)]
    means = [body[3 * i + 1] for i in range(k)]
    covs = [body[3 * i + 2] for i in range(k)]
    d = len(means[0])
    return GmmModel(np.array(weights), np.array(means), np.array(covs).reshape(k, d, d), np.array(body[-2]),
                    np.array(body[-1]))


def load_gmm(path) -> GmmModel:
    with open(path) as fh:
        return parse_gmm(fh.read())
