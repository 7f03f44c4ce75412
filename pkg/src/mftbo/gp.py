"""Multi-fidelity Gaussian process surrogate with a learned feature-map kernel.

The surrogate places a zero-mean, unit-variance GP prior jointly over all
fidelity levels of the objective. Covariance between evaluation pairs
``(x, m)`` and ``(x', m')`` factorizes as

    k((x, m), (x', m')) = exp(-||psi(x) - psi(x')||^2) * exp(-g * (m - m')^2)

where ``psi`` is a small feed-forward network (2 -> 16 tanh -> 4 linear by
default) and ``g = exp(log_fidelity_lengthscale)``. All network weights
plus the log lengthscale form the parameter vector that is shared across
tasks and inferred by the particle machinery in :mod:`mftbo.svgd`.

Posterior inference is exact: the Gram matrix over the observed points is
Cholesky-factorized once per fit and reused for mean/variance queries, the
log marginal likelihood, and its analytic parameter gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .grid import InputPoint

VARIANCE_FLOOR = 1e-12
BASE_JITTER = 1e-10
MAX_JITTER = 1e-6


class InvalidParamsError(ValueError):
    """Kernel parameters contain non-finite entries."""


class IllConditionedGramError(ValueError):
    """Gram matrix could not be factorized even at the maximum jitter."""


@dataclass(frozen=True)
class FeatureMapConfig:
    """Architecture of the feature network psi."""

    input_dim: int = 2
    hidden_width: int = 16
    feature_dim: int = 4

    @property
    def n_net_params(self) -> int:
        h, d, f = self.hidden_width, self.input_dim, self.feature_dim
        return h * d + h + f * h + f

    @property
    def dim(self) -> int:
        """Total flattened dimension including the fidelity log lengthscale."""
        return self.n_net_params + 1


class KernelParams:
    """Shared surrogate parameters: feature-net weights plus log lengthscale.

    Flattening order is ``[w1.ravel(), b1, w2.ravel(), b2, log_fidelity_lengthscale]``
    (C order); :meth:`flatten` / :meth:`from_flat` round-trip losslessly.
    """

    __slots__ = ("arch", "w1", "b1", "w2", "b2", "log_fidelity_lengthscale")

    def __init__(self, arch: FeatureMapConfig, w1, b1, w2, b2,
                 log_fidelity_lengthscale: float):
        self.arch = arch
        self.w1 = np.asarray(w1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.w2 = np.asarray(w2, dtype=float)
        self.b2 = np.asarray(b2, dtype=float)
        self.log_fidelity_lengthscale = float(log_fidelity_lengthscale)
        h, d, f = arch.hidden_width, arch.input_dim, arch.feature_dim
        if self.w1.shape != (h, d) or self.b1.shape != (h,):
            raise ValueError("hidden layer shape mismatch")
        if self.w2.shape != (f, h) or self.b2.shape != (f,):
            raise ValueError("output layer shape mismatch")

    @property
    def fidelity_lengthscale(self) -> float:
        return float(np.exp(self.log_fidelity_lengthscale))

    def flatten(self) -> np.ndarray:
        return np.concatenate([
            self.w1.ravel(), self.b1, self.w2.ravel(), self.b2,
            [self.log_fidelity_lengthscale],
        ])

    @classmethod
    def from_flat(cls, arch: FeatureMapConfig, vec: np.ndarray) -> "KernelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (arch.dim,):
            raise ValueError(f"expected flat vector of length {arch.dim}, got {vec.shape}")
        h, d, f = arch.hidden_width, arch.input_dim, arch.feature_dim
        i = 0
        w1 = vec[i:i + h * d].reshape(h, d); i += h * d
        b1 = vec[i:i + h]; i += h
        w2 = vec[i:i + f * h].reshape(f, h); i += f * h
        b2 = vec[i:i + f]; i += f
        return cls(arch, w1.copy(), b1.copy(), w2.copy(), b2.copy(), vec[i])

    def validate(self) -> None:
        if not (np.all(np.isfinite(self.w1)) and np.all(np.isfinite(self.b1))
                and np.all(np.isfinite(self.w2)) and np.all(np.isfinite(self.b2))
                and np.isfinite(self.log_fidelity_lengthscale)):
            raise InvalidParamsError("non-finite kernel parameters")


def init_params(arch: FeatureMapConfig, seed: int, std: float = 0.5,
                log_fidelity_lengthscale: float = 0.0) -> KernelParams:
    """Draw i.i.d. Gaussian feature-net weights (std 0.5 by default)."""
    rng = np.random.default_rng(seed)
    h, d, f = arch.hidden_width, arch.input_dim, arch.feature_dim
    return KernelParams(
        arch,
        rng.normal(0.0, std, size=(h, d)),
        rng.normal(0.0, std, size=h),
        rng.normal(0.0, std, size=(f, h)),
        rng.normal(0.0, std, size=f),
        log_fidelity_lengthscale,
    )


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class ObservationRecord:
    """One noisy objective observation at a (candidate, fidelity) pair."""

    x: InputPoint
    m: int
    y: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.y):
            raise ValueError("observation value must be finite")


@dataclass
class TaskDataset:
    """Append-only observation history for one task."""

    noise_variance: float
    records: list[ObservationRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: ObservationRecord) -> None:
        self.records.append(record)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (normalized inputs (t,2), fidelity levels (t,), values (t,))."""
        t = len(self.records)
        x = np.empty((t, 2))
        m = np.empty(t)
        y = np.empty(t)
        for i, r in enumerate(self.records):
            x[i] = r.x.normalized
            m[i] = r.m
            y[i] = r.y
        return x, m, y


# ---------------------------------------------------------------------------
# kernels


def feature_map(params: KernelParams, x_norm: np.ndarray) -> np.ndarray:
    """Evaluate psi on normalized inputs; accepts (2,) or (n, 2)."""
    params.validate()
    x = np.atleast_2d(np.asarray(x_norm, dtype=float))
    hidden = np.tanh(x @ params.w1.T + params.b1)
    out = hidden @ params.w2.T + params.b2
    return out[0] if np.ndim(x_norm) == 1 else out


def feature_map_point(params: KernelParams, x: InputPoint) -> np.ndarray:
    return feature_map(params, np.asarray(x.normalized))


def feature_jacobian(params: KernelParams, x_norm: np.ndarray):
    """Features and their Jacobian w.r.t. the flattened net parameters.

    Returns (features (n, f), jacobian (n, f, n_net_params)) with columns in
    flattening order [w1, b1, w2, b2].
    """
    params.validate()
    x = np.atleast_2d(np.asarray(x_norm, dtype=float))
    n = x.shape[0]
    arch = params.arch
    h, d, f = arch.hidden_width, arch.input_dim, arch.feature_dim
    z = x @ params.w1.T + params.b1
    hid = np.tanh(z)
    sech2 = 1.0 - hid ** 2
    out = hid @ params.w2.T + params.b2

    jac = np.zeros((n, f, arch.n_net_params))
    # d out_k / d w1[j,i] = w2[k,j] * sech2[j] * x[i]
    jw1 = np.einsum("kj,nj,ni->nkji", params.w2, sech2, x)
    jac[:, :, :h * d] = jw1.reshape(n, f, h * d)
    # d out_k / d b1[j] = w2[k,j] * sech2[j]
    jac[:, :, h * d:h * d + h] = np.einsum("kj,nj->nkj", params.w2, sech2)
    # d out_k / d w2[k',j] = delta_{kk'} * hid[j]
    off = h * d + h
    jw2 = np.zeros((n, f, f, h))
    jw2[:, np.arange(f), np.arange(f), :] = hid[:, None, :]
    jac[:, :, off:off + f * h] = jw2.reshape(n, f, f * h)
    # d out_k / d b2[k'] = delta_{kk'}
    jac[:, :, off + f * h:] = np.eye(f)[None, :, :]
    return out, jac


def input_kernel_matrix(params: KernelParams, xa: np.ndarray,
                        xb: np.ndarray | None = None) -> np.ndarray:
    """exp(-||psi(x) - psi(x')||^2) for all pairs of normalized inputs."""
    fa = feature_map(params, xa)
    fb = fa if xb is None else feature_map(params, xb)
    d2 = np.sum((fa[:, None, :] - fb[None, :, :]) ** 2, axis=-1)
    return np.exp(-d2)


def input_kernel(params: KernelParams, x: InputPoint, x2: InputPoint) -> float:
    fa = feature_map_point(params, x)
    fb = feature_map_point(params, x2)
    return float(np.exp(-np.sum((fa - fb) ** 2)))


def fidelity_kernel_matrix(params: KernelParams, ma: np.ndarray,
                           mb: np.ndarray | None = None) -> np.ndarray:
    ma = np.asarray(ma, dtype=float)
    mb = ma if mb is None else np.asarray(mb, dtype=float)
    g = params.fidelity_lengthscale
    return np.exp(-g * (ma[:, None] - mb[None, :]) ** 2)


def fidelity_kernel(params: KernelParams, m: int, m2: int) -> float:
    g = params.fidelity_lengthscale
    return float(np.exp(-g * (m - m2) ** 2))


def joint_kernel(params: KernelParams, x: InputPoint, m: int,
                 x2: InputPoint, m2: int) -> float:
    return input_kernel(params, x, x2) * fidelity_kernel(params, m, m2)


def joint_kernel_matrix(params: KernelParams, xa, ma, xb=None, mb=None) -> np.ndarray:
    return input_kernel_matrix(params, xa, xb) * fidelity_kernel_matrix(params, ma, mb)


# ---------------------------------------------------------------------------
# posterior


class PosteriorGP:
    """Fitted surrogate posterior; immutable after construction.

    Holds the lower Cholesky factor of the noise-augmented Gram matrix and
    the precomputed weight vector so repeated mean/variance queries cost one
    cross-kernel build plus triangular solves.
    """

    __slots__ = ("params", "x_train", "m_train", "y_train", "noise_variance",
                 "chol_factor", "weight_vector", "train_features", "jitter")

    def __init__(self, params, x_train, m_train, y_train, noise_variance,
                 chol_factor, weight_vector, train_features, jitter):
        self.params = params
        self.x_train = x_train
        self.m_train = m_train
        self.y_train = y_train
        self.noise_variance = noise_variance
        self.chol_factor = chol_factor
        self.weight_vector = weight_vector
        self.train_features = train_features
        self.jitter = jitter

    @property
    def n_train(self) -> int:
        return 0 if self.x_train is None else self.x_train.shape[0]

    def mean_var(self, x_norm: np.ndarray, m) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at normalized query points.

        ``x_norm`` has shape (q, 2); ``m`` is a scalar level or (q,) array.
        Variance is clamped to [VARIANCE_FLOOR, 1].
        """
        x_norm = np.atleast_2d(np.asarray(x_norm, dtype=float))
        q = x_norm.shape[0]
        m_arr = np.full(q, m, dtype=float) if np.ndim(m) == 0 else np.asarray(m, dtype=float)
        if self.n_train == 0:
            return np.zeros(q), np.ones(q)
        feats = feature_map(self.params, x_norm)
        d2 = np.sum((feats[:, None, :] - self.train_features[None, :, :]) ** 2, axis=-1)
        g = self.params.fidelity_lengthscale
        k_star = np.exp(-d2 - g * (m_arr[:, None] - self.m_train[None, :]) ** 2)
        mean = k_star @ self.weight_vector
        # var = 1 - k*^T Ktilde^-1 k* = 1 - ||L^-1 k*||^2: one triangular solve
        v = solve_triangular(self.chol_factor, k_star.T, lower=True)
        var = 1.0 - np.einsum("tq,tq->q", v, v)
        return mean, np.clip(var, VARIANCE_FLOOR, 1.0)


def _factorize(gram: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky with escalating jitter per the fixed policy."""
    jitter = BASE_JITTER
    eye = np.eye(gram.shape[0])
    while jitter <= MAX_JITTER:
        try:
            return cholesky(gram + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise IllConditionedGramError(
        f"Gram factorization failed at jitter {MAX_JITTER:g}")


def fit_posterior(params: KernelParams, data: TaskDataset) -> PosteriorGP:
    """Factorize the Gram matrix over ``data`` and cache the weight vector.

    An empty dataset yields the prior (mean 0, variance 1 everywhere).
    """
    params.validate()
    if len(data) == 0:
        return PosteriorGP(params, None, None, None, data.noise_variance,
                           None, None, None, 0.0)
    x, m, y = data.as_arrays()
    feats = feature_map(params, x)
    d2 = np.sum((feats[:, None, :] - feats[None, :, :]) ** 2, axis=-1)
    g = params.fidelity_lengthscale
    gram = np.exp(-d2 - g * (m[:, None] - m[None, :]) ** 2)
    gram[np.diag_indices_from(gram)] += data.noise_variance
    chol, jitter = _factorize(gram)
    weights = cho_solve((chol, True), y)
    return PosteriorGP(params, x, m, y, data.noise_variance,
                       chol, weights, feats, jitter)


def posterior_mean_var(post: PosteriorGP, x: InputPoint, m: int) -> tuple[float, float]:
    mean, var = post.mean_var(np.asarray(x.normalized), m)
    return float(mean[0]), float(var[0])


# ---------------------------------------------------------------------------
# marginal likelihood


def log_marginal_likelihood(params: KernelParams, data: TaskDataset) -> float:
    """Gaussian log evidence of the observations under the surrogate prior.

    Returns -0.5 * (t log 2pi + log|K + s^2 I| + y^T (K + s^2 I)^{-1} y);
    larger is better. The jitter policy matches :func:`fit_posterior` so
    value, gradient, and fitted posterior all refer to one matrix.
    """
    params.validate()
    if len(data) == 0:
        raise ValueError("log marginal likelihood requires a non-empty dataset")
    x, m, y = data.as_arrays()
    gram = joint_kernel_matrix(params, x, m)
    gram[np.diag_indices_from(gram)] += data.noise_variance
    chol, _ = _factorize(gram)
    alpha = cho_solve((chol, True), y)
    t = len(y)
    return float(-0.5 * t * np.log(2.0 * np.pi) - np.log(np.diag(chol)).sum()
                 - 0.5 * y @ alpha)


def grad_log_marginal_likelihood(params: KernelParams, data: TaskDataset) -> np.ndarray:
    """Analytic gradient of :func:`log_marginal_likelihood` w.r.t. the
    flattened parameter vector.

    Uses the trace identity d l / d th = 0.5 tr[(a a^T - K~^{-1}) dK/d th]
    with a = K~^{-1} y. The feature-net part contracts the per-point feature
    Jacobians instead of assembling one t x t matrix per parameter.
    """
    params.validate()
    if len(data) == 0:
        raise ValueError("gradient requires a non-empty dataset")
    x, m, y = data.as_arrays()
    feats, jac = feature_jacobian(params, x)
    d2_feat = np.sum((feats[:, None, :] - feats[None, :, :]) ** 2, axis=-1)
    g = params.fidelity_lengthscale
    d2_fid = (m[:, None] - m[None, :]) ** 2
    k = np.exp(-d2_feat - g * d2_fid)
    k_noisy = k + data.noise_variance * np.eye(len(y))
    chol, _ = _factorize(k_noisy)
    alpha = cho_solve((chol, True), y)
    k_inv = cho_solve((chol, True), np.eye(len(y)))
    b = (np.outer(alpha, alpha) - k_inv) * k

    # d l / d theta_net = -2 sum_i (r_i psi_i - s_i)^T J_i  with r = B 1, s = B Psi
    r = b.sum(axis=1)
    s = b @ feats
    grad_net = -2.0 * np.einsum("nf,nfp->p", r[:, None] * feats - s, jac)
    grad_log_g = -0.5 * g * np.sum(b * d2_fid)
    return np.concatenate([grad_net, [grad_log_g]])
