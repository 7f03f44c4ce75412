"""Information-per-cost acquisition over the discrete candidate grid.

Two ingredients are combined to score a candidate (x, m):

* a max-value entropy term: the expected reduction in entropy of the
  task optimum from observing (x, m), divided by the evaluation cost
  S^(m). Optimum samples come from a Gumbel fit to the grid-wide CDF of
  the posterior maximum.
* a transferable-knowledge term: an entropy bound on the information the
  observation carries about the shared kernel parameters, estimated from
  the spread of the particle ensemble's predictive distributions, also
  cost-normalized and weighted by ``beta``.

All scoring functions are pure; randomness enters only through explicit
generators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .gp import VARIANCE_FLOOR, PosteriorGP

LOG_2PI = np.log(2.0 * np.pi)
# quantile coefficients of the standard max-Gumbel: Q(p) = -log(-log p)
GUMBEL_Q25 = -np.log(-np.log(0.25))
GUMBEL_Q75 = -np.log(-np.log(0.75))
SD_FLOOR = np.sqrt(VARIANCE_FLOOR)
FACTOR_CLAMP = (1e-12, 1.0)


class BudgetExhausted(RuntimeError):
    """No fidelity level is affordable within the remaining budget."""


@dataclass(frozen=True)
class CostModel:
    """Per-fidelity evaluation costs (sample counts) and the task budget."""

    costs: tuple[float, ...]
    budget: float

    def __post_init__(self) -> None:
        c = np.asarray(self.costs, dtype=float)
        if np.any(c <= 0):
            raise ValueError("costs must be positive")
        if np.any(np.diff(c) < 0):
            raise ValueError("costs must be non-decreasing in fidelity")
        if not self.budget > 0:
            raise ValueError("budget must be positive")

    @property
    def n_levels(self) -> int:
        return len(self.costs)

    def cost_of(self, m: int) -> float:
        return self.costs[m - 1]


@dataclass(frozen=True)
class MaxValueSamples:
    """Sampled values of the task optimum at the reference fidelity."""

    values: np.ndarray
    fidelity_of_reference: int

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.size < 1 or not np.all(np.isfinite(v)):
            raise ValueError("need at least one finite optimum sample")


@dataclass(frozen=True)
class AcquisitionConfig:
    beta: float = 0.0
    num_max_value_samples: int = 10
    sqrt_variance_factor: bool = False
    candidate_grid: object = None

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.num_max_value_samples < 1:
            raise ValueError("need at least one max-value sample")


# ---------------------------------------------------------------------------
# Gumbel sampling of the posterior maximum


def _log_product_cdf(z: float, mean: np.ndarray, sd: np.ndarray) -> float:
    return float(np.sum(log_ndtr((z - mean) / sd)))


def _bisect_quantile(q: float, mean: np.ndarray, sd: np.ndarray,
                     lo: float, hi: float, tol: float = 1e-6) -> float:
    logq = np.log(q)
    # expand the bracket geometrically until it straddles the quantile
    width = hi - lo
    while _log_product_cdf(lo, mean, sd) > logq:
        lo -= width
        width *= 2.0
    width = hi - lo
    while _log_product_cdf(hi, mean, sd) < logq:
        hi += width
        width *= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _log_product_cdf(mid, mean, sd) < logq:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fit_gumbel_to_max(mean: np.ndarray, sd: np.ndarray) -> tuple[float, float]:
    """Location/scale of the Gumbel matching the product-CDF quartiles.

    The CDF of the grid maximum is approximated as the product of the
    per-point Gaussian CDFs; location a and scale b solve
    a + b * Q(p) = z_p at p = 0.25, 0.75 with Q(p) = -log(-log p).
    """
    lo = float(np.min(mean - 5.0 * np.max(sd)))
    hi = float(np.max(mean + 5.0 * np.max(sd)))
    z25 = _bisect_quantile(0.25, mean, sd, lo, hi)
    z75 = _bisect_quantile(0.75, mean, sd, lo, hi)
    scale = (z75 - z25) / (GUMBEL_Q75 - GUMBEL_Q25)
    location = z25 - scale * GUMBEL_Q25
    return location, scale


def gumbel_sample_max_values(post: PosteriorGP, grid_norm: np.ndarray,
                             n_samples: int, rng: np.random.Generator,
                             fidelity: int) -> MaxValueSamples:
    """Draw optimum-value samples for the grid at the reference fidelity."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mean, var = post.mean_var(grid_norm, fidelity)
    sd = np.sqrt(var)
    if np.all(sd <= SD_FLOOR * (1.0 + 1e-9)):
        values = np.full(n_samples, mean.max())
        return MaxValueSamples(values, fidelity)
    location, scale = fit_gumbel_to_max(mean, sd)
    u = rng.uniform(size=n_samples)
    values = location - scale * np.log(-np.log(u))
    return MaxValueSamples(values, fidelity)


# ---------------------------------------------------------------------------
# information-gain scoring


def gamma_score(post: PosteriorGP, x, m: int, f_star: float) -> float:
    """Standardized headroom (f* - mu) / sigma at a single candidate."""
    mean, var = post.mean_var(np.asarray(x.normalized), m)
    return float((f_star - mean[0]) / np.sqrt(var[0]))


def _truncation_factor(gamma: np.ndarray) -> np.ndarray:
    """Variance-reduction factor 1 - h(g) (g + h(g)), h = pdf/cdf.

    Equals the variance of a standard normal truncated above at g; the
    log-domain hazard keeps g << 0 finite, and the result is clamped to
    [1e-12, 1].
    """
    log_pdf = -0.5 * (gamma ** 2) - 0.5 * LOG_2PI
    hazard = np.exp(log_pdf - log_ndtr(gamma))
    factor = 1.0 - hazard * (gamma + hazard)
    return np.clip(factor, *FACTOR_CLAMP)


def gibbon_alpha_grid(post: PosteriorGP, grid_norm: np.ndarray, m: int,
                      samples: MaxValueSamples, cost: CostModel,
                      sqrt_variance_factor: bool = False) -> np.ndarray:
    """Cost-normalized optimum-information score for every grid candidate.

    The entropy terms log(sqrt(2 pi e) sigma) cancel between the marginal
    and the truncated predictive, leaving -mean_f* log factor / S^(m).
    """
    mean, var = post.mean_var(grid_norm, m)
    sd = np.sqrt(var)
    gamma = (samples.values[None, :] - mean[:, None]) / sd[:, None]
    log_factor = np.log(_truncation_factor(gamma))
    if sqrt_variance_factor:
        log_factor = 0.5 * log_factor
    return -log_factor.mean(axis=1) / cost.cost_of(m)


def gibbon_alpha(post: PosteriorGP, x, m: int, samples: MaxValueSamples,
                 cost: CostModel, sqrt_variance_factor: bool = False) -> float:
    score = gibbon_alpha_grid(post, np.asarray(x.normalized)[None, :], m,
                              samples, cost, sqrt_variance_factor)
    return float(score[0])


def mixture_variance_stats(means: np.ndarray, variances: np.ndarray,
                           noise_var: float) -> np.ndarray:
    """Predictive variance of the particle mixture, observation noise included.

    mean_v(sigma_v^2 + mu_v^2) - (mean_v mu_v)^2 + noise, with the mean
    spread evaluated as a central variance so a lone particle contributes
    exactly zero.
    """
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    return np.mean(variances, axis=0) + np.var(means, axis=0) + noise_var


def mixture_variance(posteriors: list[PosteriorGP], x, m: int,
                     noise_var: float) -> float:
    stats = np.array([p.mean_var(np.asarray(x.normalized), m) for p in posteriors])
    return float(mixture_variance_stats(stats[:, 0, 0], stats[:, 1, 0], noise_var))


def transfer_term_stats(means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Entropy-bound gap between the particle mixture and its components.

    0.5 [log(2 pi e * mixture variance) - mean_v log(2 pi e * sigma_v^2)],
    with the mixture variance taken without observation noise. Non-negative
    by Jensen's inequality; exactly zero for a single particle.
    """
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    mix = mixture_variance_stats(means, variances, 0.0)
    return 0.5 * ((np.log(2 * np.pi * np.e * mix))
                  - np.mean(np.log(2 * np.pi * np.e * variances), axis=0))


def transfer_term(posteriors: list[PosteriorGP], x, m: int) -> float:
    stats = np.array([p.mean_var(np.asarray(x.normalized), m) for p in posteriors])
    return float(transfer_term_stats(stats[:, 0, 0], stats[:, 1, 0]))


# ---------------------------------------------------------------------------
# candidate selection


def select_next(posteriors: list[PosteriorGP], grid, fidelities,
                samples_per_particle: list[MaxValueSamples], cost: CostModel,
                beta: float, remaining_budget: float,
                sqrt_variance_factor: bool = False):
    """Maximize the combined per-cost score over grid x affordable fidelities.

    Returns (InputPoint, fidelity, score). Ties break toward the lower
    fidelity index, then toward the earlier grid position.
    """
    affordable = [m for m in fidelities if cost.cost_of(m) <= remaining_budget]
    if not affordable:
        raise BudgetExhausted(
            f"remaining budget {remaining_budget:g} affords no fidelity")
    grid_norm = grid.normalized
    n_grid = grid_norm.shape[0]
    v = len(posteriors)
    scores = np.zeros((len(affordable), n_grid))
    for j, m in enumerate(affordable):
        stats = np.empty((v, 2, n_grid))
        alpha = np.zeros(n_grid)
        for i, post in enumerate(posteriors):
            mean, var = post.mean_var(grid_norm, m)
            stats[i, 0], stats[i, 1] = mean, var
            sd = np.sqrt(var)
            gamma = (samples_per_particle[i].values[None, :] - mean[:, None]) / sd[:, None]
            log_factor = np.log(_truncation_factor(gamma))
            if sqrt_variance_factor:
                log_factor = 0.5 * log_factor
            alpha += -log_factor.mean(axis=1)
        score = alpha / (v * cost.cost_of(m))
        if beta > 0.0:
            delta = transfer_term_stats(stats[:, 0, :], stats[:, 1, :])
            score = score + beta * delta / cost.cost_of(m)
        scores[j] = score
    # C-order argmax gives first occurrence: lowest fidelity, then grid order
    order = np.argsort(affordable, kind="stable")
    flat = scores[order].reshape(-1)
    best = int(np.argmax(flat))
    m_idx, g_idx = divmod(best, n_grid)
    m_sel = affordable[order[m_idx]]
    return grid[g_idx], m_sel, float(flat[best])


# ---------------------------------------------------------------------------
# Monte Carlo entropy oracle (test support)


def mixture_entropy_mc(means: np.ndarray, variances: np.ndarray,
                       noise_var: float, n_samples: int,
                       rng: np.random.Generator) -> tuple[float, float]:
    """MC estimate (value, standard error) of the mixture's differential entropy."""
    means = np.asarray(means, dtype=float)
    total_var = np.asarray(variances, dtype=float) + noise_var
    v = len(means)
    comp = rng.integers(v, size=n_samples)
    y = means[comp] + np.sqrt(total_var[comp]) * rng.standard_normal(n_samples)
    log_comp = (-0.5 * (y[:, None] - means[None, :]) ** 2 / total_var[None, :]
                - 0.5 * np.log(2 * np.pi * total_var)[None, :])
    log_pdf = logsumexp(log_comp, axis=1) - np.log(v)
    return float(-log_pdf.mean()), float(log_pdf.std(ddof=1) / np.sqrt(n_samples))


def mc_entropy_bound_check(posteriors: list[PosteriorGP], x, m: int,
                           n_samples: int, seed: int,
                           noise_var: float = 0.0) -> float:
    """MC differential entropy of the particle-mixture predictive at (x, m)."""
    stats = np.array([p.mean_var(np.asarray(x.normalized), m) for p in posteriors])
    est, _ = mixture_entropy_mc(stats[:, 0, 0], stats[:, 1, 0], noise_var,
                                n_samples, np.random.default_rng(seed))
    return est


def gaussian_entropy_bound(total_variance: float) -> float:
    """Max-entropy bound 0.5 log(2 pi e Var) for a given total variance."""
    return float(0.5 * np.log(2 * np.pi * np.e * total_variance))
