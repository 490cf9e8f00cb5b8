"""Gradient sanitization and privacy accounting.

Two accountants are provided:

* a classical Renyi accountant for the subsampled Gaussian mechanism using
  the exact integer-order binomial-expansion bound (log-space, no dropped
  higher-order terms), with the usual conversion to an (epsilon, delta)
  guarantee; and
* a Monte-Carlo moment accountant whose per-step cost is estimated from
  measured gradient deviations under single-record replacement rather than
  the worst case, composed per order and converted through the tail bound
  epsilon(lambda) = (total_cost(lambda) - log beta) / lambda with failure
  probability beta + gamma.

Costs compose additively per order; ledgers accumulate one increment per
optimization step, so splitting the same steps across runs is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special, stats

from fedsurv.network import HazardNetwork, per_sample_gradients

DEFAULT_RDP_ORDERS: tuple[int, ...] = tuple(range(2, 65))
DEFAULT_MOMENT_ORDERS: tuple[int, ...] = (2, 4, 8, 16, 32)
SIGMA_BRACKET: tuple[float, float] = (0.3, 100.0)


class CalibrationError(RuntimeError):
    """The target budget is unattainable within the noise bracket."""


@dataclass(frozen=True)
class DpConfig:
    """Classical DP-SGD knobs: clip norm C, noise multiplier sigma, delta."""

    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5
    target_epsilons: tuple[float, ...] = (0.5, 1.0, 2.0, 10.0)

    def validate(self) -> None:
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier <= 0:
            raise ValueError("noise_multiplier must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")


@dataclass(frozen=True)
class BdpConfig:
    """Monte-Carlo accountant knobs: integer orders, failure probabilities
    beta (privacy) and gamma (estimator), replacement samples per step."""

    lambda_grid: tuple[int, ...] = DEFAULT_MOMENT_ORDERS
    beta: float = 5e-6
    gamma: float = 5e-6
    mc_samples: int = 10
    subsample_rate: float | None = None

    def validate(self) -> None:
        if not self.lambda_grid:
            raise ValueError("lambda grid must be nonempty")
        if any(int(l) != l or l < 2 for l in self.lambda_grid):
            raise ValueError("lambda grid must hold integers >= 2")
        if not 0 < self.beta < 1 or not 0 < self.gamma < 1:
            raise ValueError("beta and gamma must be in (0, 1)")
        if self.beta + self.gamma >= 1:
            raise ValueError("beta + gamma must be < 1")
        if self.mc_samples < 2:
            raise ValueError("need at least two Monte-Carlo samples")
        if self.subsample_rate is not None and not 0 < self.subsample_rate <= 1:
            raise ValueError("subsample rate must be in (0, 1]")


@dataclass(frozen=True)
class PrivacySpend:
    """Reported guarantee with the regime it was accounted under."""

    epsilon: float
    delta: float
    regime: str
    order: float | None = None


# ---------------------------------------------------------------------------
# mechanism


def clip_gradient(gradient: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale gradient to L2 norm at most clip_norm, preserving direction."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    gradient = np.asarray(gradient, dtype=float)
    norm = float(np.linalg.norm(gradient))
    return gradient / max(1.0, norm / clip_norm)


def sanitize_batch(
    per_sample_grads: np.ndarray,
    clip_norm: float,
    noise_multiplier: float,
    rng: np.random.Generator,
    noise_std: float | None = None,
) -> np.ndarray:
    """Mean of clipped per-sample gradients plus Gaussian noise.

    Default noise is per-coordinate std sigma * C / L for batch size L,
    i.e. (1/L)(sum of clipped gradients + N(0, sigma^2 C^2 I)). Callers may
    override ``noise_std`` to inject noise at a different scale (the
    Monte-Carlo-accounted regime adds std sigma * C directly to the mean).
    """
    grads = np.atleast_2d(np.asarray(per_sample_grads, dtype=float))
    if grads.shape[0] == 0:
        raise ValueError("empty batch")
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    batch = grads.shape[0]
    norms = np.linalg.norm(grads, axis=1)
    scale = 1.0 / np.maximum(1.0, norms / clip_norm)
    mean = (grads * scale[:, None]).sum(axis=0) / batch
    if noise_std is None:
        noise_std = noise_multiplier * clip_norm / batch
    if noise_std > 0:
        mean = mean + rng.normal(0.0, noise_std, size=mean.shape)
    return mean


# ---------------------------------------------------------------------------
# classical accountant


def _log_binom(n: int, k: np.ndarray) -> np.ndarray:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def subsampled_gaussian_rdp(q: float, sigma: float, alpha: int) -> float:
    """Per-step Renyi cost of the subsampled Gaussian mechanism at integer
    order alpha >= 2: log E_{k~Bin(alpha,q)}[exp((k^2-k)/(2 sigma^2))] / (alpha-1).
    """
    if not 0 <= q <= 1:
        raise ValueError("q must be in [0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if int(alpha) != alpha or alpha < 2:
        raise ValueError("alpha must be an integer >= 2")
    alpha = int(alpha)
    if q == 0:
        return 0.0
    if q == 1:
        return alpha / (2.0 * sigma**2)
    ks = np.arange(alpha + 1)
    log_terms = (
        _log_binom(alpha, ks)
        + ks * math.log(q)
        + (alpha - ks) * math.log1p(-q)
        + ks * (ks - 1) / (2.0 * sigma**2)
    )
    return float(special.logsumexp(log_terms)) / (alpha - 1)


@dataclass
class RdpLedger:
    """Cumulative per-order Renyi costs; one increment per step."""

    orders: tuple[int, ...] = DEFAULT_RDP_ORDERS
    costs: np.ndarray = None  # type: ignore[assignment]
    steps: int = 0

    def __post_init__(self) -> None:
        if not self.orders:
            raise ValueError("order grid must be nonempty")
        if self.costs is None:
            self.costs = np.zeros(len(self.orders))
        self._cache_key: tuple[float, float] | None = None
        self._cache_vec: np.ndarray | None = None

    def step(self, q: float, sigma: float, count: int = 1) -> None:
        if (q, sigma) != self._cache_key:
            self._cache_vec = np.array(
                [subsampled_gaussian_rdp(q, sigma, a) for a in self.orders]
            )
            self._cache_key = (q, sigma)
        for _ in range(count):
            self.costs += self._cache_vec
            self.steps += 1

    def copy(self) -> "RdpLedger":
        dup = RdpLedger(self.orders, self.costs.copy(), self.steps)
        return dup


def rdp_to_dp(ledger: RdpLedger, delta: float) -> PrivacySpend:
    """Best (epsilon, delta) over the order grid:
    epsilon = min_alpha [cost_alpha + log(1/delta) / (alpha - 1)]."""
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    orders = np.asarray(ledger.orders, dtype=float)
    eps = ledger.costs + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return PrivacySpend(
        epsilon=float(eps[best]),
        delta=delta,
        regime="classical",
        order=float(orders[best]),
    )


def composed_epsilon(
    q: float,
    sigma: float,
    steps: int,
    delta: float,
    orders: tuple[int, ...] = DEFAULT_RDP_ORDERS,
) -> PrivacySpend:
    """Predicted classical guarantee after ``steps`` homogeneous steps."""
    costs = steps * np.array([subsampled_gaussian_rdp(q, sigma, a) for a in orders])
    ledger = RdpLedger(orders, costs, steps)
    return rdp_to_dp(ledger, delta)


def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    q: float,
    steps: int,
    orders: tuple[int, ...] = DEFAULT_RDP_ORDERS,
    bracket: tuple[float, float] = SIGMA_BRACKET,
    rel_slack: float = 0.01,
    max_iter: int = 200,
) -> float:
    """Smallest noise multiplier in ``bracket`` whose composed epsilon lands
    within ``rel_slack`` below ``target_epsilon``.

    Returns the bracket minimum when even that sigma over-delivers (e.g.
    vanishing subsampling rate); raises CalibrationError when the target is
    unattainable at the bracket maximum.
    """
    if target_epsilon <= 0:
        raise ValueError("target epsilon must be positive")
    lo, hi = bracket

    def eps_at(sig: float) -> float:
        return composed_epsilon(q, sig, steps, delta, orders).epsilon

    if eps_at(lo) <= target_epsilon:
        return lo
    if eps_at(hi) > target_epsilon:
        raise CalibrationError(
            f"epsilon {target_epsilon} unattainable with sigma <= {hi}"
        )
    for _ in range(max_iter):
        eps_hi = eps_at(hi)
        if target_epsilon * (1.0 - rel_slack) <= eps_hi <= target_epsilon:
            return hi
        mid = 0.5 * (lo + hi)
        if eps_at(mid) > target_epsilon:
            lo = mid
        else:
            hi = mid
    raise CalibrationError("sigma search did not converge")


# ---------------------------------------------------------------------------
# Monte-Carlo (data-dependent) accountant


def mc_sensitivity(
    model: HazardNetwork,
    batch_x: np.ndarray,
    batch_survived: np.ndarray,
    batch_failed: np.ndarray,
    pool_x: np.ndarray,
    pool_survived: np.ndarray,
    pool_failed: np.ndarray,
    mc_samples: int,
    clip_norm: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Squared deviations of the clipped mean gradient under single-record
    replacement: one draw replaces a uniformly chosen batch element with a
    uniform draw from the replacement pool. Each value is at most
    (2 * clip_norm / batch)^2.
    """
    if len(pool_x) == 0:
        raise ValueError("replacement pool is empty")
    if mc_samples < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    base = per_sample_gradients(model, batch_x, batch_survived, batch_failed)
    return _replacement_deviations(
        base, model, pool_x, pool_survived, pool_failed, mc_samples, clip_norm, rng
    )


def _replacement_deviations(
    per_sample: np.ndarray,
    model: HazardNetwork,
    pool_x: np.ndarray,
    pool_survived: np.ndarray,
    pool_failed: np.ndarray,
    mc_samples: int,
    clip_norm: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Core of mc_sensitivity reusing precomputed per-sample gradients.

    Replacing one element changes the clipped mean by
    (clip(g_new) - clip(g_old)) / L, so the squared deviation is computed
    from that difference directly.
    """
    batch = per_sample.shape[0]
    norms = np.linalg.norm(per_sample, axis=1)
    clipped = per_sample / np.maximum(1.0, norms / clip_norm)[:, None]

    replace_idx = rng.integers(0, batch, size=mc_samples)
    draw_idx = rng.integers(0, len(pool_x), size=mc_samples)
    new_grads = per_sample_gradients(
        model, pool_x[draw_idx], pool_survived[draw_idx], pool_failed[draw_idx]
    )
    new_norms = np.linalg.norm(new_grads, axis=1)
    new_clipped = new_grads / np.maximum(1.0, new_norms / clip_norm)[:, None]

    diffs = (new_clipped - clipped[replace_idx]) / batch
    return np.einsum("ij,ij->i", diffs, diffs)


@lru_cache(maxsize=256)
def _student_t_quantile(level: float, df: int) -> float:
    return float(stats.t.ppf(level, df=df))


def _binomial_log_moment(trials: int, q: float, exponents: np.ndarray) -> float:
    """log E_{K~Bin(trials, q)}[exp(exponents[K])], exact finite sum."""
    ks = np.arange(trials + 1)
    if q == 0:
        return float(exponents[0])
    if q == 1:
        return float(exponents[-1])
    log_pmf = _log_binom(trials, ks) + ks * math.log(q) + (trials - ks) * math.log1p(-q)
    return float(special.logsumexp(log_pmf + exponents))


def moment_costs(delta_sq: float, lam: int, q: float, sigma: float) -> tuple[float, float]:
    """Left/right log-moment costs of one measured squared deviation at
    integer order lam (lam = 1 permitted for verification purposes)."""
    if delta_sq < 0 or not math.isfinite(delta_sq):
        raise ValueError("squared deviation must be finite and >= 0")
    if int(lam) != lam or lam < 1:
        raise ValueError("order must be an integer >= 1")
    if not 0 <= q <= 1:
        raise ValueError("q must be in [0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    lam = int(lam)
    ratio = delta_sq / (2.0 * sigma**2)
    if ratio == 0.0:
        return 0.0, 0.0  # exp terms are all 1, both moments are exactly 1
    k_left = np.arange(lam + 2)
    left = _binomial_log_moment(lam + 1, q, (k_left**2 - k_left) * ratio)
    k_right = np.arange(lam + 1)
    right = _binomial_log_moment(lam, q, (k_right**2 + k_right) * ratio)
    return left, right


@lru_cache(maxsize=1024)
def _log_binom_pmf(trials: int, q: float) -> np.ndarray:
    ks = np.arange(trials + 1)
    pmf = _log_binom(trials, ks) + ks * math.log(q) + (trials - ks) * math.log1p(-q)
    pmf.setflags(write=False)
    return pmf


def _batched_max_moment_costs(
    deltas: np.ndarray, lam: int, q: float, sigma: float
) -> np.ndarray:
    """max(left, right) log-moment cost per deviation, vectorised over the
    Monte-Carlo samples (hot path of the per-step accountant)."""
    ratios = deltas / (2.0 * sigma**2)
    out = np.zeros(ratios.size)
    live = ratios > 0
    if not np.any(live):
        return out
    r = ratios[live]

    def log_moment(trials: int, coef: np.ndarray) -> np.ndarray:
        if q == 0:
            return np.zeros(r.size)  # K = 0 surely; coef[0] = 0 for both sides
        exponents = coef[None, :] * r[:, None]
        if q == 1:
            return exponents[:, -1]
        terms = _log_binom_pmf(trials, q)[None, :] + exponents
        peak = terms.max(axis=1, keepdims=True)
        return (peak + np.log(np.exp(terms - peak).sum(axis=1, keepdims=True)))[:, 0]

    k_left = np.arange(lam + 2)
    k_right = np.arange(lam + 1)
    left = log_moment(lam + 1, (k_left**2 - k_left).astype(float))
    right = log_moment(lam, (k_right**2 + k_right).astype(float))
    out[live] = np.maximum(left, right)
    return out


def bdp_step_cost(
    delta_samples: np.ndarray,
    lam: int,
    q: float,
    sigma: float,
    gamma: float,
) -> float:
    """Upper-confidence per-step cost at order lam from measured deviations.

    Each sample's cost is max(left, right) of the binomial log-moments; the
    step cost is a (1 - gamma) Student-t upper bound on the mean of the
    exponentiated costs, evaluated in log space. With fewer than five
    samples the empirical max is reported when it exceeds the t-bound.
    """
    deltas = np.asarray(delta_samples, dtype=float).ravel()
    if deltas.size == 0:
        raise ValueError("need at least one deviation sample")
    if not np.all(np.isfinite(deltas)) or np.any(deltas < 0):
        raise ValueError("squared deviations must be finite and >= 0")
    if int(lam) != lam or lam < 1:
        raise ValueError("order must be an integer >= 1")
    if not 0 <= q <= 1:
        raise ValueError("q must be in [0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0 < gamma < 1:
        raise ValueError("gamma must be in (0, 1)")

    costs = _batched_max_moment_costs(deltas, int(lam), q, sigma)
    m = costs.size
    if m == 1:
        return float(costs[0])

    # moment-space mean/std without leaving log space: y_i = exp(cost_i)
    log_mean = float(special.logsumexp(costs)) - math.log(m)
    ratios = np.exp(costs - log_mean)  # y_i / mean, each <= m
    spread = math.sqrt(float(np.sum((ratios - 1.0) ** 2)) / (m - 1))  # s / mean
    t_quant = _student_t_quantile(1.0 - gamma, m - 1)
    inflation = 1.0 + t_quant * spread / math.sqrt(m)
    if inflation <= 0:
        # only reachable for gamma > 0.5; fall back to the empirical max
        return float(costs.max())
    ucb = log_mean + math.log(inflation)
    if m < 5:
        return max(ucb, float(costs.max()))
    return ucb


@dataclass
class BdpLedger:
    """Cumulative per-order Monte-Carlo moment costs plus deviation stats."""

    lambdas: tuple[int, ...] = DEFAULT_MOMENT_ORDERS
    costs: np.ndarray = None  # type: ignore[assignment]
    steps: int = 0
    max_delta: float = 0.0
    sum_delta: float = 0.0
    n_delta: int = 0
    worst_case_delta: float | None = None

    def __post_init__(self) -> None:
        if not self.lambdas:
            raise ValueError("lambda grid must be nonempty")
        if self.costs is None:
            self.costs = np.zeros(len(self.lambdas))

    def step(
        self,
        delta_samples: np.ndarray,
        q: float,
        sigma: float,
        gamma: float,
    ) -> None:
        deltas = np.asarray(delta_samples, dtype=float).ravel()
        for i, lam in enumerate(self.lambdas):
            self.costs[i] += bdp_step_cost(deltas, lam, q, sigma, gamma)
        self.steps += 1
        self.max_delta = max(self.max_delta, float(deltas.max()))
        self.sum_delta += float(deltas.sum())
        self.n_delta += deltas.size

    @property
    def mean_delta(self) -> float:
        return self.sum_delta / self.n_delta if self.n_delta else 0.0

    @property
    def worst_case_fraction(self) -> float | None:
        """max measured deviation relative to the worst-case bound, if set."""
        if self.worst_case_delta is None or self.worst_case_delta == 0:
            return None
        return self.max_delta / self.worst_case_delta

    def copy(self) -> "BdpLedger":
        return BdpLedger(
            self.lambdas,
            self.costs.copy(),
            self.steps,
            self.max_delta,
            self.sum_delta,
            self.n_delta,
            self.worst_case_delta,
        )


def bdp_finalize(ledger: BdpLedger, beta: float, gamma: float) -> PrivacySpend:
    """Tail-bound conversion: epsilon(lambda) = (cost(lambda) - log beta) / lambda,
    minimized over the order grid, with delta = beta + gamma."""
    if not 0 < beta < 1 or not 0 < gamma < 1:
        raise ValueError("beta and gamma must be in (0, 1)")
    lambdas = np.asarray(ledger.lambdas, dtype=float)
    eps = (ledger.costs - math.log(beta)) / lambdas
    best = int(np.argmin(eps))
    return PrivacySpend(
        epsilon=float(eps[best]),
        delta=beta + gamma,
        regime="bayesian",
        order=float(lambdas[best]),
    )
