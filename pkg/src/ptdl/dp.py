"""Differentially private SGD and the Renyi-DP accountant for the sampled Gaussian mechanism.

The accountant works on a grid of Renyi orders. One step of the sampled
Gaussian mechanism (sampling rate ``q``, noise multiplier ``sigma``) costs
the larger of the two divergences between N(0, sigma^2) and the mixture
(1-q) N(0, sigma^2) + q N(1, sigma^2), taken in both directions. Steps
compose additively order by order, and the tightest (epsilon, delta)
guarantee is the minimum over the grid of ``rdp + log(1/delta)/(alpha-1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate
from scipy.special import gammaln, logsumexp

from . import model as _model
from .model import ModelSpec

DEFAULT_ALPHAS: tuple[float, ...] = (1.25, 1.5, 1.75, *map(float, range(2, 65)), 128.0, 256.0)

QUAD_EPSABS = 1e-12


class IntegrationError(RuntimeError):
    """Numerical quadrature did not reach the requested tolerance."""


class NonFiniteGradientError(FloatingPointError):
    """A per-example gradient contained inf or NaN."""


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 10.0
    noise_multiplier: float = 2.0
    sampling_rate: float = 0.1
    delta: float = 1e-3

    def __post_init__(self):
        if self.clip_norm <= 0 or self.noise_multiplier <= 0:
            raise ValueError("clip_norm and noise_multiplier must be positive")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError("sampling_rate must lie in (0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class RdpLedger:
    """Per-step RDP curve over ``alpha_grid`` and the number of composed steps."""

    alpha_grid: tuple[float, ...]
    eps_per_step: tuple[float, ...]
    steps: int = 1

    @property
    def rdp(self) -> np.ndarray:
        return self.steps * np.asarray(self.eps_per_step)


@dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float
    optimal_alpha: float


# ------------------------------------------------------------------ DP-SGD


def clip_gradient(grad: np.ndarray, c: float) -> np.ndarray:
    if c <= 0:
        raise ValueError("clip norm must be positive")
    norm = float(np.linalg.norm(grad))
    return grad / max(1.0, norm / c)


def dp_sgd_step(
    spec: ModelSpec,
    theta: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    lr: float,
    cfg: DpConfig,
    rng: np.random.Generator | None,
    *,
    add_noise: bool = True,
    batch_size: int | None = None,
) -> np.ndarray:
    """One DP-SGD update ``theta - lr * (mean clipped gradient + noise)``.

    ``batch_size`` is the normaliser ``b``; it defaults to ``len(X)`` and
    should be the expected batch size under Poisson sampling, where the
    realised batch may be empty. Noise has per-coordinate std
    ``noise_multiplier * clip_norm / b`` and is drawn once per step.
    """
    b = len(X) if batch_size is None else batch_size
    if b < 1:
        raise ValueError("batch size must be >= 1")
    grad_sum, _ = _model.clipped_grad_sum(spec, theta, X, y, cfg.clip_norm)
    if not np.all(np.isfinite(grad_sum)):
        raise NonFiniteGradientError("non-finite gradient in DP-SGD step")
    update = grad_sum / b
    if add_noise:
        update = update + rng.normal(0.0, cfg.noise_multiplier * cfg.clip_norm / b, size=theta.shape)
    return theta - lr * update


# ------------------------------------------------------------------ accountant


def _log_ratio(z: np.ndarray, q: float, sigma: float) -> np.ndarray:
    # log of mixture density over base density: log((1-q) + q exp((2z-1)/(2 sigma^2)))
    shift = (2.0 * z - 1.0) / (2.0 * sigma**2)
    if q == 1.0:
        return shift
    return np.logaddexp(math.log1p(-q), math.log(q) + shift)


def _log_moment_quad(q: float, sigma: float, lam: float) -> float:
    """log of the integral of N(z; 0, sigma^2) * ratio(z)^lam over the real line.

    ``lam = alpha`` gives the moment of the mixture against the base
    Gaussian, ``lam = 1 - alpha`` the reverse direction.
    """

    def logf(z):
        return -(z**2) / (2.0 * sigma**2) - math.log(sigma * math.sqrt(2.0 * math.pi)) + lam * _log_ratio(
            z, q, sigma
        )

    pad = 40.0 * sigma + 10.0
    lo = min(0.0, lam) - pad
    hi = max(1.0, lam) + pad
    step = min(sigma, 1.0) / 20.0
    grid = np.linspace(lo, hi, int(math.ceil((hi - lo) / step)) + 1)
    lg = logf(grid)
    peak = float(lg.max())
    keep = grid[lg - peak > -80.0]
    a, b = float(keep[0]) - 2 * step, float(keep[-1]) + 2 * step
    points = np.linspace(a, b, 50)[1:-1]
    val, err = integrate.quad(
        lambda z: math.exp(logf(z) - peak),
        a,
        b,
        points=points,
        limit=2000,
        epsabs=QUAD_EPSABS,
        epsrel=1e-11,
    )
    if not val > 0 or err > 1e-8 * val:
        raise IntegrationError(f"quadrature did not converge (q={q}, sigma={sigma}, lam={lam}, err={err})")
    return peak + math.log(val)


def _log_moment_binomial(q: float, sigma: float, alpha: int) -> float:
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    if q == 1.0:
        return alpha * (alpha - 1) / (2.0 * sigma**2)
    terms = log_binom + (alpha - k) * math.log1p(-q) + k * math.log(q) + (k * k - k) / (2.0 * sigma**2)
    return float(logsumexp(terms))


def rdp_sgm_step(q: float, sigma: float, alpha: float) -> float:
    """RDP of order ``alpha`` for one step of the sampled Gaussian mechanism.

    Integer orders take the forward divergence from the binomial expansion,
    other orders from adaptive quadrature; the reverse divergence is always
    integrated numerically, and the maximum of the two is returned.
    """
    if alpha <= 1:
        raise ValueError("alpha must exceed 1")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if float(alpha).is_integer():
        log_fwd = _log_moment_binomial(q, sigma, int(alpha))
    else:
        log_fwd = _log_moment_quad(q, sigma, alpha)
    log_rev = _log_moment_quad(q, sigma, 1.0 - alpha)
    return max(0.0, max(log_fwd, log_rev) / (alpha - 1.0))


def rdp_ledger(q: float, sigma: float, alphas=DEFAULT_ALPHAS) -> RdpLedger:
    """One-step ledger over ``alphas``."""
    alphas = tuple(float(a) for a in alphas)
    if not alphas:
        raise ValueError("empty alpha grid")
    return RdpLedger(alphas, tuple(rdp_sgm_step(q, sigma, a) for a in alphas), 1)


def compose(ledger: RdpLedger, steps: int) -> RdpLedger:
    """Run the mechanism recorded in ``ledger`` ``steps`` times in sequence."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    return replace(ledger, steps=ledger.steps * steps)


def to_dp(ledger: RdpLedger, delta: float) -> PrivacySpend:
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if not ledger.alpha_grid:
        raise ValueError("empty alpha grid")
    alphas = np.asarray(ledger.alpha_grid)
    eps = ledger.rdp + math.log(1.0 / delta) / (alphas - 1.0)
    i = int(np.argmin(eps))
    return PrivacySpend(float(eps[i]), delta, float(alphas[i]))


def agent_epsilon(q: float, sigma: float, steps: int, delta: float, alphas=DEFAULT_ALPHAS) -> PrivacySpend:
    return to_dp(compose(rdp_ledger(q, sigma, alphas), steps), delta)


def framework_per_round_loss(agent_losses) -> float:
    """Per-round framework loss: agents train on disjoint shards, so the max."""
    losses = list(agent_losses)
    if not losses:
        raise ValueError("no agent losses")
    return max(losses)


def topology_budget(n_acrs: int, per_round_eps: float, topology_kind: str, num_agents: int) -> float:
    """Total privacy loss after ``n_acrs`` communication rounds on a topology.

    A round costs K ACRs on a chain, log2(K) on a tree and 1 on a star, and
    rounds compose sequentially.
    """
    if n_acrs < 0:
        raise ValueError("n_acrs must be >= 0")
    kind = topology_kind.replace("binary_", "")
    if kind == "chain":
        return n_acrs * per_round_eps / num_agents
    if kind == "tree":
        if num_agents < 2:
            raise ValueError("a tree needs at least 2 agents")
        return n_acrs * per_round_eps / math.log2(num_agents)
    if kind == "star":
        return n_acrs * per_round_eps
    raise ValueError(f"unknown topology kind {topology_kind!r}")
