"""Interacting-particle samplers for the Wasserstein and Stein gradient flows.

All drifts of one step are computed from the pre-step ensemble and applied
at once (synchronous update), so a step is a pure function of the ensemble
and the injected noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (
    Ensemble,
    GaussianState,
    SPDError,
    TargetDensity,
    spd_factor,
    spd_inverse,
    symmetrize,
)
from .gaussian_flows import AffineDrift

_RANK_HINT = "empirical covariance is rank deficient; increase J to at least dim + 2"


# ---------------------------------------------------------------------------
# Noise and moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseStream:
    """Reproducible standard-normal draws keyed by ``(seed, step)``.

    Each step gets its own generator seeded from ``(seed, 1, step)``, and the
    whole ``(J, dim)`` block is drawn up front with row ``j`` belonging to
    particle ``j``. Draws therefore do not depend on how earlier steps were
    scheduled or on how the per-particle work is split.
    """

    seed: int = 0

    def draw(self, step: int, J: int, dim: int) -> np.ndarray:
        if step < 0:
            raise ValueError("step index must be nonnegative")
        ss = np.random.SeedSequence([int(self.seed) & (2**64 - 1), 1, int(step)])
        return np.random.default_rng(ss).standard_normal((J, dim))


def empirical_moments(e: Ensemble) -> GaussianState:
    """Mean and biased (``1/J``) covariance of the particles, two-pass."""
    if e.J < 2:
        raise ValueError(f"empirical moments need J >= 2 particles, got {e.J}")
    X = e.particles
    m = X.mean(axis=0)
    D = X - m
    return GaussianState(m, symmetrize(D.T @ D / e.J))


def _ensemble_cov(e: Ensemble) -> np.ndarray:
    """Empirical covariance, rejected if numerically rank deficient."""
    C = empirical_moments(e).cov
    w = np.linalg.eigvalsh(C)
    if not w[0] > 1e-12 * max(w[-1], np.finfo(float).tiny):
        raise SPDError(f"matrix is not SPD: smallest eigenvalue {w[0]:.3e} ({_RANK_HINT})")
    return C


def _grad(rho: TargetDensity, X: np.ndarray) -> np.ndarray:
    if rho.dim != X.shape[1]:
        raise ValueError(f"ensemble dimension {X.shape[1]} != target dimension {rho.dim}")
    return rho.check_finite(rho.grad_log(X), X, "drift", label="particle")


# ---------------------------------------------------------------------------
# Langevin dynamics
# ---------------------------------------------------------------------------

def _check_dt(dt: float) -> None:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")


def langevin_step(e: Ensemble, rho: TargetDensity, dt: float,
                  xi: Optional[np.ndarray] = None) -> Ensemble:
    """Euler-Maruyama step of ``d theta = grad log rho dt + sqrt(2) dW``.

    Args:
        e: Current ensemble.
        rho: Target density.
        dt: Time step.
        xi: Standard-normal draws of shape ``(J, dim)``; ``None`` disables
            the noise, leaving explicit-Euler gradient ascent.
    """
    _check_dt(dt)
    X = e.particles
    out = X + _grad(rho, X) * dt
    if xi is not None:
        out = out + math.sqrt(2.0 * dt) * xi
    return Ensemble(out)


def ai_langevin_step(
    e: Ensemble,
    rho: TargetDensity,
    dt: float,
    xi: Optional[np.ndarray] = None,
    cov: Optional[np.ndarray] = None,
    factor: Optional[np.ndarray] = None,
) -> Ensemble:
    """Affine-invariant Langevin step ``d theta = C grad log rho dt + sqrt(2 C) dW``.

    ``C`` is the empirical covariance of the pre-step ensemble unless ``cov``
    overrides it, and the noise is ``L xi`` with ``L`` the symmetric square
    root of ``C`` unless ``factor`` overrides it (any ``L`` with
    ``L L^T = C`` gives the same law).
    """
    _check_dt(dt)
    X = e.particles
    C = _ensemble_cov(e) if cov is None else np.asarray(cov, dtype=float)
    L = spd_factor(C, _RANK_HINT) if factor is None else np.asarray(factor, dtype=float)
    out = X + (_grad(rho, X) @ C.T) * dt
    if xi is not None:
        out = out + math.sqrt(2.0 * dt) * (xi @ L.T)
    return Ensemble(out)


# ---------------------------------------------------------------------------
# Stein dynamics
# ---------------------------------------------------------------------------

KERNEL_KINDS = ("rbf_median", "ai_mahalanobis", "bilinear")


def stein_rbf_scaling(dim: int, J: int) -> float:
    """``(1 + 4 log(J + 1) / dim)^(dim / 2)``.

    Normalizes the double Gaussian integral of the kernel once ``med^2 I``
    is replaced by ``dim C``; the result does not depend on ``C``.
    """
    return (1.0 + 4.0 * math.log(J + 1) / dim) ** (dim / 2.0)


def ai_kernel_scaling(dim: int) -> float:
    """``(1 + 2 / dim)^(dim / 2)``, the exact normalizing constant of the AI kernel."""
    return (1.0 + 2.0 / dim) ** (dim / 2.0)


def median_bandwidth(X: np.ndarray) -> float:
    """``h = med^2 / log(J + 1)`` with ``med`` the median pairwise distance.

    If more than half of the pairs coincide, the mean squared pairwise
    distance stands in for ``med^2``; if all particles coincide the kernel
    is constant and ``h = 1`` is returned.
    """
    J = X.shape[0]
    if J < 2:
        raise ValueError("median bandwidth is degenerate for a single particle (med = 0)")
    iu = np.triu_indices(J, k=1)
    sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)[iu]
    med2 = float(np.median(np.sqrt(sq))) ** 2
    if med2 == 0.0:
        med2 = float(sq.mean())
    if med2 == 0.0:
        return 1.0
    return med2 / math.log(J + 1)


@dataclass(frozen=True)
class KernelSpec:
    """Stein kernel ``kappa(theta, theta', rho)``.

    Attributes:
        kind: ``"rbf_median"`` (``s exp(-|d|^2 / h)`` with median bandwidth),
            ``"ai_mahalanobis"`` (``s exp(-d^T C^{-1} d / (2 dim))``) or
            ``"bilinear"`` (``(theta - m)^T A (theta' - m) + b``).
        scale: Multiplicative constant ``s``; ``None`` uses the normalizing
            constant of the kind. Ignored for ``bilinear``.
        A_rule, b_rule: Moment-dependent ``A`` and ``b`` of the bilinear kernel.
    """

    kind: str = "rbf_median"
    scale: Optional[float] = None
    A_rule: Optional[Callable[[GaussianState], np.ndarray]] = None
    b_rule: Optional[Callable[[GaussianState], float]] = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if (self.kind == "bilinear") != (self.A_rule is not None and self.b_rule is not None):
            raise ValueError("bilinear kernels need A_rule and b_rule, other kinds take none")

    def scaling(self, dim: int, J: int) -> float:
        if self.scale is not None:
            return float(self.scale)
        if self.kind == "rbf_median":
            return stein_rbf_scaling(dim, J)
        if self.kind == "ai_mahalanobis":
            return ai_kernel_scaling(dim)
        return 1.0

    def gram(self, X: np.ndarray, Y: Optional[np.ndarray] = None,
             ref: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
        """Kernel matrix and its gradient in the second argument.

        Returns ``K[i, j] = kappa(x_i, y_j)`` and
        ``dK[i, j] = grad_{y_j} kappa(x_i, y_j)``. Ensemble-dependent
        parameters (bandwidth, covariance, mean) come from ``ref``, which
        defaults to ``X``.
        """
        X = np.asarray(X, dtype=float)
        Y = X if Y is None else np.asarray(Y, dtype=float)
        ref = X if ref is None else np.asarray(ref, dtype=float)
        J, dim = ref.shape
        D = X[:, None, :] - Y[None, :, :]
        if self.kind == "rbf_median":
            h = median_bandwidth(ref)
            K = self.scaling(dim, J) * np.exp(-np.sum(D * D, axis=-1) / h)
            return K, (2.0 / h) * K[..., None] * D
        g = empirical_moments(Ensemble(ref))
        if self.kind == "ai_mahalanobis":
            Cinv = spd_inverse(g.cov, _RANK_HINT)
            CinvD = D @ Cinv
            K = self.scaling(dim, J) * np.exp(-np.sum(D * CinvD, axis=-1) / (2.0 * dim))
            return K, K[..., None] * CinvD / dim
        A = np.asarray(self.A_rule(g), dtype=float)
        b = float(self.b_rule(g))
        U = (X - g.mean) @ A
        K = U @ (Y - g.mean).T + b
        return K, np.broadcast_to(U[:, None, :], D.shape)

    def __call__(self, theta, theta2, ref: np.ndarray) -> float:
        """``kappa(theta, theta2)`` with parameters taken from the ensemble ``ref``."""
        x = np.atleast_2d(np.asarray(theta, dtype=float))
        y = np.atleast_2d(np.asarray(theta2, dtype=float))
        return float(self.gram(x, y, ref=ref)[0][0, 0])


RBF_MEDIAN = KernelSpec("rbf_median")
AI_MAHALANOBIS = KernelSpec("ai_mahalanobis")


def stein_drift(e: Ensemble, rho: TargetDensity, kernel: KernelSpec,
                precond: Optional[np.ndarray] = None) -> np.ndarray:
    """Particle Stein drift ``(1/J) sum_j [kappa_ij P g_j + div_{theta_j}(kappa_ij P)]``.

    ``P`` is ``precond`` (identity if ``None``) and is treated as constant
    within the step.
    """
    X = e.particles
    G = _grad(rho, X)
    K, dK = kernel.gram(X)
    J = e.J
    drift = (K @ G + dK.sum(axis=1)) / J
    if precond is not None:
        drift = drift @ np.asarray(precond).T
    return drift


def svgd_step(e: Ensemble, rho: TargetDensity, dt: float,
              kernel: KernelSpec = RBF_MEDIAN) -> Ensemble:
    """Forward-Euler step of the Stein flow with ``P = I``."""
    _check_dt(dt)
    return Ensemble(e.particles + dt * stein_drift(e, rho, kernel))


def ai_svgd_step(e: Ensemble, rho: TargetDensity, dt: float,
                 kernel: KernelSpec = AI_MAHALANOBIS) -> Ensemble:
    """Forward-Euler step of the affine-invariant Stein flow, ``P = C(rho)``.

    The divergence term ``div_{theta'}(kappa C)`` reduces to
    ``kappa (theta - theta') / dim`` for the Mahalanobis kernel.
    """
    _check_dt(dt)
    C = _ensemble_cov(e)
    return Ensemble(e.particles + dt * stein_drift(e, rho, kernel, precond=C))


# ---------------------------------------------------------------------------
# Affine mean-field dynamics
# ---------------------------------------------------------------------------

def affine_meanfield_step(e: Ensemble, drift: AffineDrift, m: np.ndarray, dt: float) -> Ensemble:
    """``theta_j <- theta_j + (A (theta_j - m) + b) dt``.

    Maps Gaussian ensembles to Gaussian ensembles, so the law follows the
    moment ODE whose coefficients generated ``drift``.
    """
    _check_dt(dt)
    X = e.particles
    m = np.asarray(m, dtype=float)
    return Ensemble(X + ((X - m) @ drift.A_field.T + drift.b_field) * dt)


def initial_ensemble(g0: GaussianState, J: int, seed: int) -> Ensemble:
    """``J`` draws from ``N(m0, C0)``, seeded from ``(seed, 0)`` (disjoint from the noise keys)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0]))
    Z = rng.standard_normal((J, g0.dim))
    return Ensemble(g0.mean + Z @ spd_factor(g0.cov).T)


PARTICLE_FLOW_IDS = ("langevin", "ai-langevin", "svgd", "ai-svgd")
