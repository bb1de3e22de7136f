"""Test posteriors with analytic derivatives and reference statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import GaussianState, TargetDensity, spd_inverse, symmetrize


def _check_lam(lam: float) -> float:
    lam = float(lam)
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return lam


def _split(x):
    x = np.asarray(x, dtype=float)
    return x[..., 0], x[..., 1]


def _hess2(h11, h12, h22):
    h11, h12, h22 = np.broadcast_arrays(h11, h12, h22)
    return np.stack([np.stack([h11, h12], -1), np.stack([h12, h22], -1)], -2)


# ---------------------------------------------------------------------------
# The three 2D posteriors
# ---------------------------------------------------------------------------

def gaussian_target(lam: float) -> TargetDensity:
    """``Phi(theta) = 0.5 * theta^T diag(1, lam) theta``."""
    lam = _check_lam(lam)
    prec = np.array([1.0, lam])
    hess = -np.diag(prec)

    def log_density(x):
        x = np.asarray(x, dtype=float)
        return -0.5 * np.sum(prec * x * x, axis=-1)

    def grad_log(x):
        return -prec * np.asarray(x, dtype=float)

    def hess_log(x):
        out = np.empty(np.shape(x)[:-1] + (2, 2))
        out[...] = hess
        return out

    return TargetDensity(
        dim=2,
        log_density=log_density,
        grad_log=grad_log,
        hess_log=hess_log,
        name="gaussian",
        params={"lam": lam},
        posterior=GaussianState(np.zeros(2), np.diag(1.0 / prec)),
    )


def logconcave_target(lam: float) -> TargetDensity:
    """``Phi = (sqrt(lam) t1 - t2)^2 / 20 + t2^4 / 20``."""
    lam = _check_lam(lam)
    s = math.sqrt(lam)

    def log_density(x):
        x1, x2 = _split(x)
        return -((s * x1 - x2) ** 2 + x2**4) / 20.0

    def grad_log(x):
        x1, x2 = _split(x)
        r = s * x1 - x2
        return -np.stack([s * r / 10.0, -r / 10.0 + x2**3 / 5.0], -1)

    def hess_log(x):
        _, x2 = _split(x)
        return -_hess2(lam / 10.0, -s / 10.0, 0.1 + 0.6 * x2**2)

    return TargetDensity(
        dim=2,
        log_density=log_density,
        grad_log=grad_log,
        hess_log=hess_log,
        name="logconcave",
        params={"lam": lam},
    )


def rosenbrock_target(lam: float) -> TargetDensity:
    """``Phi = lam (t2 - t1^2)^2 / 20 + (1 - t1)^2 / 20``."""
    lam = _check_lam(lam)

    def log_density(x):
        x1, x2 = _split(x)
        return -(lam * (x2 - x1**2) ** 2 + (1.0 - x1) ** 2) / 20.0

    def grad_log(x):
        x1, x2 = _split(x)
        d = x2 - x1**2
        return np.stack([lam * x1 * d / 5.0 + (1.0 - x1) / 10.0, -lam * d / 10.0], -1)

    def hess_log(x):
        x1, x2 = _split(x)
        return _hess2(lam * (x2 - 3.0 * x1**2) / 5.0 - 0.1, lam * x1 / 5.0, -lam / 10.0)

    return TargetDensity(
        dim=2,
        log_density=log_density,
        grad_log=grad_log,
        hess_log=hess_log,
        name="rosenbrock",
        params={"lam": lam},
    )


# ---------------------------------------------------------------------------
# 1D slow-convergence family
# ---------------------------------------------------------------------------

def _double_factorial_odd(k: int) -> int:
    """``(2k-2)! / (2^(k-1) (k-1)!)``, the moment ``E[z^(2k-2)]`` of N(0, 1)."""
    return math.factorial(2 * k - 2) // (2 ** (k - 1) * math.factorial(k - 1))


def polynomial_slow_coefficients(K: int) -> np.ndarray:
    """Coefficients ``a_2, a_4, ..., a_{4K+2}`` of the slow-convergence potential.

    Chosen so that ``1 - f(C) C = -(C - 1)^(2K+1)`` where
    ``f(C) = -E_{N(0,C)}[d^2/dtheta^2 log rho]``.
    """
    K = int(K)
    if K < 1:
        raise ValueError("K must be >= 1")
    n = 2 * K + 1
    a = np.empty(n)
    for k in range(1, n + 1):
        lhs = 2 * k * (2 * k - 1) * _double_factorial_odd(k)
        a[k - 1] = math.comb(n, k) * (-1) ** (n - k) / lhs
    return a


def polynomial_slow_f(K: int, C):
    """``f(C) = sum_k 2k(2k-1) a_2k C^(k-1) (2k-3)!!``."""
    a = polynomial_slow_coefficients(K)
    C = np.asarray(C, dtype=float)
    out = np.zeros_like(C)
    for k in range(1, a.size + 1):
        out = out + 2 * k * (2 * k - 1) * a[k - 1] * C ** (k - 1) * _double_factorial_odd(k)
    return out


def polynomial_slow_target(K: int = 1) -> TargetDensity:
    """1D target ``Phi(theta) = sum_k a_2k theta^(2k)``; see :func:`polynomial_slow_coefficients`."""
    a = polynomial_slow_coefficients(K)
    powers = 2 * np.arange(1, a.size + 1)

    def log_density(x):
        t = np.asarray(x, dtype=float)[..., 0]
        return -sum(c * t**p for c, p in zip(a, powers))

    def grad_log(x):
        t = np.asarray(x, dtype=float)[..., 0]
        return -sum(c * p * t ** (p - 1) for c, p in zip(a, powers))[..., None]

    def hess_log(x):
        t = np.asarray(x, dtype=float)[..., 0]
        return -sum(c * p * (p - 1) * t ** (p - 2) for c, p in zip(a, powers))[..., None, None]

    return TargetDensity(
        dim=1,
        log_density=log_density,
        grad_log=grad_log,
        hess_log=hess_log,
        name="poly-slow",
        params={"K": int(K)},
    )


# ---------------------------------------------------------------------------
# Linear-Gaussian inverse problem
# ---------------------------------------------------------------------------

def likelihood_target(H, R, y) -> TargetDensity:
    """``log L(theta) = -0.5 (H theta - y)^T R^{-1} (H theta - y)``.

    Not normalizable when ``H`` has a null space; used as the potential of
    Kalman-Bucy and tempering flows.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if H.shape[0] != y.size or R.shape != (y.size, y.size):
        raise ValueError(f"dimension mismatch: H {H.shape}, R {R.shape}, y {y.shape}")
    Rinv = spd_inverse(R)
    HtRinv = H.T @ Rinv
    HtRinvH = symmetrize(HtRinv @ H)
    d = H.shape[1]

    def log_density(x):
        r = np.asarray(x, dtype=float) @ H.T - y
        return -0.5 * np.einsum("...i,ij,...j->...", r, Rinv, r)

    def grad_log(x):
        r = np.asarray(x, dtype=float) @ H.T - y
        return -r @ HtRinv.T

    def hess_log(x):
        out = np.empty(np.shape(x)[:-1] + (d, d))
        out[...] = -HtRinvH
        return out

    return TargetDensity(
        dim=d,
        log_density=log_density,
        grad_log=grad_log,
        hess_log=hess_log,
        name="likelihood",
        params={"H": H, "R": R, "y": y},
    )


def linear_gaussian_target(H, R, y, prior: GaussianState) -> TargetDensity:
    """Posterior of ``y = H theta + noise``, noise ``N(0, R)``, Gaussian prior."""
    lik = likelihood_target(H, R, y)
    H, R, y = lik.params["H"], lik.params["R"], lik.params["y"]
    if H.shape[1] != prior.dim:
        raise ValueError(f"H has {H.shape[1]} columns but prior has dimension {prior.dim}")
    m0 = prior.mean
    P0 = spd_inverse(prior.cov)
    Rinv = spd_inverse(R)
    post_prec = symmetrize(P0 + H.T @ Rinv @ H)
    post_cov = spd_inverse(post_prec)
    post_mean = post_cov @ (P0 @ m0 + H.T @ Rinv @ y)
    d = prior.dim

    def log_density(x):
        x = np.asarray(x, dtype=float)
        dx = x - m0
        return lik.log_density(x) - 0.5 * np.einsum("...i,ij,...j->...", dx, P0, dx)

    def grad_log(x):
        x = np.asarray(x, dtype=float)
        return lik.grad_log(x) - (x - m0) @ P0

    def hess_log(x):
        out = np.empty(np.shape(x)[:-1] + (d, d))
        out[...] = -post_prec
        return out

    return TargetDensity(
        dim=d,
        log_density=log_density,
        grad_log=grad_log,
        hess_log=hess_log,
        name="linear-gaussian",
        params={"H": H, "R": R, "y": y, "prior": prior},
        posterior=GaussianState(post_mean, post_cov),
    )


# ---------------------------------------------------------------------------
# 1D Gaussian mixtures (grid-flow targets)
# ---------------------------------------------------------------------------

def gaussian_mixture_1d_target(
    weights: Sequence[float], means: Sequence[float], sds: Sequence[float]
) -> TargetDensity:
    w = np.asarray(weights, dtype=float)
    mu = np.asarray(means, dtype=float)
    sd = np.asarray(sds, dtype=float)
    if not (w.shape == mu.shape == sd.shape) or w.ndim != 1:
        raise ValueError("weights, means and sds must be 1D sequences of equal length")
    if np.any(w <= 0) or np.any(sd <= 0):
        raise ValueError("weights and sds must be positive")
    w = w / w.sum()
    logc = np.log(w) - np.log(sd) - 0.5 * math.log(2 * math.pi)

    def _components(x):
        t = np.asarray(x, dtype=float)[..., 0][..., None]
        z = (t - mu) / sd
        lp = logc - 0.5 * z * z
        top = lp.max(axis=-1, keepdims=True)
        log_norm = top[..., 0] + np.log(np.exp(lp - top).sum(axis=-1))
        resp = np.exp(lp - log_norm[..., None])
        return t, log_norm, resp

    def log_density(x):
        return _components(x)[1]

    def grad_log(x):
        t, _, r = _components(x)
        return np.sum(r * (-(t - mu) / sd**2), axis=-1)[..., None]

    def hess_log(x):
        t, _, r = _components(x)
        g = -(t - mu) / sd**2
        gbar = np.sum(r * g, axis=-1)
        h = np.sum(r * (g * g - 1.0 / sd**2), axis=-1) - gbar**2
        return h[..., None, None]

    mean = float(np.sum(w * mu))
    var = float(np.sum(w * (sd**2 + mu**2)) - mean**2)
    posterior = GaussianState([mean], [[var]]) if w.size == 1 else None
    return TargetDensity(
        dim=1,
        log_density=log_density,
        grad_log=grad_log,
        hess_log=hess_log,
        name="mixture-1d",
        params={"weights": w, "means": mu, "sds": sd, "mean": mean, "var": var},
        posterior=posterior,
    )


# ---------------------------------------------------------------------------
# Reference statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceStats:
    """Mean, covariance and ``E[cos(w^T theta + b)]`` for a set of draws.

    The ``*_se`` fields are filled only by Monte Carlo estimates.
    """

    mean: np.ndarray
    cov: np.ndarray
    omegas: np.ndarray
    offsets: np.ndarray
    cos_values: np.ndarray
    mean_se: Optional[np.ndarray] = None
    cov_se: Optional[np.ndarray] = None
    cos_se: Optional[np.ndarray] = None

    @property
    def cos_moments(self) -> list[tuple[np.ndarray, float, float]]:
        return [(w, float(b), float(v)) for w, b, v in zip(self.omegas, self.offsets, self.cos_values)]


def cos_draws(dim: int, n: int = 20, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` draws of ``omega ~ N(0, I)`` and ``b ~ U(0, 2 pi)``."""
    rng = np.random.default_rng(seed)
    omegas = rng.standard_normal((n, dim))
    offsets = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return omegas, offsets


def gaussian_cos_moment(g: GaussianState, omegas: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Closed form ``E_{N(m,C)}[cos(w^T theta + b)] = exp(-w^T C w / 2) cos(w^T m + b)``."""
    omegas = np.atleast_2d(omegas)
    quad = np.einsum("ni,ij,nj->n", omegas, g.cov, omegas)
    return np.exp(-0.5 * quad) * np.cos(omegas @ g.mean + offsets)


def gaussian_reference_stats(g: GaussianState, omegas, offsets) -> ReferenceStats:
    return ReferenceStats(
        mean=g.mean.copy(),
        cov=g.cov.copy(),
        omegas=np.atleast_2d(omegas),
        offsets=np.asarray(offsets, dtype=float),
        cos_values=gaussian_cos_moment(g, omegas, offsets),
    )


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

TARGET_IDS = ("gaussian", "logconcave", "rosenbrock", "poly-slow", "linear-gaussian", "mixture-1d")


def make_target(target_id: str, **params) -> TargetDensity:
    """Build a target from its string identifier."""
    if target_id == "gaussian":
        return gaussian_target(params.get("lam", 1.0))
    if target_id == "logconcave":
        return logconcave_target(params.get("lam", 1.0))
    if target_id == "rosenbrock":
        return rosenbrock_target(params.get("lam", 1.0))
    if target_id == "poly-slow":
        return polynomial_slow_target(int(params.get("K", 1)))
    if target_id == "linear-gaussian":
        prior = params.get("prior")
        if not isinstance(prior, GaussianState):
            prior = GaussianState(params["prior_mean"], params["prior_cov"])
        return linear_gaussian_target(params["H"], params["R"], params["y"], prior)
    if target_id == "mixture-1d":
        return gaussian_mixture_1d_target(params["weights"], params["means"], params["sds"])
    raise KeyError(f"unknown target id {target_id!r}; expected one of {TARGET_IDS}")
