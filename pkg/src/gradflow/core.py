"""Shared domain types: targets, Gaussian states, ensembles, affine maps.

Every array-valued callable on a :class:`TargetDensity` is batched over
leading axes: ``x`` has shape ``(..., dim)``, ``log_density`` returns
``(...)``, ``grad_log`` returns ``(..., dim)`` and ``hess_log`` returns
``(..., dim, dim)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Optional

import numpy as np


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class GradFlowError(Exception):
    """Base class for all errors raised by this package."""


class SPDError(GradFlowError, ValueError):
    """A matrix that must be symmetric positive definite is not."""


class NonFiniteError(GradFlowError, FloatingPointError):
    """A target or drift evaluation produced inf or nan."""


class StepSizeError(GradFlowError, ValueError):
    """A time step violates the stability condition of a scheme."""


class ConfigError(GradFlowError, ValueError):
    """An experiment configuration is invalid."""


# ---------------------------------------------------------------------------
# SPD helpers
# ---------------------------------------------------------------------------

def symmetrize(C: np.ndarray) -> np.ndarray:
    if C.ndim == 2:
        return 0.5 * (C + C.T)
    return 0.5 * (C + np.swapaxes(C, -1, -2))


def _checked_eigh(C: np.ndarray, hint: str = "") -> tuple[np.ndarray, np.ndarray]:
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise SPDError(f"expected a square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise SPDError("matrix has non-finite entries")
    w, V = np.linalg.eigh(symmetrize(C))
    if w[0] <= 0.0:
        raise SPDError(_not_spd_msg(w[0], hint))
    return w, V


def _not_spd_msg(lo: float, hint: str) -> str:
    msg = f"matrix is not SPD: smallest eigenvalue {lo:.3e}"
    return msg + f" ({hint})" if hint else msg


def _small_entries(C: np.ndarray, hint: str):
    """Entries of a 1x1 or 2x2 SPD matrix as floats, or ``None`` for other shapes.

    Raises :class:`SPDError` if the matrix is small but not SPD.
    """
    if C.shape == (1, 1):
        c = float(C[0, 0])
        if not (c > 0.0 and math.isfinite(c)):
            raise SPDError(_not_spd_msg(c, hint))
        return (c,)
    if C.shape == (2, 2):
        (a, b1), (b2, d) = C.tolist()
        b = 0.5 * (b1 + b2)
        det = a * d - b * b
        tr = a + d
        if not math.isfinite(det + tr):
            raise SPDError("matrix has non-finite entries")
        if not (det > 0.0 and tr > 0.0):
            raise SPDError(_not_spd_msg(0.5 * (tr - math.hypot(a - d, 2.0 * b)), hint))
        return a, b, d, det, tr
    return None


def spd_factor(C: np.ndarray, hint: str = "") -> np.ndarray:
    """Symmetric square root ``L`` of an SPD matrix, so that ``L @ L.T == C``.

    Uses the eigendecomposition (closed form for 1x1 and 2x2), which stays
    well behaved when ``C`` is badly conditioned. Raises :class:`SPDError`
    if the smallest eigenvalue is not strictly positive.
    """
    C = np.asarray(C, dtype=float)
    e = _small_entries(C, hint)
    if e is not None:
        if len(e) == 1:
            return np.array([[math.sqrt(e[0])]])
        a, b, d, det, tr = e
        s = math.sqrt(det)
        r = 1.0 / math.sqrt(tr + 2.0 * s)
        return np.array([[(a + s) * r, b * r], [b * r, (d + s) * r]])
    w, V = _checked_eigh(C, hint)
    return (V * np.sqrt(w)) @ V.T


def spd_inverse(C: np.ndarray, hint: str = "") -> np.ndarray:
    """Inverse of an SPD matrix via its eigendecomposition (closed form up to 2x2)."""
    C = np.asarray(C, dtype=float)
    e = _small_entries(C, hint)
    if e is not None:
        if len(e) == 1:
            return np.array([[1.0 / e[0]]])
        a, b, d, det, _ = e
        return np.array([[d / det, -b / det], [-b / det, a / det]])
    w, V = _checked_eigh(C, hint)
    return symmetrize((V / w) @ V.T)


def spd_logdet(C: np.ndarray) -> float:
    w, _ = _checked_eigh(C)
    return float(np.sum(np.log(w)))


def is_spd(C: np.ndarray) -> bool:
    C = np.asarray(C, dtype=float)
    try:
        if _small_entries(C, "") is None:
            _checked_eigh(C)
    except SPDError:
        return False
    return True


# ---------------------------------------------------------------------------
# Target densities
# ---------------------------------------------------------------------------

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TargetDensity:
    """Unnormalized target density with analytic derivatives.

    Attributes:
        dim: Dimension of the parameter space.
        log_density: ``log rho_post`` up to an additive constant.
        grad_log: Gradient of ``log_density``.
        hess_log: Hessian of ``log_density``.
        name: Identifier used in configs and output metadata.
        params: Target parameters (e.g. ``{"lam": 0.1}``).
        posterior: Exact ``(mean, cov)`` when the target is Gaussian.
    """

    dim: int
    log_density: ArrayFn
    grad_log: ArrayFn
    hess_log: ArrayFn
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)
    posterior: Optional["GaussianState"] = None

    def shifted(self, c: float) -> "TargetDensity":
        """Same target with ``c`` added to the log-density."""
        f = self.log_density
        return replace(self, log_density=lambda x: f(x) + c)

    def check_finite(self, values: np.ndarray, points: np.ndarray, what: str,
                     label: str = "point") -> np.ndarray:
        """Return ``values`` unchanged, or raise naming the first bad ``label`` index."""
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values.reshape(values.shape[0], -1)))[0, 0]
            raise NonFiniteError(
                f"{self.name}: non-finite {what} at {label} index {bad}: {points[bad]}"
            )
        return values


# ---------------------------------------------------------------------------
# Gaussian states and ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianState:
    """Mean and covariance of a Gaussian density.

    Construction does not enforce positive definiteness, so degenerate
    empirical moments can be represented; call :meth:`validate` where an
    SPD covariance is required.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        C = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if C.shape != (m.size, m.size):
            raise ValueError(f"cov shape {C.shape} does not match mean size {m.size}")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", C)

    @property
    def dim(self) -> int:
        return self.mean.size

    def validate(self) -> "GaussianState":
        C = self.cov
        scale = max(np.abs(C).max(), np.finfo(float).tiny)
        if np.abs(C - C.T).max() > 1e-12 * scale:
            raise SPDError("covariance is not symmetric")
        _checked_eigh(C)
        return self


@dataclass(frozen=True)
class Ensemble:
    """``J`` particles in ``R^dim``, stored as a ``(J, dim)`` array."""

    particles: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.particles, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError(f"particles must have shape (J, dim), got {X.shape}")
        object.__setattr__(self, "particles", X)

    @property
    def J(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


# ---------------------------------------------------------------------------
# Affine maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineMap:
    """Invertible affine map ``theta -> A theta + b``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape != (b.size, b.size):
            raise ValueError(f"A shape {A.shape} does not match b size {b.size}")
        sign, logdet = np.linalg.slogdet(A)
        if sign == 0 or not np.isfinite(logdet) or np.linalg.cond(A) > 1e14:
            raise ValueError("affine map is singular (A is not invertible)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.b.size

    @property
    def logabsdet(self) -> float:
        return float(np.linalg.slogdet(self.A)[1])

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta) @ self.A.T + self.b

    def inverse(self) -> "AffineMap":
        Ainv = np.linalg.inv(self.A)
        return AffineMap(Ainv, -Ainv @ self.b)

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """The map ``self(inner(theta))``."""
        return AffineMap(self.A @ inner.A, self.A @ inner.b + self.b)


def pushforward_target(phi: AffineMap, rho: TargetDensity) -> TargetDensity:
    """Density of ``phi(theta)`` when ``theta ~ rho``.

    ``log rho~(x) = log rho(phi^{-1}(x)) - log|det A|``; derivatives follow
    by the chain rule.
    """
    if phi.dim != rho.dim:
        raise ValueError(f"map dimension {phi.dim} != target dimension {rho.dim}")
    inv = phi.inverse()
    Ainv = inv.A
    shift = phi.logabsdet
    f, g, h = rho.log_density, rho.grad_log, rho.hess_log

    def log_density(x):
        return f(inv(x)) - shift

    def grad_log(x):
        return g(inv(x)) @ Ainv

    def hess_log(x):
        return Ainv.T @ h(inv(x)) @ Ainv

    posterior = None
    if rho.posterior is not None:
        posterior = pushforward_gaussian(phi, rho.posterior)
    return TargetDensity(
        dim=rho.dim,
        log_density=log_density,
        grad_log=grad_log,
        hess_log=hess_log,
        name=f"pushforward({rho.name})",
        params=dict(rho.params),
        posterior=posterior,
    )


def pushforward_gaussian(phi: AffineMap, g: GaussianState) -> GaussianState:
    """``(A m + b, A C A^T)``."""
    A = phi.A
    return GaussianState(A @ g.mean + phi.b, symmetrize(A @ g.cov @ A.T))


def pushforward_ensemble(phi: AffineMap, e: Ensemble) -> Ensemble:
    return Ensemble(phi(e.particles))
