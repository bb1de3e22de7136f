"""Moment ODEs of the Gaussian-approximate gradient flows.

Each flow evolves ``(m, C)`` with right-hand sides built from the two
Gaussian expectations ``E[grad log rho]`` and ``E[hess log rho]``, which
are evaluated by the unscented transform unless another rule is given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Union

import numpy as np

from .core import (
    GaussianState,
    SPDError,
    TargetDensity,
    is_spd,
    spd_inverse,
    symmetrize,
)
from .quadrature import (
    SigmaPointSet,
    expected_grad_log,
    expected_hess_log,
    ut_moments,
)

QuadratureRule = Callable[[GaussianState], SigmaPointSet]

GAUSSIAN_FLOW_KINDS = (
    "plain_gd",
    "fisher_rao",
    "wasserstein",
    "ai_wasserstein",
    "stein_bilinear",
    "kalman_bucy",
)


# ---------------------------------------------------------------------------
# Flow kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SteinBilinearRule:
    """Preconditioner ``P``, kernel matrix ``A`` and kernel offset ``b`` as
    functions of the current Gaussian state."""

    P: Callable[[GaussianState], np.ndarray]
    A: Callable[[GaussianState], np.ndarray]
    b: Callable[[GaussianState], float]
    name: str = "custom"


def _eye(g):
    return np.eye(g.dim)


def _cov(g):
    return g.cov


def _one(g):
    return 1.0


STEIN_PRESETS = {
    "wasserstein-equiv": SteinBilinearRule(_eye, lambda g: spd_inverse(g.cov), _one, "wasserstein-equiv"),
    "fisher-rao-equiv": SteinBilinearRule(_cov, lambda g: 0.5 * spd_inverse(g.cov), _one, "fisher-rao-equiv"),
    "galy-flexible": SteinBilinearRule(_eye, _eye, _one, "galy-flexible"),
}


@dataclass(frozen=True)
class GaussianFlowKind:
    name: str
    stein: Optional[SteinBilinearRule] = None

    def __post_init__(self):
        if self.name not in GAUSSIAN_FLOW_KINDS:
            raise ValueError(f"unknown Gaussian flow {self.name!r}; expected one of {GAUSSIAN_FLOW_KINDS}")
        if (self.name == "stein_bilinear") != (self.stein is not None):
            raise ValueError("stein_bilinear needs a SteinBilinearRule, other kinds take none")

    @property
    def id(self) -> str:
        return f"stein_bilinear:{self.stein.name}" if self.stein else self.name


def flow_kind(spec: Union[str, GaussianFlowKind]) -> GaussianFlowKind:
    """Parse ``"fisher_rao"``, ``"ai-wasserstein"``, ``"stein_bilinear:galy-flexible"`` etc."""
    if isinstance(spec, GaussianFlowKind):
        return spec
    head, _, preset = spec.partition(":")
    head = head.replace("-", "_")
    if head == "stein_bilinear":
        if preset not in STEIN_PRESETS:
            raise ValueError(f"unknown stein_bilinear preset {preset!r}; expected one of {tuple(STEIN_PRESETS)}")
        return GaussianFlowKind(head, STEIN_PRESETS[preset])
    if preset:
        raise ValueError(f"flow {head!r} takes no preset")
    return GaussianFlowKind(head)


# ---------------------------------------------------------------------------
# Right-hand sides
# ---------------------------------------------------------------------------

def _expectations(rho, m, C, quadrature):
    if quadrature is None:
        return ut_moments(rho, m, C)
    g = GaussianState(m, C)
    q = quadrature(g)
    return expected_grad_log(rho, g, q), expected_hess_log(rho, g, q)


def _rhs(kind: GaussianFlowKind, m, C, rho, quadrature):
    if kind.name == "kalman_bucy":
        try:
            H, R, y = rho.params["H"], rho.params["R"], rho.params["y"]
        except KeyError:
            raise ValueError("kalman_bucy requires a linear-Gaussian target or likelihood") from None
        Rinv = spd_inverse(R)
        CHt = C @ H.T
        dm = -CHt @ Rinv @ (H @ m - y)
        dC = -CHt @ Rinv @ CHt.T
        return dm, symmetrize(dC)

    Eg, EH = _expectations(rho, m, C, quadrature)
    if kind.name == "fisher_rao":
        dm = C @ Eg
        dC = C + C @ EH @ C
    elif kind.name == "wasserstein":
        dm = Eg
        EHC = EH @ C
        dC = 2.0 * np.eye(m.size) + EHC + EHC.T
    elif kind.name == "ai_wasserstein":
        dm = C @ Eg
        dC = 2.0 * C + 2.0 * C @ EH @ C
    elif kind.name == "plain_gd":
        dm = Eg
        dC = 0.5 * spd_inverse(C, "plain_gd needs C^{-1}") + 0.5 * EH
    else:
        g = GaussianState(m, C)
        P, A, b = kind.stein.P(g), kind.stein.A(g), kind.stein.b(g)
        CAC = C @ A @ C
        dm = b * (P @ Eg)
        dC = P @ A @ C + C @ A @ P + P @ EH @ CAC + CAC @ EH @ P
    return dm, symmetrize(dC)


def rhs(
    kind: Union[str, GaussianFlowKind],
    g: GaussianState,
    rho: TargetDensity,
    quadrature: Optional[QuadratureRule] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Time derivative ``(dm/dt, dC/dt)`` of the chosen moment ODE.

    Expectations use the unscented rule unless ``quadrature`` maps a state
    to another :class:`SigmaPointSet`. ``kalman_bucy`` reads ``H, R, y``
    from the target parameters and ignores the prior.
    """
    return _rhs(flow_kind(kind), g.mean, g.cov, rho, quadrature)


@dataclass(frozen=True)
class AffineDrift:
    """Mean-field drift ``d theta/dt = A_field (theta - m) + b_field``."""

    A_field: np.ndarray
    b_field: np.ndarray

    def moment_rhs(self, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Induced ``(dm, dC) = (b, A C + C A^T)``."""
        return self.b_field, symmetrize(self.A_field @ C + C @ self.A_field.T)


def affine_drift(
    kind: Union[str, GaussianFlowKind],
    g: GaussianState,
    rho: TargetDensity,
    quadrature: Optional[QuadratureRule] = None,
) -> AffineDrift:
    """Affine mean-field drift whose Gaussian law follows :func:`rhs`."""
    kind = flow_kind(kind)
    if kind.name in ("plain_gd", "kalman_bucy"):
        raise ValueError(f"{kind.name} has no affine mean-field form")
    Eg, EH = _expectations(rho, g.mean, g.cov, quadrature)
    EH = symmetrize(EH)
    C = g.cov
    I = np.eye(g.dim)
    if kind.name == "fisher_rao":
        return AffineDrift(0.5 * (I + C @ EH), C @ Eg)
    if kind.name in ("wasserstein", "ai_wasserstein"):
        P = I if kind.name == "wasserstein" else C
        # P C^{-1}, not C^{-1}: the induced covariance ODE must carry 2P.
        A = P @ spd_inverse(C) + P @ EH
        return AffineDrift(A, P @ Eg)
    P, At, bt = kind.stein.P(g), kind.stein.A(g), kind.stein.b(g)
    return AffineDrift(P @ At + P @ EH @ C @ At, bt * (P @ Eg))


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def analytic_fr_solution(g0: GaussianState, m_star, C_star, t: float) -> GaussianState:
    """Fisher-Rao moment flow for a Gaussian target ``N(m_star, C_star)`` at time ``t``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    m_star = np.atleast_1d(np.asarray(m_star, dtype=float))
    C_star = np.atleast_2d(np.asarray(C_star, dtype=float))
    P0 = spd_inverse(g0.cov)
    Ps = spd_inverse(C_star)
    e = math.exp(-t)
    Pt = symmetrize(Ps + e * (P0 - Ps))
    Ct = spd_inverse(Pt)
    mt = m_star + e * (Ct @ (P0 @ (g0.mean - m_star)))
    return GaussianState(mt, Ct)


def homotopy_density_params(prior, phi, t: float):
    """Tempered density ``rho_t ∝ exp(-t Phi) rho_0``.

    Args:
        prior: A :class:`GaussianState` or a :class:`~gradflow.density_grid.GridDensity`.
        phi: For a Gaussian prior, a :class:`TargetDensity` whose log-density
            is ``-Phi``; for a grid prior, the values of ``-Phi`` on the grid.
        t: Tempering level in ``[0, 1]``.

    Returns:
        A :class:`TargetDensity` (Gaussian prior) or a normalized
        ``GridDensity`` (grid prior).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if not isinstance(prior, GaussianState):
        from .density_grid import GridDensity

        return GridDensity(prior.nodes, prior.log_values + t * np.asarray(phi, dtype=float)).normalized()

    m0 = prior.mean
    P0 = spd_inverse(prior.cov)
    d = prior.dim

    def log_density(x):
        x = np.asarray(x, dtype=float)
        dx = x - m0
        return t * phi.log_density(x) - 0.5 * np.einsum("...i,ij,...j->...", dx, P0, dx)

    def grad_log(x):
        x = np.asarray(x, dtype=float)
        return t * phi.grad_log(x) - (x - m0) @ P0

    def hess_log(x):
        x = np.asarray(x, dtype=float)
        return t * phi.hess_log(x) - P0

    posterior = None
    if {"H", "R", "y"} <= set(phi.params):
        H, R, y = phi.params["H"], phi.params["R"], phi.params["y"]
        Rinv = spd_inverse(R)
        Pt = symmetrize(P0 + t * H.T @ Rinv @ H)
        Ct = spd_inverse(Pt)
        posterior = GaussianState(Ct @ (P0 @ m0 + t * H.T @ Rinv @ y), Ct)
    return TargetDensity(
        dim=d,
        log_density=log_density,
        grad_log=grad_log,
        hess_log=hess_log,
        name=f"tempered({phi.name}, t={t:g})",
        params={"t": t},
        posterior=posterior,
    )


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPath:
    """Recorded moment trajectory; ``times[k] == steps[k] * dt``."""

    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    dt: float

    def __len__(self) -> int:
        return self.times.size

    def state(self, k: int) -> GaussianState:
        return GaussianState(self.means[k], self.covs[k])

    @property
    def final(self) -> GaussianState:
        return self.state(-1)


def _rk4_once(kind, m, C, rho, dt, quadrature):
    k1m, k1C = _rhs(kind, m, C, rho, quadrature)
    h = 0.5 * dt
    k2m, k2C = _rhs(kind, m + h * k1m, C + h * k1C, rho, quadrature)
    k3m, k3C = _rhs(kind, m + h * k2m, C + h * k2C, rho, quadrature)
    k4m, k4C = _rhs(kind, m + dt * k3m, C + dt * k3C, rho, quadrature)
    c = dt / 6.0
    m_new = m + c * (k1m + 2.0 * (k2m + k3m) + k4m)
    C_new = C + c * (k1C + 2.0 * (k2C + k3C) + k4C)
    if not is_spd(C_new):
        raise SPDError("covariance lost positive definiteness")
    return m_new, C_new


def _rk4(kind, m, C, rho, dt, quadrature, max_halvings):
    try:
        return _rk4_once(kind, m, C, rho, dt, quadrature)
    except SPDError:
        if max_halvings <= 0:
            raise
    m, C = _rk4(kind, m, C, rho, 0.5 * dt, quadrature, max_halvings - 1)
    return _rk4(kind, m, C, rho, 0.5 * dt, quadrature, max_halvings - 1)


def rk4_step(kind, g: GaussianState, rho: TargetDensity, dt: float,
             quadrature: Optional[QuadratureRule] = None, max_halvings: int = 8) -> GaussianState:
    """One classical RK4 step; halves the step (recursively) if ``C`` would lose SPD."""
    m, C = _rk4(flow_kind(kind), g.mean, g.cov, rho, dt, quadrature, max_halvings)
    return GaussianState(m, C)


def iterate(
    kind: Union[str, GaussianFlowKind],
    g0: GaussianState,
    rho: TargetDensity,
    dt: float,
    n_steps: int,
    quadrature: Optional[QuadratureRule] = None,
) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield ``(k, m_k, C_k)`` for ``k = 1..n_steps`` of fixed-step RK4.

    Errors (SPD loss that step halving cannot fix, non-finite target
    values) propagate out of the generator at the failing step.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    kind = flow_kind(kind)
    g0.validate()
    m, C = g0.mean, g0.cov
    for k in range(1, n_steps + 1):
        m, C = _rk4(kind, m, C, rho, dt, quadrature, 8)
        yield k, m, C


def integrate(
    kind: Union[str, GaussianFlowKind],
    g0: GaussianState,
    rho: TargetDensity,
    dt: float = 1e-3,
    t_end: float = 1.0,
    record_every: int = 1,
    quadrature: Optional[QuadratureRule] = None,
    callback: Optional[Callable[[int, GaussianState], None]] = None,
) -> GaussianPath:
    """Integrate a moment ODE with fixed-step RK4 from ``t = 0`` to ``t_end``.

    Time is tracked by step index; states are recorded every
    ``record_every`` steps and at the final step.
    """
    if dt <= 0 or t_end < 0:
        raise ValueError("need dt > 0 and t_end >= 0")
    n_steps = int(round(t_end / dt))
    steps, means, covs = [0], [g0.mean], [g0.cov]
    for k, m, C in iterate(kind, g0, rho, dt, n_steps, quadrature):
        if callback is not None:
            callback(k, GaussianState(m, C))
        if k % record_every == 0 or k == n_steps:
            steps.append(k)
            means.append(m)
            covs.append(C)
    return GaussianPath(np.asarray(steps) * dt, np.array(means), np.array(covs), dt)
