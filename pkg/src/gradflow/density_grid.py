"""One-dimensional grid discretizations of the Fisher-Rao and Fokker-Planck flows.

Densities live on a uniform grid and are normalized with the trapezoid
rule. The Fisher-Rao flow is integrated in log-density, which cannot
underflow and keeps the density positive by construction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import NonFiniteError, StepSizeError, TargetDensity


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    dx = nodes[1] - nodes[0]
    w = np.full(nodes.size, dx)
    w[0] = w[-1] = 0.5 * dx
    return w


def uniform_grid(lo: float, hi: float, n: int = 2048) -> np.ndarray:
    if not hi > lo:
        raise ValueError(f"grid needs lo < hi, got [{lo}, {hi}]")
    if n < 3:
        raise ValueError("grid needs at least 3 nodes")
    return np.linspace(lo, hi, n)


def window_grid(mean: float, sd: float, n: int = 2048, width: float = 10.0) -> np.ndarray:
    """Grid on ``[mean - width sd, mean + width sd]``."""
    return uniform_grid(mean - width * sd, mean + width * sd, n)


@dataclass(frozen=True)
class GridDensity:
    """Density on uniform ``nodes``, stored as ``log_values``.

    Zero density is represented by ``-inf``. Use :meth:`normalized` to get
    unit trapezoid mass.
    """

    nodes: np.ndarray
    log_values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        u = np.asarray(self.log_values, dtype=float)
        if x.ndim != 1 or u.shape != x.shape:
            raise ValueError(f"nodes {x.shape} and log_values {u.shape} must be matching 1D arrays")
        if x.size < 3:
            raise ValueError("grid needs at least 3 nodes")
        dx = np.diff(x)
        if not (dx[0] > 0 and np.allclose(dx, dx[0], rtol=1e-9, atol=0.0)):
            raise ValueError("nodes must be uniform and increasing")
        if np.any(np.isnan(u)) or np.any(u == np.inf):
            raise NonFiniteError("log density has nan or +inf entries")
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "log_values", u)

    @classmethod
    def from_values(cls, nodes, values) -> "GridDensity":
        v = np.asarray(values, dtype=float)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("density values must be finite and nonnegative")
        with np.errstate(divide="ignore"):
            return cls(nodes, np.log(v))

    @classmethod
    def from_log_density(cls, nodes, log_density: Callable[[np.ndarray], np.ndarray]) -> "GridDensity":
        """Evaluate a batched log-density on the grid and normalize."""
        x = np.asarray(nodes, dtype=float)
        return cls(x, np.asarray(log_density(x), dtype=float)).normalized()

    @classmethod
    def from_target(cls, rho: TargetDensity, nodes) -> "GridDensity":
        if rho.dim != 1:
            raise ValueError("grid densities are one-dimensional")
        x = np.asarray(nodes, dtype=float)
        return cls.from_log_density(x, lambda t: rho.log_density(t[:, None]))

    @classmethod
    def gaussian(cls, nodes, mean: float, var: float) -> "GridDensity":
        x = np.asarray(nodes, dtype=float)
        return cls(x, -0.5 * (x - mean) ** 2 / var).normalized()

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def dx(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.nodes)

    def integrate(self, f: np.ndarray) -> float:
        """Trapezoid integral of ``f * density``."""
        return float(self.weights @ (np.asarray(f) * self.values))

    @property
    def mass(self) -> float:
        return float(self.weights @ self.values)

    def mean(self) -> float:
        return self.integrate(self.nodes) / self.mass

    def var(self) -> float:
        mu = self.mean()
        return self.integrate((self.nodes - mu) ** 2) / self.mass

    def normalized(self) -> "GridDensity":
        """Shift ``log_values`` so the trapezoid mass is one."""
        u = self.log_values
        top = u.max()
        if not np.isfinite(top):
            raise ValueError("density is identically zero on the grid")
        log_mass = top + math.log(float(self.weights @ np.exp(u - top)))
        return GridDensity(self.nodes, u - log_mass)

    def same_grid(self, other: "GridDensity") -> None:
        if self.nodes.shape != other.nodes.shape or not np.array_equal(self.nodes, other.nodes):
            raise ValueError("densities live on different grids")


# ---------------------------------------------------------------------------
# Fisher-Rao flow
# ---------------------------------------------------------------------------

FR_SCHEMES = ("heun", "euler", "density-euler")


def _fr_log_rhs(u: np.ndarray, L: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = L - u
    p = np.exp(u - u.max())
    return r - (w @ (p * r)) / (w @ p)


def fr_flow_step(d: GridDensity, post: GridDensity, dt: float, scheme: str = "heun") -> GridDensity:
    """One step of ``d rho/dt = rho (log rho_post - log rho) - rho E_rho[...]``.

    Args:
        d: Current density, positive on the grid.
        post: Target density on the same grid.
        dt: Time step.
        scheme: ``"heun"`` or ``"euler"`` on the log-density (default
            ``"heun"``, second order), or ``"density-euler"``, the plain
            forward-Euler update of the density itself.

    Raises:
        StepSizeError: if ``dt >= 1`` for the log-density schemes (the
            update would flip the sign of ``log rho``), or if the
            density-space update produces a nonpositive value.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if scheme not in FR_SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {FR_SCHEMES}")
    d.same_grid(post)
    u, L = d.log_values, post.log_values
    if not np.all(np.isfinite(u)):
        raise ValueError("Fisher-Rao flow needs a density that is positive on the whole grid")
    if not np.all(np.isfinite(L)):
        raise ValueError("target density must be positive on the whole grid")
    w = d.weights
    if scheme == "density-euler":
        rho = d.values
        new = rho * (1.0 + dt * _fr_log_rhs(u, L, w))
        if np.any(new <= 0.0):
            raise StepSizeError(f"density became nonpositive; reduce dt={dt}")
        return GridDensity(d.nodes, np.log(new)).normalized()
    if dt >= 1.0:
        raise StepSizeError(f"log-density Fisher-Rao step needs dt < 1, got {dt}")
    k1 = _fr_log_rhs(u, L, w)
    if scheme == "euler":
        return GridDensity(d.nodes, u + dt * k1).normalized()
    k2 = _fr_log_rhs(u + dt * k1, L, w)
    return GridDensity(d.nodes, u + 0.5 * dt * (k1 + k2)).normalized()


def fr_closed_form(rho0: GridDensity, post: GridDensity, t: float) -> GridDensity:
    """``rho_t ∝ rho0^(e^-t) rho_post^(1 - e^-t)``, normalized on the grid."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    rho0.same_grid(post)
    e = math.exp(-t)
    with np.errstate(invalid="ignore"):
        u = e * rho0.log_values + (1.0 - e) * post.log_values
    if t == 0:
        u = rho0.log_values
    return GridDensity(rho0.nodes, u).normalized()


def grid_kl(p: GridDensity, q: GridDensity) -> float:
    """Trapezoid ``int p log(p / q)``; ``inf`` (with a warning) if ``q = 0`` where ``p > 0``."""
    p.same_grid(q)
    pv = p.values
    mask = pv > 0
    if np.any(np.isneginf(q.log_values[mask])):
        warnings.warn("KL support violation: q vanishes where p is positive", RuntimeWarning)
        return math.inf
    integrand = np.zeros_like(pv)
    integrand[mask] = pv[mask] * (p.log_values[mask] - q.log_values[mask])
    return max(float(p.weights @ integrand), 0.0)


# ---------------------------------------------------------------------------
# Fokker-Planck (Wasserstein) flow
# ---------------------------------------------------------------------------

def fp_cfl_limit(nodes: np.ndarray) -> float:
    dx = nodes[1] - nodes[0]
    return 0.5 * dx * dx


def wasserstein_fp_step(d: GridDensity, post: GridDensity, dt: float) -> GridDensity:
    """Explicit step of ``d rho/dt = d/dx (rho d/dx (log rho - log rho_post))``.

    Written as ``d/dx (d rho/dx - rho d/dx log rho_post)`` with central
    fluxes at the half nodes and zero flux through both ends, so the
    discrete mass ``sum(rho) dx`` is conserved exactly up to rounding. The
    result is not renormalized.

    Raises:
        StepSizeError: if ``dt > dx^2 / 2``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    d.same_grid(post)
    limit = fp_cfl_limit(d.nodes)
    if dt > limit:
        raise StepSizeError(f"dt={dt} violates the CFL bound dt <= dx^2/2 = {limit:.3e}")
    L = post.log_values
    if not np.all(np.isfinite(L)):
        raise ValueError("target density must be positive on the whole grid")
    rho = d.values
    dx = d.dx
    flux = (np.diff(rho) - 0.5 * (rho[1:] + rho[:-1]) * np.diff(L)) / dx
    div = np.empty_like(rho)
    div[0] = flux[0]
    div[1:-1] = flux[1:] - flux[:-1]
    div[-1] = -flux[-1]
    new = rho + (dt / dx) * div
    floor = -1e-12 * rho.max()
    if np.any(new < floor):
        raise StepSizeError("Fokker-Planck step produced a negative density; refine the grid or reduce dt")
    return GridDensity.from_values(d.nodes, np.maximum(new, 0.0))


def discrete_mass(d: GridDensity) -> float:
    """``sum(rho) dx``, the quantity conserved by :func:`wasserstein_fp_step`."""
    return float(d.values.sum() * d.dx)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridPath:
    times: np.ndarray
    densities: list
    kl: np.ndarray


GRID_FLOW_IDS = ("grid-fr", "grid-fp")


def integrate_grid(
    flow: str,
    d0: GridDensity,
    post: GridDensity,
    dt: float,
    t_end: float,
    record_every: int = 1,
    scheme: str = "heun",
    keep_densities: bool = True,
) -> GridPath:
    """Run ``grid-fr`` or ``grid-fp`` and record ``KL[rho_t || rho_post]``.

    Times are ``step * dt``; the last step is always recorded.
    """
    if flow not in GRID_FLOW_IDS:
        raise ValueError(f"unknown grid flow {flow!r}; expected one of {GRID_FLOW_IDS}")
    n_steps = int(round(t_end / dt))
    if n_steps < 1:
        raise ValueError("t_end must be at least dt")
    if flow == "grid-fr":
        def step(d):
            return fr_flow_step(d, post, dt, scheme)
    else:
        def step(d):
            return wasserstein_fp_step(d, post, dt)
    d = d0
    steps, dens, kls = [0], [d], [grid_kl(d, post)]
    for k in range(1, n_steps + 1):
        d = step(d)
        if k % record_every == 0 or k == n_steps:
            steps.append(k)
            kls.append(grid_kl(d, post))
            if keep_densities:
                dens.append(d)
    if not keep_densities:
        dens = [d0, d]
    return GridPath(np.asarray(steps) * dt, dens, np.asarray(kls))


def grid_density_of(rho: TargetDensity, nodes: Optional[np.ndarray] = None,
                    n: int = 2048) -> GridDensity:
    """Target restricted to a grid; defaults to a ``+-10 sd`` window around its moments."""
    if nodes is None:
        if rho.posterior is not None:
            mean, var = float(rho.posterior.mean[0]), float(rho.posterior.cov[0, 0])
        elif "mean" in rho.params and "var" in rho.params:
            mean, var = float(rho.params["mean"]), float(rho.params["var"])
        else:
            raise ValueError("target has no moments to size the grid; pass nodes")
        nodes = window_grid(mean, math.sqrt(var), n)
    return GridDensity.from_target(rho, nodes)
