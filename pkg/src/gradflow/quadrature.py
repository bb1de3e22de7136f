"""Gaussian expectations: unscented sigma points and a Gauss-Hermite oracle."""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import GaussianState, TargetDensity, spd_factor, spd_inverse, symmetrize


@dataclass(frozen=True)
class SigmaPointSet:
    """Quadrature nodes ``points`` (n, dim) with ``weights`` (n,) summing to one.

    ``pairs > 0`` marks the symmetric layout of :func:`unscented_points`
    (centre, then ``pairs`` plus-points, then the matching minus-points,
    all off-centre weights equal). Each pair is then summed before
    weighting, so integrands odd about the mean cancel exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    pairs: int = 0

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Weighted sum over the leading axis of ``values``."""
        values = np.asarray(values)
        flat = values.reshape(values.shape[0], -1)
        n = self.pairs
        if n:
            out = self.weights[0] * flat[0] + self.weights[1] * (flat[1 : n + 1] + flat[n + 1 :]).sum(axis=0)
        else:
            out = self.weights @ flat
        return out.reshape(values.shape[1:])


def default_kappa(dim: int) -> float:
    """Spread parameter: ``dim + kappa = 3`` for ``dim <= 2``, else ``kappa = 0``."""
    return 3.0 - dim if dim <= 2 else 0.0


def unscented_points(g: GaussianState, kappa: Optional[float] = None) -> SigmaPointSet:
    """Symmetric ``2 dim + 1`` sigma-point rule.

    Points are ``m`` and ``m +- sqrt(dim + kappa) L[:, i]`` with ``L`` the
    symmetric square root of ``C``; weights are ``kappa / (dim + kappa)`` for
    the centre and ``1 / (2 (dim + kappa))`` for the others.
    """
    n = g.dim
    if kappa is None:
        kappa = default_kappa(n)
    lam = n + kappa
    if not lam > 0:
        raise ValueError(f"dim + kappa must be positive, got {lam}")
    L = spd_factor(g.cov) * np.sqrt(lam)
    points = np.empty((2 * n + 1, n))
    points[0] = g.mean
    points[1 : n + 1] = g.mean + L.T
    points[n + 1 :] = g.mean - L.T
    weights = np.full(2 * n + 1, 0.5 / lam)
    weights[0] = kappa / lam
    return SigmaPointSet(points, weights, pairs=n)


@functools.lru_cache(maxsize=64)
def _ut_weights(n: int, kappa: float) -> tuple[float, float, float]:
    """Centre weight, outer weight and ``sqrt(dim + kappa)``."""
    lam = n + kappa
    if not lam > 0:
        raise ValueError(f"dim + kappa must be positive, got {lam}")
    return kappa / lam, 0.5 / lam, math.sqrt(lam)


def ut_moments(rho: TargetDensity, m: np.ndarray, C: np.ndarray,
               kappa: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """``(E[grad log rho], E[hess log rho])`` under ``N(m, C)`` by the unscented rule.

    Array-level variant of :func:`expected_grad_log`/:func:`expected_hess_log`
    for use inside ODE stages. The Hessian average is returned as computed;
    callers symmetrize whatever they build from it.
    """
    n = m.size
    w0, w1, root = _ut_weights(n, default_kappa(n) if kappa is None else kappa)
    L = spd_factor(C) * root
    points = m + np.concatenate((np.zeros((1, n)), L, -L))
    G = rho.grad_log(points)
    Hs = rho.hess_log(points).reshape(2 * n + 1, -1)
    # one pass over [grad | hess]; pairwise sums make odd integrands cancel exactly
    F = np.concatenate((G, Hs), axis=1)
    E = w0 * F[0] + w1 * np.add.reduce(F[1 : n + 1] + F[n + 1 :])
    # cheap screen; the full per-point check only runs when it trips
    if not math.isfinite(E.sum()):
        rho.check_finite(G, points, "gradient")
        rho.check_finite(Hs, points, "Hessian")
    return E[:n], E[n:].reshape(n, n)


def gauss_hermite_points(g: GaussianState, nodes: int = 30) -> SigmaPointSet:
    """Tensorized Gauss-Hermite rule with ``nodes`` points per axis (test oracle)."""
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    n = g.dim
    grid = np.array(list(itertools.product(z, repeat=n)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=n))), axis=1)
    L = spd_factor(g.cov)
    return SigmaPointSet(g.mean + grid @ L.T, weights)


def _rule(g: GaussianState, q: Optional[SigmaPointSet]) -> SigmaPointSet:
    return unscented_points(g) if q is None else q


def expected_grad_log(
    rho: TargetDensity, g: GaussianState, q: Optional[SigmaPointSet] = None
) -> np.ndarray:
    """``E_{N(m,C)}[grad log rho]`` by quadrature."""
    q = _rule(g, q)
    vals = rho.check_finite(rho.grad_log(q.points), q.points, "gradient")
    return q.expect(vals)


def expected_hess_log(
    rho: TargetDensity, g: GaussianState, q: Optional[SigmaPointSet] = None
) -> np.ndarray:
    """``E_{N(m,C)}[hess log rho]`` by quadrature, symmetrized."""
    q = _rule(g, q)
    vals = rho.check_finite(rho.hess_log(q.points), q.points, "Hessian")
    return symmetrize(q.expect(vals))


def expectation(fn: Callable[[np.ndarray], np.ndarray], g: GaussianState,
                q: Optional[SigmaPointSet] = None) -> np.ndarray:
    """``E_{N(m,C)}[fn(theta)]`` for a batched callable ``fn``."""
    q = _rule(g, q)
    return q.expect(fn(q.points))


def stein_identity_check(
    f: TargetDensity, g: GaussianState, q: Optional[SigmaPointSet] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of ``E[hess f] = Cov[grad f, theta] C^{-1}`` under rule ``q``.

    ``f`` is any scalar field packaged as a :class:`TargetDensity` (its
    ``grad_log``/``hess_log`` are the field's derivatives).
    """
    q = _rule(g, q)
    lhs = q.expect(f.hess_log(q.points))
    grads = f.grad_log(q.points)
    centred = grads - q.expect(grads)
    cross = q.expect(centred[:, :, None] * (q.points - g.mean)[:, None, :])
    rhs = cross @ spd_inverse(g.cov)
    return lhs, rhs
