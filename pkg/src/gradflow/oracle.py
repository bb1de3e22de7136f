"""Reference statistics of the 2D test posteriors.

The semi-analytic path integrates one coordinate in closed form (it is
conditionally Gaussian given the other) and the remaining coordinate with
a uniform trapezoid rule. A Monte Carlo oracle with standard errors is
used to cross-check it.

Cache format: one CSV file per key with header ``quantity,index,value``.
``quantity`` is one of ``mean`` (index ``i``), ``cov`` (``i-j``),
``omega`` (``k-i``), ``offset`` (``k``) or ``cos`` (``k``); values are
written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import GaussianState, GradFlowError
from .targets import ReferenceStats, cos_draws, gaussian_reference_stats

CACHE_VERSION = 1
SEMIANALYTIC_TARGETS = ("logconcave", "rosenbrock")
ORACLE_TARGETS = ("gaussian",) + SEMIANALYTIC_TARGETS


class OracleError(GradFlowError, RuntimeError):
    """An oracle could not produce trustworthy reference values."""


@dataclass(frozen=True)
class _Factorization:
    """``theta_inner | s ~ N(mu(s), var)`` with outer log-weight ``log_w(s)``.

    ``inner`` and ``outer`` are the coordinate indices of the two variables.
    """

    inner: int
    outer: int
    log_w: Callable[[np.ndarray], np.ndarray]
    mu: Callable[[np.ndarray], np.ndarray]
    var: float
    center: float
    scale: float


def _factorization(target_id: str, lam: float) -> _Factorization:
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    v = 10.0 / lam
    if target_id == "logconcave":
        # theta1 | theta2 ~ N(theta2 / sqrt(lam), 10 / lam), theta2 ∝ exp(-theta2^4 / 20)
        sd = math.sqrt(math.sqrt(20.0) * math.gamma(0.75) / math.gamma(0.25))
        s = math.sqrt(lam)
        return _Factorization(0, 1, lambda x: -(x**4) / 20.0, lambda x: x / s, v, 0.0, sd)
    if target_id == "rosenbrock":
        # theta2 | theta1 ~ N(theta1^2, 10 / lam), theta1 ~ N(1, 10)
        return _Factorization(1, 0, lambda x: -((1.0 - x) ** 2) / 20.0, lambda x: x * x, v, 1.0, math.sqrt(10.0))
    raise ValueError(f"no semi-analytic oracle for target {target_id!r}; expected one of {SEMIANALYTIC_TARGETS}")


def _assemble(f: _Factorization, E_in, E_out, E_in2, E_out2, E_inout, cos_values, omegas, offsets,
              **se) -> ReferenceStats:
    mean = np.empty(2)
    mean[f.inner], mean[f.outer] = E_in, E_out
    second = np.empty((2, 2))
    second[f.inner, f.inner] = E_in2
    second[f.outer, f.outer] = E_out2
    second[f.inner, f.outer] = second[f.outer, f.inner] = E_inout
    cov = second - np.outer(mean, mean)
    return ReferenceStats(mean, cov, np.atleast_2d(omegas), np.asarray(offsets, dtype=float),
                          np.asarray(cos_values, dtype=float), **se)


def reference_stats_semianalytic(
    target_id: str,
    lam: float,
    omegas: np.ndarray,
    offsets: np.ndarray,
    n: int = 10**7,
    window: float = 12.0,
    chunk: int = 10**6,
) -> ReferenceStats:
    """Mean, covariance and cosine moments of ``logconcave`` or ``rosenbrock``.

    Args:
        target_id: ``"logconcave"`` or ``"rosenbrock"``.
        lam: Anisotropy parameter.
        omegas, offsets: The ``(w, b)`` draws, shapes ``(K, 2)`` and ``(K,)``.
        n: Number of uniform outer grid points (trapezoid rule).
        window: Half-width of the outer window in marginal standard deviations.
        chunk: Points processed per batch (bounds memory use).

    Raises:
        OracleError: if the outer density at the window edge carries more
            than ``1e-12`` of the mass.
    """
    f = _factorization(target_id, lam)
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    offsets = np.asarray(offsets, dtype=float)
    lo, hi = f.center - window * f.scale, f.center + window * f.scale
    h = (hi - lo) / (n - 1)
    w_in, w_out = omegas[:, f.inner], omegas[:, f.outer]
    damp = np.exp(-0.5 * w_in**2 * f.var)
    sums = np.zeros(6)
    cos_sum = np.zeros(len(offsets))
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        s = lo + h * idx
        w = np.exp(f.log_w(s))
        w[idx == 0] *= 0.5
        w[idx == n - 1] *= 0.5
        mu = f.mu(s)
        sums += [w.sum(), (w * mu).sum(), (w * s).sum(), (w * (mu * mu + f.var)).sum(),
                 (w * s * s).sum(), (w * mu * s).sum()]
        phase = np.outer(mu, w_in) + np.outer(s, w_out) + offsets
        cos_sum += w @ np.cos(phase)
    Z = sums[0]
    edge = max(math.exp(f.log_w(np.array([lo]))[0]), math.exp(f.log_w(np.array([hi]))[0]))
    if edge * f.scale / (Z * h) > 1e-12:
        raise OracleError(f"outer window of {window} sd is too small for {target_id} (lam={lam})")
    E = sums[1:] / Z
    return _assemble(f, E[0], E[1], E[2], E[3], E[4], damp * cos_sum / Z, omegas, offsets)


def _rejection_quartic(rng: np.random.Generator, n: int, max_tries: int = 50) -> np.ndarray:
    """Samples of ``∝ exp(-x^4 / 20)`` by rejection from ``N(0, s^2)``, ``s = 1.5``."""
    s = 1.5
    # log of the density ratio exp(-x^4/20 + x^2/(2 s^2)) peaks at x^2 = 5 / s^2
    log_m = 5.0 / (4.0 * s**4)
    out, have, proposed = [], 0, 0
    for _ in range(max_tries):
        x = rng.normal(0.0, s, size=2 * (n - have) + 64)
        u = rng.uniform(size=x.size)
        keep = np.log(u) < -(x**4) / 20.0 + x**2 / (2 * s**2) - log_m
        proposed += x.size
        out.append(x[keep])
        have += int(keep.sum())
        if have >= n:
            break
    if have / proposed < 1e-4:
        raise OracleError(f"rejection acceptance rate {have / proposed:.2e} is below 1e-4")
    if have < n:
        raise OracleError("rejection sampler did not produce enough samples")
    return np.concatenate(out)[:n]


def sample_target(target_id: str, lam: float, n: int, seed: int = 0) -> np.ndarray:
    """Exact i.i.d. samples ``(n, 2)`` from a test posterior."""
    rng = np.random.default_rng(seed)
    if target_id == "gaussian":
        return rng.standard_normal((n, 2)) * np.sqrt([1.0, 1.0 / lam])
    f = _factorization(target_id, lam)
    if target_id == "rosenbrock":
        s = rng.normal(1.0, math.sqrt(10.0), size=n)
    else:
        s = _rejection_quartic(rng, n)
    X = np.empty((n, 2))
    X[:, f.outer] = s
    X[:, f.inner] = f.mu(s) + math.sqrt(f.var) * rng.standard_normal(n)
    return X


def mc_oracle(target_id: str, lam: float, n: int, seed: int,
              omegas: np.ndarray, offsets: np.ndarray) -> ReferenceStats:
    """Monte Carlo reference statistics with standard errors (``n >= 1e5``)."""
    if n < 10**5:
        raise ValueError(f"mc_oracle needs n >= 1e5 samples, got {n}")
    X = sample_target(target_id, lam, n, seed)
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    offsets = np.asarray(offsets, dtype=float)
    root_n = math.sqrt(n)
    mean = X.mean(axis=0)
    D = X - mean
    prods = D[:, :, None] * D[:, None, :]
    cos_vals = np.cos(X @ omegas.T + offsets)
    return ReferenceStats(
        mean=mean,
        cov=prods.mean(axis=0),
        omegas=omegas,
        offsets=offsets,
        cos_values=cos_vals.mean(axis=0),
        mean_se=X.std(axis=0, ddof=1) / root_n,
        cov_se=prods.std(axis=0, ddof=1) / root_n,
        cos_se=cos_vals.std(axis=0, ddof=1) / root_n,
    )


# ---------------------------------------------------------------------------
# Dispatch and cache
# ---------------------------------------------------------------------------

def gaussian_posterior(lam: float) -> GaussianState:
    return GaussianState(np.zeros(2), np.diag([1.0, 1.0 / lam]))


def cache_path(cache_dir, target_id: str, lam: float, seed: int, window: float, n: int) -> Path:
    name = f"refstats-v{CACHE_VERSION}-{target_id}-lam{lam!r}-seed{seed}-w{window!r}-n{n}.csv"
    return Path(cache_dir) / name


def write_stats_csv(path, stats: ReferenceStats) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "index", "value"])
        for i, v in enumerate(stats.mean):
            w.writerow(["mean", i, repr(float(v))])
        for (i, j), v in np.ndenumerate(stats.cov):
            w.writerow(["cov", f"{i}-{j}", repr(float(v))])
        for (k, i), v in np.ndenumerate(stats.omegas):
            w.writerow(["omega", f"{k}-{i}", repr(float(v))])
        for k, v in enumerate(stats.offsets):
            w.writerow(["offset", k, repr(float(v))])
        for k, v in enumerate(stats.cos_values):
            w.writerow(["cos", k, repr(float(v))])
    tmp.replace(path)


def read_stats_csv(path) -> ReferenceStats:
    rows: dict[str, list] = {"mean": [], "cov": [], "omega": [], "offset": [], "cos": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            idx = tuple(int(p) for p in row["index"].split("-"))
            rows[row["quantity"]].append((idx, float(row["value"])))

    def build(items):
        shape = tuple(max(ix[a] for ix, _ in items) + 1 for a in range(len(items[0][0])))
        out = np.empty(shape)
        for ix, v in items:
            out[ix] = v
        return out

    return ReferenceStats(build(rows["mean"]), build(rows["cov"]), build(rows["omega"]),
                          build(rows["offset"]), build(rows["cos"]))


def reference_stats(
    target_id: str,
    lam: float,
    seed: int = 0,
    n_draws: int = 20,
    n: int = 10**7,
    window: float = 12.0,
    cache_dir: Optional[str] = None,
) -> ReferenceStats:
    """Reference statistics for a 2D test posterior with seeded cosine draws.

    Gaussian targets use closed forms; the others use the semi-analytic
    oracle, optionally cached in ``cache_dir``.
    """
    if target_id not in ORACLE_TARGETS:
        raise ValueError(f"no reference oracle for target {target_id!r}; expected one of {ORACLE_TARGETS}")
    omegas, offsets = cos_draws(2, n_draws, seed)
    if target_id == "gaussian":
        return gaussian_reference_stats(gaussian_posterior(lam), omegas, offsets)
    path = None
    if cache_dir is not None:
        path = cache_path(cache_dir, target_id, lam, seed, window, n)
        if path.exists():
            stats = read_stats_csv(path)
            if stats.cos_values.size == n_draws:
                return stats
    stats = reference_stats_semianalytic(target_id, lam, omegas, offsets, n=n, window=window)
    if path is not None:
        write_stats_csv(path, stats)
    return stats


def grid_reference_stats(log_density: Callable[[np.ndarray], np.ndarray], nodes: np.ndarray,
                         omegas: np.ndarray, offsets: np.ndarray) -> ReferenceStats:
    """Reference statistics of a 1D density by the trapezoid rule on ``nodes``.

    ``log_density`` takes points of shape ``(n, 1)``.
    """
    x = np.asarray(nodes, dtype=float)
    u = np.asarray(log_density(x[:, None]), dtype=float)
    w = np.exp(u - u.max())
    w[0] *= 0.5
    w[-1] *= 0.5
    w /= w.sum()
    mean = float(w @ x)
    var = float(w @ (x - mean) ** 2)
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    offsets = np.asarray(offsets, dtype=float)
    cos_values = w @ np.cos(np.outer(x, omegas[:, 0]) + offsets)
    return ReferenceStats(np.array([mean]), np.array([[var]]), omegas, offsets, cos_values)
