"""Error metrics against reference statistics, Gaussian KL and rate fits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .core import Ensemble, GaussianState, spd_inverse, spd_logdet
from .targets import ReferenceStats, gaussian_cos_moment


@dataclass(frozen=True)
class ErrorTriple:
    mean_err: float
    cov_err: float
    cos_err: float
    cos_per_draw: np.ndarray

    def __iter__(self):
        return iter((self.mean_err, self.cov_err, self.cos_err))


def _moments_and_cos(state, ref: ReferenceStats):
    if isinstance(state, Ensemble):
        X = state.particles
        m = X.mean(axis=0)
        D = X - m
        C = D.T @ D / state.J
        cos = np.cos(X @ ref.omegas.T + ref.offsets).mean(axis=0)
        return m, C, cos
    if isinstance(state, GaussianState):
        return state.mean, state.cov, gaussian_cos_moment(state, ref.omegas, ref.offsets)
    raise TypeError(f"expected a GaussianState or Ensemble, got {type(state).__name__}")


def error_triple(state: Union[GaussianState, Ensemble], ref: ReferenceStats) -> ErrorTriple:
    """``(|m - m_ref|_2, |C - C_ref|_F / |C_ref|_F, mean_k (c_k - c_ref_k)^2)``.

    Ensembles use empirical averages (covariance with the ``1/J``
    convention); Gaussian states use the closed-form cosine moment.
    """
    m, C, cos = _moments_and_cos(state, ref)
    if m.shape != ref.mean.shape:
        raise ValueError(f"state dimension {m.size} != reference dimension {ref.mean.size}")
    per_draw = (cos - ref.cos_values) ** 2
    return ErrorTriple(
        float(np.linalg.norm(m - ref.mean)),
        float(np.linalg.norm(C - ref.cov) / np.linalg.norm(ref.cov)),
        float(per_draw.mean()),
        per_draw,
    )


def gaussian_kl(p: GaussianState, q: GaussianState) -> float:
    """``KL[N(m_p, C_p) || N(m_q, C_q)]`` in closed form."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    Qinv = spd_inverse(q.cov)
    d = q.mean - p.mean
    val = 0.5 * (
        float(np.trace(Qinv @ p.cov)) + float(d @ Qinv @ d) - p.dim
        + spd_logdet(q.cov) - spd_logdet(p.cov)
    )
    return max(val, 0.0)


def slope_fit(
    t: Sequence[float],
    values: Sequence[float],
    window: Optional[tuple[float, float]] = None,
    loglog: bool = False,
) -> float:
    """Least-squares slope of ``log(value)`` against ``t`` (or ``log t``).

    Args:
        t: Sample times.
        values: Positive values on the window.
        window: Inclusive ``(t_lo, t_hi)``; the whole series if ``None``.
        loglog: Regress against ``log t`` instead of ``t``.

    Raises:
        ValueError: if fewer than 5 points fall in the window, or a value
            in the window is not positive.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape:
        raise ValueError("t and values must have the same shape")
    mask = np.ones(t.shape, dtype=bool) if window is None else (t >= window[0]) & (t <= window[1])
    if mask.sum() < 5:
        raise ValueError(f"slope fit needs at least 5 points in the window, got {int(mask.sum())}")
    t, v = t[mask], v[mask]
    if np.any(~(v > 0)):
        raise ValueError("slope fit needs positive values on the window")
    x = np.log(t) if loglog else t
    if loglog and np.any(~np.isfinite(x)):
        raise ValueError("log-log fit needs t > 0 on the window")
    slope, _ = np.polyfit(x, np.log(v), 1)
    return float(slope)


def stabilized_window(t: Sequence[float], values: Sequence[float], tol: float = 0.02,
                      span: int = 10) -> tuple[float, float]:
    """First window of ``span`` samples whose local log-slopes agree within ``tol``.

    Used to skip the initial transient before fitting a rate. The window
    returned runs from its start to the end of the series.
    """
    t = np.asarray(t, dtype=float)
    lv = np.log(np.asarray(values, dtype=float))
    local = np.diff(lv) / np.diff(t)
    for i in range(local.size - span):
        seg = local[i : i + span]
        ref = abs(seg.mean())
        if ref > 0 and np.ptp(seg) <= tol * ref:
            return float(t[i]), float(t[-1])
    raise ValueError("no stabilized slope window found")


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def gaussian_kl_1d_closed(m1: float, v1: float, m2: float, v2: float) -> float:
    """``KL[N(m1, v1) || N(m2, v2)]`` for scalars."""
    return 0.5 * (v1 / v2 + (m2 - m1) ** 2 / v2 - 1.0 + math.log(v2 / v1))
