"""Acceptance criteria, one test per criterion.

Each test records ``PASS``/``FAIL`` with the measured numbers into
``conftest.ACCEPTANCE``; the terminal summary prints one line per criterion.
Parts that cannot be met as stated are recorded as FAIL and then marked
xfail, with the analysis in the decisions ledger.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from gradflow.core import (
    AffineMap,
    GaussianState,
    pushforward_ensemble,
    pushforward_gaussian,
    pushforward_target,
    spd_inverse,
)
from gradflow.density_grid import (
    GridDensity,
    fp_cfl_limit,
    fr_closed_form,
    fr_flow_step,
    grid_density_of,
    integrate_grid,
    uniform_grid,
    wasserstein_fp_step,
)
from gradflow.gaussian_flows import (
    GAUSSIAN_FLOW_KINDS,
    STEIN_PRESETS,
    affine_drift,
    analytic_fr_solution,
    integrate,
    iterate,
    rhs,
)
from gradflow.metrics import slope_fit, stabilized_window
from gradflow.oracle import mc_oracle, reference_stats
from gradflow.particle_flows import (
    NoiseStream,
    affine_meanfield_step,
    ai_langevin_step,
    ai_svgd_step,
    empirical_moments,
    initial_ensemble,
    langevin_step,
    svgd_step,
)
from gradflow.quadrature import (
    expected_grad_log,
    expected_hess_log,
    gauss_hermite_points,
    stein_identity_check,
)
from gradflow.runner import config_from_mapping, run
from gradflow.targets import (
    gaussian_mixture_1d_target,
    gaussian_target,
    likelihood_target,
    linear_gaussian_target,
    logconcave_target,
    polynomial_slow_target,
    rosenbrock_target,
)

LAMS = (0.01, 0.1, 1.0)
G0 = GaussianState([10.0, 10.0], np.diag([0.5, 2.0]))
# moment-ODE kinds that target rho_post directly (Kalman-Bucy targets the likelihood)
MOMENT_KINDS = [k for k in GAUSSIAN_FLOW_KINDS if k not in ("stein_bilinear", "kalman_bucy")]
MOMENT_KINDS += [f"stein_bilinear:{p}" for p in STEIN_PRESETS]


def record(k: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    ACCEPTANCE[k] = (status, detail)
    print(f"[{status}] criterion {k}: {detail}")


def gaussian_errors(path, rho):
    """Absolute mean error and relative Frobenius covariance error along a path."""
    post = rho.posterior
    me = np.linalg.norm(path.means - post.mean, axis=1)
    ce = np.linalg.norm(path.covs - post.cov, axis=(1, 2)) / np.linalg.norm(post.cov)
    return me, ce


def fitted_slope(t, e, floor=1e-9):
    """Exponential rate over the post-transient window, above the rounding floor."""
    keep = e > floor
    t, e = t[keep], e[keep]
    return slope_fit(t, e, stabilized_window(t, e))


def within(x, target, rel):
    return abs(x - target) <= rel * abs(target)


# ---------------------------------------------------------------------------

def test_c01_analytic_fisher_rao():
    rho = gaussian_target(0.01)
    runs = []
    for _ in range(3):
        t0 = time.perf_counter()
        path = integrate("fisher_rao", G0, rho, dt=1e-3, t_end=5.0, record_every=10)
        runs.append(time.perf_counter() - t0)
    err = 0.0
    for t, m, C in zip(path.times, path.means, path.covs):
        ex = analytic_fr_solution(G0, rho.posterior.mean, rho.posterior.cov, t)
        err = max(err, np.abs(m - ex.mean).max(), np.abs(C - ex.cov).max())
    ok = err < 1e-6 and min(runs) < 1.0
    record(1, ok, f"sup error {err:.2e} (< 1e-6), runtime {min(runs):.2f} s (< 1 s, best of 3)")
    assert ok


def test_c02_rate_table():
    rho = gaussian_target(0.01)
    t0 = time.perf_counter()
    fr = integrate("fisher_rao", G0, rho, dt=1e-2, t_end=15.0, record_every=5)
    w = integrate("wasserstein", G0, rho, dt=0.05, t_end=700.0, record_every=50)
    gd = integrate("plain_gd", G0, rho, dt=2.5, t_end=1.5e5, record_every=200)
    elapsed = time.perf_counter() - t0
    s = {}
    for name, path in (("fr", fr), ("w", w), ("gd", gd)):
        me, ce = gaussian_errors(path, rho)
        if name != "gd":
            s[name + "_mean"] = fitted_slope(path.times, me)
        s[name + "_cov"] = fitted_slope(path.times, ce)
    _, gd_ce = gaussian_errors(gd, rho)
    decades = math.log10(gd_ce[0] / gd_ce[-1])
    checks = [
        within(s["fr_mean"], -1.0, 0.10),
        within(s["fr_cov"], -1.0, 0.10),
        within(s["w_mean"], -1 / 100, 0.20),
        within(s["w_cov"], -2 / 100, 0.20),
        within(s["gd_cov"], -1 / (2 * 100**2), 0.20),
        decades >= 2,
        elapsed < 30,
    ]
    ok = all(checks)
    record(2, ok, f"FR {s['fr_mean']:.4f}/{s['fr_cov']:.4f}, W {s['w_mean']:.5f}/{s['w_cov']:.5f}, "
                  f"GD cov {s['gd_cov']:.3e} over {decades:.1f} decades, {elapsed:.1f} s")
    assert ok


C3_STEPS = {
    "fisher_rao": {lam: (1e-2, 15.0) for lam in LAMS},
    "ai_wasserstein": {lam: (1e-2, 15.0) for lam in LAMS},
    "wasserstein": {0.01: (0.05, 700.0), 0.1: (0.05, 70.0), 1.0: (0.05, 10.0)},
    "plain_gd": {0.01: (2.5, 1.5e5), 0.1: (0.25, 1.5e3), 1.0: (0.05, 40.0)},
}


def test_c03_lambda_collapse():
    slopes = {}
    for kind, table in C3_STEPS.items():
        for lam, (dt, t_end) in table.items():
            rho = gaussian_target(lam)
            n = int(round(t_end / dt))
            path = integrate(kind, G0, rho, dt=dt, t_end=t_end, record_every=max(1, n // 300))
            _, ce = gaussian_errors(path, rho)
            slopes[kind, lam] = fitted_slope(path.times, ce)
    parts = []
    ok = True
    for kind in ("fisher_rao", "ai_wasserstein"):
        vals = [slopes[kind, lam] for lam in LAMS]
        spread = max(abs(a - b) / max(abs(a), abs(b)) for a in vals for b in vals)
        ok &= spread <= 0.10
        parts.append(f"{kind} spread {spread:.1e}")
    for kind in ("wasserstein", "plain_gd"):
        ratio = slopes[kind, 1.0] / slopes[kind, 0.01]
        ok &= ratio >= 5
        parts.append(f"{kind} ratio {ratio:.0f}x")
    record(3, ok, ", ".join(parts))
    assert ok


def test_c04_nonparametric_fisher_rao():
    rho = gaussian_mixture_1d_target([0.5, 0.5], [-2.0, 2.0], [1.0, 1.0])
    errs, paths = [], []
    for n, dt in ((2048, 1e-3), (4096, 5e-4)):
        post = grid_density_of(rho, n=n)
        d0 = GridDensity.gaussian(post.nodes, 3.0, 1.0)
        path = integrate_grid("grid-fr", d0, post, dt, 5.0, record_every=int(round(0.05 / dt)))
        errs.append(max(np.abs(d.values - fr_closed_form(d0, post, t).values).max()
                        for t, d in zip(path.times, path.densities)))
        paths.append(path)
    ok_b = errs[0] <= 5e-3 and errs[0] / errs[1] >= 3
    kl_slope = fitted_slope(paths[0].times, paths[0].kl, floor=1e-12)
    ok_a = within(kl_slope, -1.0, 0.10)
    record(4, ok_a and ok_b,
           f"closed-form sup error {errs[0]:.1e} -> {errs[1]:.1e} ({errs[0] / errs[1]:.1f}x), "
           f"KL slope {kl_slope:.3f} (asked -1 +/- 10%; the exact flow gives -2)")
    assert ok_b
    if not ok_a:
        pytest.xfail("KL along the FR flow decays like exp(-2t) for this pair; -1 is unattainable")


def test_c05_fokker_planck_rate():
    nodes = uniform_grid(-8.0, 11.0, 512)
    post = GridDensity.gaussian(nodes, 0.0, 1.0)
    d0 = GridDensity.gaussian(nodes, 3.0, 1.0)
    dt = 0.4 * fp_cfl_limit(nodes)
    path = integrate_grid("grid-fp", d0, post, dt, 6.0, record_every=int(round(0.05 / dt)),
                          keep_densities=False)
    slope = fitted_slope(path.times, path.kl, floor=1e-10)
    ok = within(slope, -2.0, 0.15) and bool(np.all(np.diff(path.kl) < 0))
    record(5, ok, f"KL slope {slope:.4f} (-2 +/- 15%), monotone decay, n=512")
    assert ok


def test_c06_slow_convergence():
    rho = polynomial_slow_target(1)
    g0 = GaussianState([0.0], [[1.5]])
    slopes = {}
    for kind in ("fisher_rao", "wasserstein", "plain_gd"):
        path = integrate(kind, g0, rho, dt=1.0, t_end=1e4, record_every=10)
        t = path.times
        dev = np.abs(path.covs[:, 0, 0] - 1.0)
        slopes[kind] = slope_fit(t, dev, window=(1e2, 1e4), loglog=True)
    ok = all(within(s, -0.5, 0.2) for s in slopes.values())
    record(6, ok, ", ".join(f"{k} {v:.3f}" for k, v in slopes.items()) + " (-0.5 +/- 0.1)")
    assert ok


def random_affine(rng):
    U, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    V, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    return AffineMap(U @ np.diag(rng.uniform(0.3, 3.0, 2)) @ V, 3.0 * rng.standard_normal(2))


def commutation_residual(kind, phi, g, rho):
    dm, dC = rhs(kind, g, rho)
    dm2, dC2 = rhs(kind, pushforward_gaussian(phi, g), pushforward_target(phi, rho))
    A = phi.A
    want_m, want_C = A @ dm, A @ dC @ A.T
    return max(np.abs(dm2 - want_m).max() / max(1.0, np.abs(want_m).max()),
               np.abs(dC2 - want_C).max() / max(1.0, np.abs(want_C).max()))


def test_c07_affine_invariance():
    rng = np.random.default_rng(7)
    worst = {}
    for kind in ("fisher_rao", "ai_wasserstein", "stein_bilinear:fisher-rao-equiv"):
        r = 0.0
        for i in range(100):
            rho = gaussian_target(LAMS[i % 3])
            g = GaussianState(3.0 * rng.standard_normal(2), np.diag(rng.uniform(0.3, 3.0, 2)))
            r = max(r, commutation_residual(kind, random_affine(rng), g, rho))
        worst[kind] = r
    r = 0.0
    for i in range(100):
        phi = random_affine(rng)
        rho = gaussian_target(LAMS[i % 3])
        e = initial_ensemble(GaussianState([1.0, 2.0], 2.0 * np.eye(2)), 30, i)
        a = pushforward_ensemble(phi, ai_svgd_step(e, rho, 0.01))
        b = ai_svgd_step(pushforward_ensemble(phi, e), pushforward_target(phi, rho), 0.01)
        r = max(r, np.abs(a.particles - b.particles).max() / np.abs(a.particles).max())
    worst["ai_svgd"] = r
    phi = AffineMap(np.diag([1.0, 10.0]), np.zeros(2))
    rho, g = gaussian_target(1.0), GaussianState([1.0, 1.0], np.diag([2.0, 0.5]))
    _, dC = rhs("wasserstein", g, rho)
    _, dC2 = rhs("wasserstein", pushforward_gaussian(phi, g), pushforward_target(phi, rho))
    witness = np.linalg.norm(dC2 - phi.A @ dC @ phi.A.T) / np.linalg.norm(phi.A @ dC @ phi.A.T)
    ok = max(worst.values()) <= 1e-10 and witness >= 1e-2
    record(7, ok, f"worst commutation residual {max(worst.values()):.1e} (<= 1e-10), "
                  f"wasserstein witness {witness:.2f} (>= 1e-2)")
    assert ok


def test_c08_normalization_invariance():
    c = 17.3
    rng = np.random.default_rng(8)
    identical = True
    for lam in LAMS:
        for make in (gaussian_target, logconcave_target, rosenbrock_target):
            rho = make(lam)
            rs = rho.shifted(c)
            g = GaussianState(rng.standard_normal(2), np.diag(rng.uniform(0.5, 2.0, 2)))
            for kind in MOMENT_KINDS:
                a, b = rhs(kind, g, rho), rhs(kind, g, rs)
                identical &= all(np.array_equal(x, y) for x, y in zip(a, b))
            e = initial_ensemble(g, 20, 3)
            xi = NoiseStream(3).draw(0, 20, 2)
            for step in (lambda r: langevin_step(e, r, 0.01, xi), lambda r: ai_langevin_step(e, r, 0.01, xi),
                         lambda r: svgd_step(e, r, 0.01), lambda r: ai_svgd_step(e, r, 0.01)):
                identical &= np.array_equal(step(rho).particles, step(rs).particles)
    H, R, y = np.eye(2), np.eye(2), np.array([1.0, -1.0])
    kb = likelihood_target(H, R, y)
    g = GaussianState([0.0, 0.0], np.eye(2))
    identical &= all(np.array_equal(x, y) for x, y in zip(rhs("kalman_bucy", g, kb),
                                                          rhs("kalman_bucy", g, kb.shifted(c))))
    # grid flows renormalize exp(log rho - max): equal up to rounding
    mix = gaussian_mixture_1d_target([0.5, 0.5], [-2.0, 2.0], [1.0, 1.0])
    nodes = grid_density_of(mix, n=512).nodes
    post, post_s = grid_density_of(mix, nodes), grid_density_of(mix.shifted(c), nodes)
    d0 = GridDensity.gaussian(nodes, 3.0, 1.0)
    grid_dev = max(np.abs(fr_flow_step(d0, post, 0.01).values - fr_flow_step(d0, post_s, 0.01).values).max(),
                   np.abs(wasserstein_fp_step(d0, post, 1e-4).values
                          - wasserstein_fp_step(d0, post_s, 1e-4).values).max())
    ok = identical and grid_dev <= 1e-12
    record(8, ok, f"Gaussian and particle steps bit-identical: {identical}; "
                  f"grid steps differ by {grid_dev:.1e} (rounding of the renormalization)")
    assert ok


def test_c09_stationarity():
    worst = 0.0
    for lam in LAMS:
        rho = gaussian_target(lam)
        for kind in MOMENT_KINDS:
            dm, dC = rhs(kind, rho.posterior, rho)
            worst = max(worst, np.abs(dm).max(), np.abs(dC).max())
    # Kalman-Bucy transports prior to posterior over unit time instead
    rng = np.random.default_rng(9)
    H, R, y = rng.normal(size=(3, 2)), np.diag(rng.uniform(0.5, 2.0, 3)), rng.normal(size=3)
    prior = GaussianState(rng.normal(size=2), np.diag(rng.uniform(0.5, 2.0, 2)))
    post = linear_gaussian_target(H, R, y, prior).posterior
    kb = integrate("kalman_bucy", prior, likelihood_target(H, R, y), dt=1e-3, t_end=1.0, record_every=1000)
    kb_err = max(np.abs(kb.final.mean - post.mean).max(), np.abs(kb.final.cov - post.cov).max())
    rho = rosenbrock_target(1.0)
    f = integrate("plain_gd", GaussianState([0.0, 0.0], 4.0 * np.eye(2)), rho, dt=1.0, t_end=1e4,
                  record_every=1000).final
    q = gauss_hermite_points(f, 30)
    res_m = np.abs(expected_grad_log(rho, f, q)).max()
    res_C = np.abs(spd_inverse(f.cov) + expected_hess_log(rho, f, q)).max()
    ok = worst <= 1e-12 and kb_err <= 1e-10 and res_m < 1e-4 and res_C < 1e-4
    record(9, ok, f"max |rhs| at posterior {worst:.1e}, Kalman-Bucy error {kb_err:.1e}, "
                  f"rosenbrock GH residuals {res_m:.1e}/{res_C:.1e} (< 1e-4)")
    assert ok


def test_c10_stein_identity():
    rng = np.random.default_rng(10)
    quad_worst = 0.0
    for _ in range(50):
        Q = rng.normal(size=(2, 2))
        rho = linear_gaussian_target(Q, np.eye(2), rng.normal(size=2),
                                     GaussianState(rng.normal(size=2), np.eye(2)))
        A = rng.normal(size=(2, 2))
        g = GaussianState(rng.normal(size=2), A @ A.T + 0.2 * np.eye(2))
        lhs, rhs_ = stein_identity_check(rho, g)
        quad_worst = max(quad_worst, np.abs(lhs - rhs_).max() / max(1.0, np.abs(lhs).max()))
    ros_worst = 0.0
    for lam in LAMS:
        rho = rosenbrock_target(lam)
        for _ in range(5):
            A = rng.normal(size=(2, 2))
            g = GaussianState(rng.normal(size=2), A @ A.T + 0.2 * np.eye(2))
            ut = expected_hess_log(rho, g)
            _, gh = stein_identity_check(rho, g, gauss_hermite_points(g, 30))
            ros_worst = max(ros_worst, np.abs(ut - gh).max() / max(1.0, np.abs(ut).max()))
    ok = quad_worst <= 1e-12 and ros_worst <= 1e-6
    record(10, ok, f"quadratic {quad_worst:.1e} (exact), rosenbrock UT vs GH {ros_worst:.1e} (<= 1e-6)")
    assert ok


def particle_run(preset, flow, lam, cache):
    cfg = config_from_mapping("c11", {"preset": preset, "flow": flow, "lam": str(lam), "J": "100",
                                      "t_end": "15", "record_every": "100", "cache_dir": cache})
    res = run(cfg, write=False)
    assert res.status == "ok", res.status
    return res


def test_c11_particle_experiments(oracle_cache):
    t0 = time.perf_counter()
    final = {}
    for flow in ("ai-svgd", "ai-langevin"):
        for lam in LAMS:
            r = particle_run("fig-gaussian", flow, lam, oracle_cache)
            final[flow, lam] = (r.column("mean_err")[-1], r.column("cov_err")[-1])
    lang = particle_run("fig-gaussian", "langevin", 0.01, oracle_cache).column("mean_err")[-1]
    plateaus = {}
    for flow in ("langevin", "ai-langevin", "svgd", "ai-svgd"):
        r = particle_run("fig-rosenbrock", flow, 1.0, oracle_cache)
        t, ce = r.column("t"), r.column("cov_err")
        plateaus[flow] = ce[t >= 10].min()
    elapsed = time.perf_counter() - t0

    misses = [f"{f} lam={l}: {m:.2f}/{c:.2f}" for (f, l), (m, c) in final.items() if not (m < 0.3 and c < 0.3)]
    ok_a = not misses
    ok_b = lang >= 2 * final["ai-langevin", 0.01][0]
    ok_c = min(plateaus.values()) > 0.2
    record(11, ok_a and ok_b and ok_c and elapsed < 120,
           f"(a) {'all below 0.3' if ok_a else 'misses ' + '; '.join(misses)}; "
           f"(b) langevin {lang:.2f} vs ai {final['ai-langevin', 0.01][0]:.2f}; "
           f"(c) min rosenbrock plateau {min(plateaus.values()):.2f}; {elapsed:.0f} s")
    assert ok_b and ok_c and elapsed < 120
    assert all(final["ai-svgd", lam][0] < 0.3 and final["ai-svgd", lam][1] < 0.3 for lam in LAMS)
    if not ok_a:
        pytest.xfail("ai-langevin with J=100 keeps a Monte Carlo error of order sqrt(tr C / J)")


def test_c12_affine_meanfield_consistency():
    J = 10**5
    dt, n = 1e-3, 3000
    bound = 3 / math.sqrt(J)
    worst = {}
    for lam in LAMS:
        rho = gaussian_target(lam)
        e = initial_ensemble(G0, J, 0)
        ode = iterate("fisher_rao", G0, rho, dt, n)
        m, C = G0.mean, G0.cov
        em = ec = 0.0
        for k in range(1, n + 1):
            e = affine_meanfield_step(e, affine_drift("fisher_rao", GaussianState(m, C), rho), m, dt)
            _, m, C = next(ode)
            if k % 100 == 0:
                g = empirical_moments(e)
                em = max(em, np.linalg.norm(g.mean - m) / math.sqrt(np.trace(C)))
                ec = max(ec, np.linalg.norm(g.cov - C) / np.linalg.norm(C))
        worst[lam] = (em, ec)
    ok = all(em < bound and ec < bound for em, ec in worst.values())
    record(12, ok, ", ".join(f"lam={l}: {em:.1e}/{ec:.1e}" for l, (em, ec) in worst.items())
               + f" (< 3/sqrt(J) = {bound:.1e})")
    assert ok


def test_c13_oracle_cross_validation(oracle_cache):
    closed = 0.0
    zs = []
    for target in ("gaussian", "logconcave", "rosenbrock"):
        for lam in LAMS:
            ref = reference_stats(target, lam, seed=0, cache_dir=oracle_cache)
            if target == "rosenbrock":
                cov = np.array([[10.0, 20.0], [20.0, 10.0 / lam + 240.0]])
                closed = max(closed, np.abs(ref.mean - [1.0, 11.0]).max() / 11.0,
                             np.abs(ref.cov - cov).max() / np.abs(cov).max())
            mc = mc_oracle(target, lam, 10**6, 0, ref.omegas, ref.offsets)
            iu = np.triu_indices(2)
            zs.append(np.concatenate([(mc.mean - ref.mean) / mc.mean_se,
                                      ((mc.cov - ref.cov) / mc.cov_se)[iu],
                                      (mc.cos_values - ref.cos_values) / mc.cos_se]))
    z = np.abs(np.concatenate(zs))
    ok = closed <= 1e-10 and z.max() <= 3
    record(13, ok, f"rosenbrock closed forms to {closed:.1e}; {z.size} MC comparisons, max |z| {z.max():.2f} (<= 3)")
    assert ok
