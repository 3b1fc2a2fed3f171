"""Numerical checks of gradient descent-ascent rates on analytic saddle problems."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import least_squares

from .quantizer import clip_project, grid_quantize, quantize_sign


class TheoryError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SaddleProblem:
    """min_x max_y F(x, y) with closed-form gradients and constants.

    ``min_x``/``max_y`` give the inner optima for PL spot checks; ``h`` is
    ``max_y F(x, .)`` and ``h_star`` its minimum (needed for the potential).
    """
    name: str
    d_x: int
    d_y: int
    value: Callable
    grad_x: Callable
    grad_y: Callable
    x_star: np.ndarray
    y_star: np.ndarray
    L: float | None = None
    L_x: float | None = None
    L_y: float | None = None
    mu1: float | None = None
    mu2: float | None = None
    h: Callable | None = None
    h_star: float = 0.0
    min_x: Callable | None = None
    max_y: Callable | None = None
    noise_std: float = 0.0
    coupling_norm: float = 0.0
    curvature_x: float = 0.0
    curvature_y: float = 0.0
    convex_concave: bool = False

    def lipschitz_value(self, D_x, D_y):
        """Lipschitz constant of F in x over the ball of radii (D_x, D_y) around the saddle."""
        if self.L is not None:
            return self.L
        return self.curvature_x * D_x + self.coupling_norm * D_y

    def gradient_second_moments(self, D_x, D_y):
        """Bounds on E||g_x||^2, E||g_y||^2 over the same ball under Gaussian noise."""
        gx = (self.curvature_x * D_x + self.coupling_norm * D_y) ** 2 + self.d_x * self.noise_std ** 2
        gy = (self.coupling_norm * D_x + self.curvature_y * D_y) ** 2 + self.d_y * self.noise_std ** 2
        return gx, gy


def bilinear_quadratic(d=10, a=1.0, c=1.0, coupling=1.0, seed=0, x_star=None, y_star=None,
                       noise_std=0.05):
    """F = a/2 |x-x*|^2 + (x-x*)^T B (y-y*) - c/2 |y-y*|^2 with random B of spectral scale ``coupling``."""
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((d, d)) / np.sqrt(d) * coupling
    xs = np.zeros(d) if x_star is None else np.broadcast_to(np.asarray(x_star, float), (d,)).copy()
    ys = np.zeros(d) if y_star is None else np.broadcast_to(np.asarray(y_star, float), (d,)).copy()
    return _bilinear(d, a, c, B, xs, ys, noise_std, "bilinear_quadratic")


def scalar_game(noise_std=0.0):
    """F = x^2/2 - y^2/2 + xy, the one-dimensional member of the bilinear family."""
    return _bilinear(1, 1.0, 1.0, np.ones((1, 1)), np.zeros(1), np.zeros(1), noise_std, "scalar_game")


def _bilinear(d, a, c, B, xs, ys, noise_std, name):
    def value(x, y):
        u, v = x - xs, y - ys
        return 0.5 * a * u @ u + u @ B @ v - 0.5 * c * v @ v

    def gx(x, y):
        return a * (x - xs) + B @ (y - ys)

    def gy(x, y):
        return B.T @ (x - xs) - c * (y - ys)

    bn = float(np.linalg.norm(B, 2))
    return SaddleProblem(name, d, d, value, gx, gy, xs, ys, L=None, L_x=a, L_y=bn,
                         noise_std=noise_std, coupling_norm=bn, curvature_x=a, curvature_y=c,
                         convex_concave=True)


def pl_quadratic(p=2.0, q=2.0, r=0.0, d=1):
    """F = p/2 |x|^2 + r x.y - q/2 |y|^2: two-sided PL with mu1 = p, mu2 = q."""
    if p <= 0 or q <= 0:
        raise ValueError("p and q must be positive")

    def value(x, y):
        return 0.5 * p * x @ x + r * x @ y - 0.5 * q * y @ y

    def h(x):
        return 0.5 * (p + r * r / q) * x @ x

    def min_x(y):
        return -0.5 * (r * r / p + q) * y @ y

    z = np.zeros(d)
    return SaddleProblem(f"pl_quadratic(p={p},q={q},r={r})", d, d, value,
                         lambda x, y: p * x + r * y, lambda x, y: r * x - q * y, z, z.copy(),
                         L=max(p, q, abs(r)), mu1=p, mu2=q, h=h, h_star=0.0, min_x=min_x, max_y=h)


def _pl_constant(f, df, lo=-20.0, hi=20.0, n=400_001, margin=0.99):
    t = np.linspace(lo, hi, n)
    t = t[np.abs(t) > 1e-6]
    return margin * float(np.min(df(t) ** 2 / (2.0 * f(t))))


def pl_nonconvex(amp=3.0):
    """F = f(x) - f(y) with f(t) = t^2 + amp sin^2 t: nonconvex-nonconcave yet two-sided PL.

    f'' = 2 + 2 amp cos 2t ranges over [2 - 2 amp, 2 + 2 amp], so the function is
    (2 + 2 amp)-smooth and nonconvex once amp > 1. The PL constant is measured on a
    fine grid with a 1% margin; away from the grid f'^2 / 2f tends to 2.
    """
    def f(t):
        return t * t + amp * np.sin(t) ** 2

    def df(t):
        return 2 * t + amp * np.sin(2 * t)

    mu = _pl_constant(f, df)

    def value(x, y):
        return float(np.sum(f(x)) - np.sum(f(y)))

    def h(x):
        return float(np.sum(f(x)))

    def min_x(y):
        return -float(np.sum(f(y)))

    z = np.zeros(1)
    return SaddleProblem(f"pl_nonconvex(amp={amp})", 1, 1, value, lambda x, y: df(x), lambda x, y: -df(y),
                         z, z.copy(), L=2 + 2 * amp, mu1=mu, mu2=mu, h=h, h_star=0.0,
                         min_x=min_x, max_y=h)


def duality_gap(problem, x, y):
    """F(x, y*) - F(x*, y)."""
    return float(problem.value(np.asarray(x, float), problem.y_star)
                 - problem.value(problem.x_star, np.asarray(y, float)))


def pl_violations(problem, n=10_000, seed=0, scale=3.0, slack=1e-9):
    """Number of random points where either PL inequality fails by more than ``slack``."""
    if problem.min_x is None or problem.max_y is None:
        raise TheoryError(f"{problem.name} has no closed-form inner optima")
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        x = rng.normal(0, scale, problem.d_x)
        y = rng.normal(0, scale, problem.d_y)
        F = problem.value(x, y)
        gx, gy = problem.grad_x(x, y), problem.grad_y(x, y)
        bad += 0.5 * gx @ gx - problem.mu1 * (F - problem.min_x(y)) < -slack
        bad += 0.5 * gy @ gy - problem.mu2 * (problem.max_y(x) - F) < -slack
    return int(bad)


def quantization_error_violations(d, n=1000, spacing=0.05, seed=0, mode="grid"):
    """Count vectors with ||Q(x) - x|| > sqrt(d) * spacing.

    ``grid`` rounds to the nearest multiple of ``spacing``; ``sign`` applies
    spacing * sign(.) to buffers already clipped to [-spacing, spacing].
    """
    rng = np.random.default_rng([seed, d])
    bound = np.sqrt(d) * spacing
    bad = 0
    for _ in range(n):
        x = rng.normal(0, 1, d)
        if mode == "grid":
            err = np.linalg.norm(grid_quantize(x, spacing) - x)
        else:
            b = clip_project(x * spacing, spacing)
            err = np.linalg.norm(quantize_sign(b, spacing) - b)
        bad += err > bound
    return int(bad)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    model: str
    rate: float          # exponent for power models, ratio for geometric
    coefficient: float
    floor: float
    residual: float
    window: tuple


def default_window(n):
    return (n // 10, n)


def fit_rate(k, values, window=None, model="inv_sqrt_plus_floor", fit_floor=True):
    """Least-squares fit in log space.

    ``inv_sqrt_plus_floor``: values ~ c * k**e + f (f >= 0, dropped if ``fit_floor`` is False).
    ``geometric``: values ~ c * rho**k.
    """
    k = np.asarray(k, float)
    v = np.asarray(values, float)
    if len(k) != len(v):
        raise ValueError("k and values differ in length")
    lo, hi = window if window is not None else default_window(len(v))
    if hi - lo < 2:
        raise ValueError("fit window needs at least two points")
    k, v = k[lo:hi], v[lo:hi]
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("log-space fit needs positive finite values")
    lv = np.log(v)
    if model == "geometric":
        slope, icept = np.polyfit(k, lv, 1)
        res = float(np.sqrt(np.mean((icept + slope * k - lv) ** 2)))
        return FitResult(model, float(np.exp(slope)), float(np.exp(icept)), 0.0, res, (lo, hi))
    if model != "inv_sqrt_plus_floor":
        raise ValueError(f"unknown model {model!r}")
    lk = np.log(k)
    e0, c0 = np.polyfit(lk, lv, 1)
    res0 = float(np.sqrt(np.mean((c0 + e0 * lk - lv) ** 2)))
    if not fit_floor:
        return FitResult(model, float(e0), float(np.exp(c0)), 0.0, res0, (lo, hi))

    def resid(theta):
        lc, e, f = theta
        return np.log(np.exp(lc) * k ** e + f) - lv

    sol = least_squares(resid, x0=[c0, e0, 0.0], bounds=([-np.inf, -5.0, 0.0], [np.inf, 5.0, np.inf]),
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    res = float(np.sqrt(np.mean(sol.fun ** 2)))
    if res > res0:
        return FitResult(model, float(e0), float(np.exp(c0)), 0.0, res0, (lo, hi))
    lc, e, f = sol.x
    return FitResult(model, float(e), float(np.exp(lc)), float(f), res, (lo, hi))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RateReport:
    name: str
    k: np.ndarray
    value: np.ndarray          # duality gap or squared gradient norm
    potential: np.ndarray
    bound: np.ndarray
    fits: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    ratios: np.ndarray | None = None

    @property
    def passed(self):
        return all(self.checks.values())

    def to_csv(self, stride=1):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "value", "potential", "bound"])
        idx = np.arange(0, len(self.k), stride)
        if len(self.k) and idx[-1] != len(self.k) - 1:
            idx = np.append(idx, len(self.k) - 1)
        for i in idx:
            w.writerow([int(self.k[i]), repr(float(self.value[i])), repr(float(self.potential[i])),
                        repr(float(self.bound[i]))])
        return buf.getvalue()

    def summary(self):
        lines = [f"{self.name}:"]
        for key, ok in self.checks.items():
            lines.append(f"  {'PASS' if ok else 'FAIL'} {key}")
        for key, fit in self.fits.items():
            lines.append(f"  fit {key}: rate={fit.rate:.6g} floor={fit.floor:.3g} residual={fit.residual:.3g}")
        for key, val in self.info.items():
            lines.append(f"  {key} = {val}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# quantized stochastic GDA on convex-concave problems
# ---------------------------------------------------------------------------

def quantized_gda_bound(problem, l, C_alpha, C_beta, Delta, D_x, D_y):
    """Right-hand side of the averaged-iterate duality-gap bound after ``l`` iterations."""
    l = np.asarray(l, float)
    L = problem.lipschitz_value(D_x, D_y)
    Gx2, Gy2 = problem.gradient_second_moments(D_x, D_y)
    d = problem.d_x
    transient = (D_x ** 2 / C_alpha + D_y ** 2 / C_beta) / (2.0 * np.sqrt(l))
    noise = np.sqrt(l + 1) / (2.0 * l) * (C_alpha * Gx2 + C_alpha * problem.L_y * Gx2
                                          + C_alpha * problem.L_y * D_y ** 2 + C_beta * Gy2)
    floor = (problem.L_x * D_x + L * D_x + 2 * problem.L_y * D_y) * np.sqrt(d) * Delta
    return transient + noise + floor


def run_quantized_gda(problem, C_alpha=0.5, C_beta=0.5, Delta=0.0, K=100_000, seed=0,
                      x0=None, y0=None, divergence_limit=1e6):
    """Quantized stochastic alternating GDA with steps C/sqrt(k).

    x_hat <- x_hat - a_k g_x(x, y); x <- Q(x_hat); y <- y + b_k g_y(x, y),
    with Q the nearest-grid rounding of spacing Delta. Records the duality gap
    of the running averages of (x, y) and of the raw iterates.
    """
    if not problem.convex_concave:
        raise TheoryError(f"{problem.name} is not convex-concave")
    if Delta < 0:
        raise ValueError("Delta must be >= 0")
    rng = np.random.default_rng(seed)
    dx, dy = problem.d_x, problem.d_y
    x_hat = rng.standard_normal(dx) if x0 is None else np.array(x0, float)
    y = rng.standard_normal(dy) if y0 is None else np.array(y0, float)
    x = grid_quantize(x_hat, Delta)
    nx = rng.standard_normal((K, dx)) * problem.noise_std
    ny = rng.standard_normal((K, dy)) * problem.noise_std
    xs = np.empty((K, dx))
    ys = np.empty((K, dy))
    gx, gy = problem.grad_x, problem.grad_y
    for k in range(1, K + 1):
        xs[k - 1] = x
        ys[k - 1] = y
        root = np.sqrt(k)
        x_hat = x_hat - (C_alpha / root) * (gx(x, y) + nx[k - 1])
        x = grid_quantize(x_hat, Delta)
        y = y + (C_beta / root) * (gy(x, y) + ny[k - 1])
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x_hat))) or np.abs(x_hat).max() > divergence_limit:
            raise TheoryError(f"iterates diverged at k={k}")
    ks = np.arange(1, K + 1)
    xbar = np.cumsum(xs, axis=0) / ks[:, None]
    ybar = np.cumsum(ys, axis=0) / ks[:, None]
    gap_avg = _gaps(problem, xbar, ybar)
    gap_raw = _gaps(problem, xs, ys)
    D_x = float(np.max(np.linalg.norm(xs - problem.x_star, axis=1)))
    D_y = float(np.max(np.linalg.norm(ys - problem.y_star, axis=1)))
    bound = quantized_gda_bound(problem, ks, C_alpha, C_beta, Delta, D_x, D_y)
    report = RateReport(f"quantized_gda[{problem.name}, Delta={Delta}]", ks, gap_avg, gap_raw, bound,
                        info={"D_x": D_x, "D_y": D_y, "L": problem.lipschitz_value(D_x, D_y),
                              "L_x": problem.L_x, "L_y": problem.L_y, "Delta": Delta, "K": K})
    if gap_avg.max() > divergence_limit:
        raise TheoryError("duality gap exceeded divergence limit", report)
    report.checks["gap_nonnegative"] = bool(gap_avg.min() >= -1e-10)
    report.checks["gap_below_bound"] = bool(np.all(gap_avg <= bound))
    return report


def _gaps(problem, X, Y):
    return np.array([duality_gap(problem, x, y) for x, y in zip(X, Y)])


def pre_floor_window(values, floor=None, factor=2.0):
    """Post-transient window that ends where ``values`` first drop to ``factor * floor``."""
    n = len(values)
    lo = n // 10
    if not floor or floor <= 0:
        return (lo, n)
    below = np.flatnonzero(values[lo:] <= factor * floor)
    hi = lo + int(below[0]) if below.size else n
    return (lo, max(hi, lo + 2))


def gda_rate_check(problem=None, K=100_000, C=0.5, Delta=0.05, seed=0, tolerance=0.15):
    """Rate check at Delta = 0 plus floor check at Delta > 0 on the same problem family.

    The Delta > 0 problem places the saddle off the grid so the floor is strictly positive.
    """
    base = problem or bilinear_quadratic(10, noise_std=0.05, seed=seed)
    exact = run_quantized_gda(base, C, C, 0.0, K, seed)
    fit = fit_rate(exact.k, exact.value, pre_floor_window(exact.value), fit_floor=False)
    exact.fits["averaged_gap"] = fit
    exact.fits["per_iterate_gap"] = fit_rate(exact.k, np.maximum(exact.potential, 1e-300),
                                             pre_floor_window(exact.potential), fit_floor=False)
    exact.checks["exponent_within_tolerance"] = bool(abs(fit.rate + 0.5) <= tolerance)

    off = bilinear_quadratic(base.d_x, a=base.curvature_x, c=base.curvature_y, seed=seed,
                             x_star=Delta * 0.26, y_star=0.0, noise_std=base.noise_std)
    quant = run_quantized_gda(off, C, C, Delta, K, seed)
    tail = quant.value[-max(K // 10, 1):]
    floor = float(np.mean(tail))
    quant.info["floor"] = floor
    quant.info["tail_over_early"] = floor / float(np.mean(quant.value[K // 10:K // 5]))
    quant.info["bound_at_K"] = float(quant.bound[-1])
    quant.checks["floor_positive"] = bool(floor > 0)
    quant.checks["floor_below_bound"] = bool(floor <= quant.bound[-1])
    return exact, quant


# ---------------------------------------------------------------------------
# deterministic GDA under two-sided PL
# ---------------------------------------------------------------------------

def pl_step_sizes(problem):
    """(alpha, beta) = (mu2^2 / 18 L^3, 1 / L)."""
    return problem.mu2 ** 2 / (18.0 * problem.L ** 3), 1.0 / problem.L


def pl_envelope(problem):
    """(contraction rate, M) of the squared-gradient-norm bound."""
    L, m1, m2 = problem.L, problem.mu1, problem.mu2
    Lh = L + L * L / (2 * m2)
    return 1.0 - m1 * m2 ** 2 / (36.0 * L ** 3), max(2 * Lh ** 2 / m1, 40 * L ** 2 / m2)


def run_gda_pl(problem, alpha=None, beta=None, K=500, x0=None, y0=None, lam=0.1, seed=0):
    """Exact-gradient alternating GDA; records squared gradient norm and P_k = a_k + lam b_k."""
    if problem.h is None:
        raise TheoryError(f"{problem.name} has no closed-form max_y F; the potential is undefined")
    a0, b0 = pl_step_sizes(problem)
    alpha = a0 if alpha is None else alpha
    beta = b0 if beta is None else beta
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(problem.d_x) if x0 is None else np.array(x0, float)
    y = rng.standard_normal(problem.d_y) if y0 is None else np.array(y0, float)
    gnorm = np.empty(K + 1)
    pot = np.empty(K + 1)
    for k in range(K + 1):
        gx, gy = problem.grad_x(x, y), problem.grad_y(x, y)
        gnorm[k] = gx @ gx + gy @ gy
        hx = problem.h(x)
        pot[k] = (hx - problem.h_star) + lam * (hx - problem.value(x, y))
        if k == K:
            break
        x = x - alpha * gx
        y = y + beta * problem.grad_y(x, y)
    rate, M = pl_envelope(problem)
    ks = np.arange(K + 1)
    bound = pot[0] * M * rate ** ks
    report = RateReport(f"gda_pl[{problem.name}]", ks, gnorm, pot, bound,
                        info={"alpha": alpha, "beta": beta, "lam": lam, "rate": rate, "M": M})
    report.ratios = _ratios(pot)
    return report


def _ratios(pot):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = pot[1:] / pot[:-1]
    return np.where(pot[:-1] > 0, r, 0.0)


def pl_rate_check(problem=None, K=500, seed=0, slack=1e-9):
    problem = problem or pl_quadratic(2.0, 2.0)
    rep = run_gda_pl(problem, K=K, seed=seed)
    rate = rep.info["rate"]
    ratios = rep.ratios
    live = rep.potential[:-1] > 0
    rep.checks["potential_strictly_decreasing"] = bool(np.all(np.diff(rep.potential)[live] < 0))
    rep.checks["ratio_below_rate"] = bool(np.all(ratios[live] <= rate + slack))
    rep.checks["gradient_below_envelope"] = bool(np.all(rep.value <= rep.bound + slack))
    rep.info["max_ratio"] = float(ratios[live].max()) if live.any() else 0.0
    return rep


def contraction_side_condition(L, mu2, alpha, beta, lam, eps):
    return alpha / 2 + lam * (1 - mu2 * beta) * (alpha / 2 - (alpha + alpha ** 2 * L / 2) * (1 + 1 / eps))


def contraction_factors(L, mu1, mu2, alpha, beta, lam, eps, L_h=None):
    """(gamma1, gamma2) bounding one-step contraction of a_k + lam b_k."""
    if lam <= 0 or eps <= 0:
        raise ValueError("lam and eps must be positive")
    L_h = L + L * L / (2 * mu2) if L_h is None else L_h
    if alpha > 1.0 / L_h + 1e-15:
        raise ValueError(f"step condition alpha <= 1/L_h violated: {alpha} > {1.0 / L_h}")
    if beta > 1.0 / L + 1e-15:
        raise ValueError(f"step condition beta <= 1/L violated: {beta} > {1.0 / L}")
    side = contraction_side_condition(L, mu2, alpha, beta, lam, eps)
    if side < 0:
        raise ValueError("side condition alpha/2 + lam(1 - mu2 beta)[alpha/2 - (alpha + alpha^2 L/2)(1 + 1/eps)] >= 0 "
                         f"violated (value {side:.3g})")
    q = 2 * alpha + alpha ** 2 * L
    g1 = 1 - mu1 * alpha - lam * mu1 * (1 - mu2 * beta) * (alpha - q * (1 + 1 / eps))
    g2 = (1 - mu2 * beta + (alpha * L ** 2 / (lam * mu2) if alpha else 0.0)
          + (1 - mu2 * beta) * L ** 2 / mu2 * (q * (1 + eps) + alpha))
    return float(g1), float(g2)


def contraction_check(problem, alpha, beta, lam=0.1, eps=1.0, K=500, seed=0, slack=1e-9):
    g1, g2 = contraction_factors(problem.L, problem.mu1, problem.mu2, alpha, beta, lam, eps)
    rep = run_gda_pl(problem, alpha, beta, K=K, lam=lam, seed=seed)
    live = rep.potential[:-1] > 0
    ratios = rep.ratios[live]
    rep.info.update(gamma1=g1, gamma2=g2, max_ratio=float(ratios.max()) if ratios.size else 0.0)
    rep.checks["ratio_below_max_gamma"] = bool(np.all(ratios <= max(g1, g2) + slack))
    return rep


def contraction_suite(K=500):
    """Three (problem, step) settings that satisfy the side condition."""
    quad = pl_quadratic(2.0, 2.0)
    coupled = pl_quadratic(2.0, 3.0, 1.0, d=3)
    wavy = pl_nonconvex(3.0)
    settings = [
        (quad, *pl_step_sizes(quad)),
        (coupled, *pl_step_sizes(coupled)),
        (wavy, *pl_step_sizes(wavy)),
    ]
    return [contraction_check(p, a, b, K=K) for p, a, b in settings]
