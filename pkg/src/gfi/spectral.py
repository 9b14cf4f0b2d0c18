"""First-moment numerics on cluster sizes.

The generator L acts on functions of the cluster size n and is truncated to
{1..N}; growth out of state N is dropped, so the truncated semigroup is
sub-Markovian and its Perron root approaches the true one from below.

Left action (measures) and right action (functions) of the semigroup are
integrated with classical RK4. The Perron triple comes from power iteration:
a short warm-up on ``L + cI`` (entrywise nonnegative) followed by power
iteration on the resolvent ``(sigma I - L)^{-1}`` whose shift is steered by
Collatz-Wielandt bounds, which keeps sigma above the Perron root at all
times so the iterated matrix stays nonnegative.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .params import Params, ResourceCapError, ValidationError, param_hash

GENERATOR_VARIANTS = ("standard", "modified", "vertex-removal")

DEFAULT_RESIDUAL_TOL = 1e-8
DEFAULT_LAMBDA_TOL = 1e-6
DEFAULT_N = 256
DEFAULT_N_CAP = 4096

# RK4 is stable on the negative real axis up to |z| ~ 2.785.
_RK4_STABILITY = 2.78
# accuracy cap on the default step when the rates are small
DEFAULT_MAX_DT = 0.01


class StepSizeError(RuntimeError):
    """Time step too large for the integrator, or the solution blew up."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class QuadratureError(RuntimeError):
    pass


def _variant_for(params: Params, variant: Optional[str]) -> str:
    if variant is None:
        return "modified" if params.modified else "standard"
    if variant not in GENERATOR_VARIANTS:
        raise ValidationError(f"unknown generator variant {variant!r}")
    return variant


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Truncated first-moment generator; ``matrix[n-1, m-1]`` is the rate n -> m."""

    params: Params
    N: int
    variant: str
    matrix: np.ndarray
    boundary: str = "drop-growth-flux"

    @property
    def sizes(self) -> np.ndarray:
        return np.arange(1, self.N + 1, dtype=float)

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def max_rate(self) -> float:
        return float(np.max(np.abs(np.diag(self.matrix))))

    @property
    def isolation_rates(self) -> np.ndarray:
        n = self.sizes
        if self.variant == "modified":
            return self.params.theta * (n - 1.0)
        return self.params.theta * n

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f

    def apply_left(self, mu: np.ndarray) -> np.ndarray:
        return mu @ self.matrix

    def stable_dt(self) -> float:
        return 1.0 / max(self.max_rate, 1e-12)


def _fragmentation_kernel(gamma: float, N: int) -> np.ndarray:
    """Gain matrix: entry (n, m) is gamma*n*(1/(m(m+1)) + 1/((n-m)(n-m+1))) for m < n."""
    n = np.arange(1, N + 1, dtype=float)[:, None]
    m = np.arange(1, N + 1, dtype=float)[None, :]
    gap = n - m
    below = gap > 0
    safe_gap = np.where(below, gap, 1.0)
    gain = gamma * n * (1.0 / (m * (m + 1.0)) + 1.0 / (safe_gap * (safe_gap + 1.0)))
    return np.where(below, gain, 0.0)


def build_generator(params: Params, N: int, variant: Optional[str] = None) -> GeneratorMatrix:
    """Dense truncated generator on sizes 1..N.

    Row n holds growth ``beta*n`` towards n+1 (absent for n = N), the
    fragmentation gains and the total outflow rate on the diagonal.
    ``variant`` is ``standard`` (isolation theta*n), ``modified`` (isolation
    theta*(n-1)) or ``vertex-removal`` (fragmentation by deleting a vertex,
    first-moment kernel only). Defaults to the variant implied by ``params``.
    """
    if isinstance(N, bool) or int(N) != N or N < 2:
        raise ValidationError(f"truncation N must be an integer >= 2, got {N}")
    N = int(N)
    variant = _variant_for(params, variant)
    beta, theta, gamma = params.rates
    n = np.arange(1, N + 1, dtype=float)
    L = _fragmentation_kernel(gamma, N)
    if variant == "standard":
        diag = -(beta * n + theta * n + gamma * (n - 1.0))
    elif variant == "modified":
        diag = -(beta * n + theta * (n - 1.0) + gamma * (n - 1.0))
    else:
        diag = -(beta * n + theta * n + gamma * n)
    L[np.arange(N), np.arange(N)] = diag
    L[np.arange(N - 1), np.arange(1, N)] = beta * n[:-1]
    return GeneratorMatrix(params, N, variant, L)


# ---------------------------------------------------------------------------
# RK4 semigroup


def _rk4_matrix(L: np.ndarray, dt: float) -> np.ndarray:
    """One classical RK4 step for y' = L y, written as the degree-4 Taylor
    polynomial of exp(dt L) (identical for linear autonomous systems)."""
    A = dt * L
    P = np.eye(L.shape[0]) + A
    term = A
    for k in (2, 3, 4):
        term = term @ A / k
        P += term
    return P


def _resolve_dt(generator: GeneratorMatrix, t: float, dt: Optional[float]) -> tuple[int, float]:
    if t < 0:
        raise ValidationError(f"time must be nonnegative, got {t}")
    limit = _RK4_STABILITY / max(generator.max_rate, 1e-12)
    if dt is None:
        dt = min(generator.stable_dt(), DEFAULT_MAX_DT)
    elif dt <= 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    elif dt > limit:
        raise StepSizeError(
            f"dt={dt:g} exceeds the RK4 stability bound {limit:g} for max rate {generator.max_rate:g}")
    if t == 0:
        return 0, 0.0
    steps = max(1, math.ceil(t / dt - 1e-12))
    return steps, t / steps


def _check_state(v: np.ndarray, positive: bool) -> None:
    if not np.all(np.isfinite(v)):
        raise StepSizeError("non-finite values in the evolved state; reduce dt")
    if positive:
        scale = float(np.abs(v).sum())
        if scale > 0 and v.min() < -1e-8 * scale:
            raise StepSizeError(f"negative mass {v.min():.3e} in the evolved measure; reduce dt")


def semigroup_path(generator: GeneratorMatrix, t: float, dt: Optional[float] = None,
                   left: Optional[np.ndarray] = None, right: Optional[np.ndarray] = None):
    """RK4 states on the uniform grid 0, h, ..., t.

    Returns ``(times, left_states, right_states)``; each state array has one
    row per grid time (``None`` when the corresponding start is not given).
    """
    steps, h = _resolve_dt(generator, t, dt)
    times = np.linspace(0.0, t, steps + 1)
    P = _rk4_matrix(generator.matrix, h) if steps else np.eye(generator.N)
    out_left = out_right = None
    if left is not None:
        out_left = np.empty((steps + 1, generator.N))
        out_left[0] = left
        for k in range(steps):
            out_left[k + 1] = out_left[k] @ P
        _check_state(out_left[-1], positive=bool(np.all(left >= 0)))
    if right is not None:
        out_right = np.empty((steps + 1, generator.N))
        out_right[0] = right
        for k in range(steps):
            out_right[k + 1] = P @ out_right[k]
        _check_state(out_right[-1], positive=False)
    return times, out_left, out_right


def _as_vector(values, N: int, name: str) -> np.ndarray:
    """Accepts a TestFunction, a callable on sizes, a scalar (constant) or a vector."""
    if hasattr(values, "as_array"):
        return values.as_array(N)
    if callable(values):
        return np.array([float(values(n)) for n in range(1, N + 1)])
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        return np.full(N, float(v))
    if v.shape != (N,):
        raise ValidationError(f"{name} must have length N={N}, got shape {v.shape}")
    return v


def evolve(mu0, generator: GeneratorMatrix, t: float, dt: Optional[float] = None) -> np.ndarray:
    """Left action: the measure ``mu0 M_t`` on sizes 1..N."""
    mu0 = _as_vector(mu0, generator.N, "mu0")
    steps, h = _resolve_dt(generator, t, dt)
    if steps == 0:
        return mu0.copy()
    P = _rk4_matrix(generator.matrix, h)
    mu = mu0.copy()
    for _ in range(steps):
        mu = mu @ P
    _check_state(mu, positive=bool(np.all(mu0 >= 0)))
    return mu


def evolve_function(f, generator: GeneratorMatrix, t: float, dt: Optional[float] = None) -> np.ndarray:
    """Right action: the function ``M_t f`` on sizes 1..N."""
    f = _as_vector(f, generator.N, "f")
    steps, h = _resolve_dt(generator, t, dt)
    if steps == 0:
        return f.copy()
    P = _rk4_matrix(generator.matrix, h)
    g = f.copy()
    for _ in range(steps):
        g = P @ g
    _check_state(g, positive=False)
    return g


def delta(n: int, N: int) -> np.ndarray:
    if not 1 <= n <= N:
        raise ValidationError(f"size {n} outside the truncation 1..{N}")
    e = np.zeros(N)
    e[n - 1] = 1.0
    return e


def growth_rate_lambda(generator: GeneratorMatrix, t_end: float, start: int = 1,
                       windows: int = 8) -> float:
    """Late-time log-slope of ``<delta_start M_t, 1>`` integrated with RK4.

    The horizon is cut into ``windows`` equal macro steps (propagated by
    repeated squaring of the RK4 step matrix) and the slope is taken over
    the last macro step.
    """
    h0 = generator.stable_dt()
    macro = t_end / windows
    doublings = max(0, math.ceil(math.log2(max(macro / h0, 1.0))))
    h = macro / 2 ** doublings
    Q = _rk4_matrix(generator.matrix, h)
    for _ in range(doublings):
        Q = Q @ Q
    mu = delta(start, generator.N)
    log_mass = [0.0]
    for _ in range(windows):
        mu = mu @ Q
        mass = mu.sum()
        if not mass > 0 or not math.isfinite(mass):
            raise StepSizeError("mass vanished or blew up in the growth-rate cross-check")
        log_mass.append(log_mass[-1] + math.log(mass))
        mu = mu / mass
    return (log_mass[-1] - log_mass[-2]) / macro


# ---------------------------------------------------------------------------
# Perron triple


@dataclass
class PerronTriple:
    lam: float
    pi: np.ndarray
    h: np.ndarray
    gap_estimate: float
    diagnostics: dict
    params: Params
    N: int
    variant: str

    @property
    def lambda_(self) -> float:
        return self.lam

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "pi": self.pi.tolist(),
            "h": self.h.tolist(),
            "gap_estimate": self.gap_estimate,
            "diagnostics": self.diagnostics,
            "params": self.params.to_dict(),
            "N": self.N,
            "variant": self.variant,
            "param_hash": param_hash({"params": self.params.to_dict(), "N": self.N,
                                      "variant": self.variant}),
        }

    def h_at(self, sizes) -> np.ndarray:
        """h on arbitrary sizes; sizes beyond the interior reuse its last value."""
        sizes = np.asarray(sizes, dtype=int)
        edge = self.diagnostics.get("interior", self.N)
        return self.h[np.clip(sizes, 1, edge) - 1]


def _collatz_wielandt(L: np.ndarray, x: np.ndarray) -> tuple[float, float]:
    r = (L @ x) / x
    return float(r.min()), float(r.max())


def _perron_vectors(L: np.ndarray, max_iter: int = 200, warmup: int = 50):
    """Right/left Perron vectors of an irreducible Metzler matrix.

    Returns (lam, pi, h, info) with sum(pi) = 1 and sum(pi*h) = 1.
    """
    N = L.shape[0]
    diag = np.diag(L)
    shift = float(np.max(np.abs(diag))) + 1.0
    scale = float(np.abs(L).sum(axis=1).max())
    eps = 64 * np.finfo(float).eps * scale

    # Warm-up: power iteration on L + cI gives a positive vector and
    # initial Collatz-Wielandt bounds.
    A = L + shift * np.eye(N)
    x = np.ones(N)
    for _ in range(warmup):
        x = A @ x
        x /= x.sum()
    lo, hi = _collatz_wielandt(L, x)
    if not (np.all(x > 0) and math.isfinite(lo) and math.isfinite(hi)):
        raise ConvergenceError("warm-up produced a non-positive iterate (reducible generator?)")

    factorisations = 0
    sigma = hi + max(hi - lo, 1.0)
    lu = lu_factor(sigma * np.eye(N) - L, check_finite=False)
    factorisations += 1
    last_gap = hi - lo
    it = 0
    for it in range(1, max_iter + 1):
        x = lu_solve(lu, x, check_finite=False)
        if not np.all(x > 0):
            # rounding near a singular shift; move sigma up and retry
            sigma = hi + max(hi - lo, 1e-6 * (1 + abs(hi)))
            lu = lu_factor(sigma * np.eye(N) - L, check_finite=False)
            factorisations += 1
            x = np.abs(x) + 1e-300
        x /= x.sum()
        lo, hi = _collatz_wielandt(L, x)
        width = hi - lo
        if width <= eps:
            break
        if width < 0.01 * last_gap and sigma - hi > 10 * width:
            sigma = hi + max(width, eps)
            lu = lu_factor(sigma * np.eye(N) - L, check_finite=False)
            factorisations += 1
            last_gap = width
    else:
        raise ConvergenceError(
            f"Perron iteration did not converge in {max_iter} steps",
            {"cw_lower": lo, "cw_upper": hi, "sigma": sigma})
    h = x
    # left vector with the same factorisation
    y = np.ones(N) / N
    prev = None
    for _ in range(max_iter):
        y = lu_solve(lu, y, trans=1, check_finite=False)
        y = np.abs(y)
        y /= y.sum()
        if prev is not None and np.abs(y - prev).sum() < 1e-15:
            break
        prev = y
    pi = y
    lam = float(pi @ (L @ h) / (pi @ h))
    h = h / (pi @ h)
    info = {"iterations": it, "factorisations": factorisations, "shift": shift,
            "cw_lower": lo, "cw_upper": hi, "sigma": sigma}
    return lam, pi, h, info


def _gap_estimate(L: np.ndarray, lam: float, pi: np.ndarray, h: np.ndarray,
                  offset: float, iterations: int = 60) -> float:
    """Spectral gap from deflated resolvent power iteration.

    With sigma = lam + offset the deflated resolvent has spectral radius
    1/|sigma - lam_2|; for a real subdominant eigenvalue this gives
    omega = lam - lam_2.
    """
    N = L.shape[0]
    lu = lu_factor((lam + offset) * np.eye(N) - L, check_finite=False)
    rng = np.random.default_rng(12345)
    x = rng.random(N) - 0.5
    x -= h * (pi @ x)
    x /= np.linalg.norm(x)
    logs = []
    for _ in range(iterations):
        y = lu_solve(lu, x, check_finite=False)
        y -= h * (pi @ y)
        norm = np.linalg.norm(y)
        if norm == 0 or not math.isfinite(norm):
            return float("nan")
        logs.append(math.log(norm))
        x = y / norm
    tail = logs[iterations // 2:]
    radius = math.exp(sum(tail) / len(tail))
    return max(1.0 / radius - offset, 0.0)


def _residuals(L: np.ndarray, lam: float, pi: np.ndarray, h: np.ndarray, interior: int) -> dict:
    left = pi @ L - lam * pi
    right = L @ h - lam * h
    return {
        "left_residual_l1": float(np.abs(left[:interior]).sum()),
        "right_residual_sup": float(np.abs(right[:interior]).max()),
        "left_residual_l1_full": float(np.abs(left).sum()),
        "right_residual_sup_full": float(np.abs(right).max()),
    }


def perron_triple(params: Params, N: int = DEFAULT_N, tol: float = DEFAULT_RESIDUAL_TOL,
                  variant: Optional[str] = None, gap: bool = True,
                  cross_check: Optional[bool] = None) -> PerronTriple:
    """Perron root and eigenvectors of the generator truncated at N.

    ``tol`` bounds the eigen-residuals on the interior {1..N - N/8}.
    ``cross_check`` compares the root with the RK4 log-growth of the mean
    cluster count (default: on for N <= 1024).
    """
    gen = build_generator(params, N, variant)
    L = gen.matrix
    started = time.perf_counter()
    lam, pi, h, info = _perron_vectors(L)
    interior = N - max(N // 8, 1)
    diag = dict(info)
    diag["interior"] = interior
    diag.update(_residuals(L, lam, pi, h, interior))
    diag["tail_mass"] = float(pi[N // 2:].sum())
    diag["pi_min"] = float(pi.min())
    omega = float("nan")
    if gap:
        offset = max(0.5, 0.1 * (params.beta + params.theta + params.gamma))
        omega = _gap_estimate(L, lam, pi, h, offset)
    if cross_check is None:
        cross_check = N <= 1024
    if cross_check:
        horizon_gap = omega if gap and math.isfinite(omega) and omega > 0 else 0.5
        t_end = min(max(48.0 / horizon_gap, 20.0), 400.0)
        try:
            slope = growth_rate_lambda(gen, t_end)
            diag["cross_check_lambda"] = slope
            diag["cross_check_diff"] = abs(slope - lam)
            diag["cross_check_ok"] = bool(abs(slope - lam) <= 10 * max(DEFAULT_LAMBDA_TOL, 1e-7))
        except StepSizeError as exc:
            diag["cross_check_error"] = str(exc)
            diag["cross_check_ok"] = False
    diag["seconds"] = time.perf_counter() - started
    if diag["left_residual_l1"] > tol or diag["right_residual_sup"] > tol:
        raise ConvergenceError(
            f"eigen-residuals above tol={tol:g}: left {diag['left_residual_l1']:.3e}, "
            f"right {diag['right_residual_sup']:.3e}", diag)
    return PerronTriple(lam, pi, h, omega, diag, params, N, gen.variant)


def malthusian_exponent(params: Params, tol: float = DEFAULT_LAMBDA_TOL, N0: int = DEFAULT_N,
                        N_cap: int = DEFAULT_N_CAP, variant: Optional[str] = None,
                        cross_check: bool = True) -> tuple[float, dict]:
    """Perron root with truncation refinement N -> 2N until two levels agree to ``tol``.

    Returns ``(lambda, diagnostics)``; ``diagnostics['converged']`` is False
    when the refinement cap was reached (censored result).
    """
    N = int(N0)
    first = perron_triple(params, N, variant=variant, gap=cross_check, cross_check=cross_check)
    history = [(N, first.lam)]
    current = first
    converged = False
    while 2 * N <= N_cap:
        N *= 2
        nxt = perron_triple(params, N, variant=variant, gap=False, cross_check=False)
        history.append((N, nxt.lam))
        diff = abs(nxt.lam - current.lam)
        current = nxt
        if diff < tol:
            converged = True
            break
    diagnostics = {
        "N_final": current.N,
        "history": history,
        "lambda_change": abs(history[-1][1] - history[-2][1]) if len(history) > 1 else float("nan"),
        "tail_mass": current.diagnostics["tail_mass"],
        "converged": converged,
        "triple": current,
    }
    if cross_check:
        diagnostics["cross_check_diff"] = first.diagnostics.get("cross_check_diff")
        diagnostics["cross_check_ok"] = first.diagnostics.get("cross_check_ok")
    return current.lam, diagnostics


def modified_lambda(params: Params, **kwargs) -> float:
    return malthusian_exponent(params, variant="modified", **kwargs)[0]


# ---------------------------------------------------------------------------
# critical curve and phase surface


def critical_bracket(beta: float, theta: float) -> tuple[float, float]:
    r = theta / beta
    lower = theta / (2 ** (1 - r) - 1)
    upper = max(2 * theta * (1 + r) / (1 - r), 1.5 * theta * (1 + r))
    return lower, upper


def critical_gamma(beta: float, theta: float, tol: float = DEFAULT_LAMBDA_TOL,
                   max_iter: int = 200) -> tuple[float, dict]:
    """The gamma at which the Malthusian exponent vanishes, by bisection.

    Only defined for 0 < theta < beta; lambda is increasing in gamma, so the
    root is unique. The truncation is fixed at the level needed for the
    hardest (smallest) gamma of the bracket.
    """
    if not (beta > 0 and theta > 0):
        raise ValidationError("critical gamma needs positive beta and theta")
    if theta >= beta:
        raise ValidationError(
            f"no critical gamma for theta >= beta (theta={theta}, beta={beta}): always subcritical")
    lower, upper = critical_bracket(beta, theta)
    _, probe = malthusian_exponent(Params(beta, theta, lower), tol=tol / 10, cross_check=False)
    N = probe["N_final"]

    def lam(g: float) -> float:
        return _perron_vectors(build_generator(Params(beta, theta, g), N).matrix)[0]

    f_lo, f_hi = lam(lower), lam(upper)
    if not (f_lo <= 0 <= f_hi):
        raise ConvergenceError("critical bracket does not straddle zero",
                               {"bracket": (lower, upper), "lambda": (f_lo, f_hi), "N": N})
    a, b = lower, upper
    mid, f_mid = a, f_lo
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mid = 0.5 * (a + b)
        f_mid = lam(mid)
        if abs(f_mid) < tol / 20 or b - a < 1e-13 * b:
            break
        if f_mid < 0:
            a = mid
        else:
            b = mid
    return mid, {"bracket": (lower, upper), "N": N, "iterations": iterations,
                 "lambda_at_root": f_mid, "probe_converged": probe["converged"]}


@dataclass
class PhaseSurface:
    rows: list
    flags: dict

    COLUMNS = ("beta", "theta", "gamma", "lambda", "N_final", "tail_mass", "converged")

    def table(self) -> list:
        return [[row[c] for c in self.COLUMNS] for row in self.rows]

    def grid(self, thetas: Sequence[float], gammas: Sequence[float]) -> np.ndarray:
        lookup = {(r["theta"], r["gamma"]): r["lambda"] for r in self.rows}
        return np.array([[lookup[(t, g)] for g in gammas] for t in thetas])


def phase_surface(beta: float, theta_grid: Sequence[float], gamma_grid: Sequence[float],
                  tol: float = DEFAULT_LAMBDA_TOL, workers: int = 1,
                  N0: int = DEFAULT_N, N_cap: int = DEFAULT_N_CAP) -> PhaseSurface:
    """Malthusian exponent on a (theta, gamma) grid at fixed beta.

    Cells are independent; failures are recorded per cell and the sweep
    continues. Flags report monotonicity along each axis.
    """
    thetas = [float(t) for t in theta_grid]
    gammas = [float(g) for g in gamma_grid]
    cells = [(t, g) for t in thetas for g in gammas]

    def solve(cell):
        t, g = cell
        row = {"beta": float(beta), "theta": t, "gamma": g}
        try:
            lam, d = malthusian_exponent(Params(beta, t, g), tol=tol, N0=N0, N_cap=N_cap,
                                         cross_check=False)
            row.update({"lambda": lam, "N_final": d["N_final"], "tail_mass": d["tail_mass"],
                        "converged": d["converged"]})
        except (ConvergenceError, ValidationError, ResourceCapError) as exc:
            row.update({"lambda": float("nan"), "N_final": 0, "tail_mass": float("nan"),
                        "converged": False, "error": str(exc)})
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(solve, cells))
    else:
        rows = [solve(c) for c in cells]
    surface = PhaseSurface(rows, {})
    grid = surface.grid(thetas, gammas)
    slack = 10 * tol
    theta_ok = bool(np.all(np.diff(grid, axis=0) <= slack)) if len(thetas) > 1 else True
    gamma_ok = bool(np.all(np.diff(grid, axis=1) >= -slack)) if len(gammas) > 1 else True
    surface.flags = {
        "nonincreasing_in_theta": theta_ok,
        "nondecreasing_in_gamma": gamma_ok,
        "all_converged": all(r["converged"] for r in rows),
    }
    return surface


# ---------------------------------------------------------------------------
# Lyapunov witness


def geometric_split_sum(q: float) -> float:
    """sum_{j>=1} q^(j-1) / (j(j+1)) in closed form."""
    if q == 0:
        return 0.5
    return (1.0 + (1.0 / q - 1.0) * math.log1p(-q)) / q


def lyapunov_constant(q: float, A: float, B: float) -> float:
    """Limit of sum_j psi(j)/(j(j+1)) over psi(n) for psi = A - (A-B) q^(n-1)."""
    return 1.0 - (1.0 - B / A) * geometric_split_sum(q)


@dataclass
class LyapunovWitness:
    psi: np.ndarray
    A: float
    B: float
    q: float
    a: float
    b: float
    zeta: float
    xi: float
    p: float
    checks: dict = field(default_factory=dict)

    @property
    def verified(self) -> bool:
        return all(self.checks.values())


def _apply_untruncated(params: Params, N: int, values: Callable[[np.ndarray], np.ndarray],
                       variant: Optional[str] = None) -> np.ndarray:
    """L f on 1..N using f on 1..N+1, so row N keeps its growth term."""
    gen = build_generator(params, N + 1, variant)
    sizes = np.arange(1, N + 2, dtype=float)
    return (gen.matrix @ values(sizes))[:N]


def lyapunov_witness(params: Params, N: int = DEFAULT_N, p: float = 1.0,
                     q: Optional[float] = None) -> LyapunovWitness:
    """Bounded positive psi with b psi <= L psi <= xi psi and L[x^p] <= a[x^p] + zeta psi.

    psi(n) = A - (A - B) q^(n-1) with the limiting fragmentation ratio of psi
    matched to theta/gamma. Constants are the tightest ones found on {1..N}.
    """
    beta, theta, gamma = params.rates
    if p < 1:
        raise ValidationError("the witness is built for monomials x^p with p >= 1")
    if gamma <= 0 or theta <= 0:
        raise ConvergenceError("no admissible (A, B, q): need theta > 0 and gamma > 0",
                               {"theta": theta, "gamma": gamma})
    ratio = theta / gamma
    if math.isclose(theta, gamma, rel_tol=0, abs_tol=1e-15):
        A = B = 1.0
        q = 0.5 if q is None else q
    elif gamma > theta:
        target = 1.0 - ratio
        if q is None:
            q = 0.5
            while geometric_split_sum(q) <= target + 0.5 * (1 - target) * 0.1 and q < 1 - 1e-12:
                q = 1.0 - (1.0 - q) / 2
        S = geometric_split_sum(q)
        if S <= target:
            raise ConvergenceError("q too small for the gamma > theta case",
                                   {"q": q, "S": S, "target": target})
        A = 1.0
        B = A * (1.0 - target / S)
    else:
        q = 0.5 if q is None else q
        S = geometric_split_sum(q)
        B = 1.0
        A = B / (1.0 + (ratio - 1.0) / S)
    if not (0 < A <= 1 and 0 < B <= 1 and 0 < q < 1):
        raise ConvergenceError("constraint solve left the admissible region", {"A": A, "B": B, "q": q})

    def psi_fn(n):
        return A - (A - B) * q ** (n - 1.0)

    sizes = np.arange(1, N + 1, dtype=float)
    psi = psi_fn(sizes)
    Lpsi = _apply_untruncated(params, N, psi_fn)
    ratio_psi = Lpsi / psi
    b = float(ratio_psi.min())
    xi = float(ratio_psi.max())
    LV = _apply_untruncated(params, N, lambda n: n ** p)
    V = sizes ** p
    cap = 2 ** (p - 1) * p * beta - theta
    a = min(cap, b) - max(1.0, 0.1 * abs(min(cap, b)))
    zeta = max(float(((LV - a * V) / psi).max()), 1e-12)
    fuzz = 1e-9 * (1 + np.abs(Lpsi))
    checks = {
        "psi_bounds": bool(0 < psi.min() and psi.max() <= 1 + 1e-15),
        "lower": bool(np.all(Lpsi >= b * psi - fuzz)),
        "upper": bool(np.all(Lpsi <= xi * psi + fuzz)),
        "drift": bool(np.all(LV <= a * V + zeta * psi + 1e-9 * (1 + np.abs(LV)))),
        "a_below_b": bool(a < b),
        "fragmentation_ratio": bool(abs(lyapunov_constant(q, A, B) - ratio) < 1e-10),
    }
    return LyapunovWitness(psi, A, B, q, a, b, zeta, xi, p, checks)


# ---------------------------------------------------------------------------
# second moments, inactive counts, size bias


def _pair_gain(g: np.ndarray, gamma: float) -> np.ndarray:
    """Q(n) = sum_{j<n} gamma n/(j(j+1)) g(j) g(n-j) for n = 1..N."""
    N = g.shape[0]
    n = np.arange(1, N + 1, dtype=float)
    w = 1.0 / (n * (n + 1.0))
    conv = np.convolve(w * g, g)
    out = np.zeros(N)
    out[1:] = gamma * n[1:] * conv[:N - 1]
    return out


def _trapezoid_with_error(values: np.ndarray, h: float) -> tuple[float, float]:
    fine = h * (values.sum() - 0.5 * (values[0] + values[-1]))
    coarse_vals = values[::2]
    coarse = 2 * h * (coarse_vals.sum() - 0.5 * (coarse_vals[0] + coarse_vals[-1]))
    return float(fine), float(abs(fine - coarse) / 3.0)


def _even_steps(generator: GeneratorMatrix, t: float, dt: Optional[float]) -> float:
    steps, _ = _resolve_dt(generator, t, dt)
    steps = max(2, steps + (steps % 2))
    return t / steps


def second_moment(f, t: float, x: int, generator: GeneratorMatrix, dt: Optional[float] = None,
                  tol: float = 1e-6, max_refine: int = 4) -> tuple[float, float]:
    """E_x[<X_t, f>^2] from the semigroup and the binary fragmentation kernel.

    Returns ``(value, quadrature_error_estimate)``. The time integral uses the
    trapezoid rule on the RK4 grid; the step is halved until the Richardson
    estimate falls below ``tol`` (relative to max(1, |value|)).
    """
    N = generator.N
    fv = _as_vector(f, N, "f")
    if t < 0:
        raise ValidationError("time must be nonnegative")
    if t == 0:
        return float(fv[x - 1] ** 2), 0.0
    gamma = generator.params.gamma
    h = _even_steps(generator, t, dt)
    for _ in range(max_refine + 1):
        times, mus, gs = semigroup_path(generator, t, h, left=delta(x, N), right=fv)
        K = len(times) - 1
        integrand = np.array([mus[k] @ _pair_gain(gs[K - k], gamma) for k in range(K + 1)])
        integral, err = _trapezoid_with_error(integrand, times[1] - times[0])
        value = float(mus[K] @ (fv * fv)) + 2.0 * integral
        err *= 2.0
        if err <= tol * max(1.0, abs(value)):
            return value, err
        h /= 2
    raise QuadratureError(f"quadrature error {err:.3e} above tol {tol:g} after refinement")


def mean_inactive_count(generator: GeneratorMatrix, t: float, dt: Optional[float] = None,
                        x: int = 1, tol: float = 1e-6, max_refine: int = 4) -> tuple[float, float]:
    """E_x|Y_t| = int_0^t M_s(isolation rate)(x) ds, returned with its error estimate."""
    if t < 0:
        raise ValidationError("time must be nonnegative")
    if t == 0:
        return 0.0, 0.0
    iso = generator.isolation_rates
    h = _even_steps(generator, t, dt)
    for _ in range(max_refine + 1):
        times, mus, _ = semigroup_path(generator, t, h, left=delta(x, generator.N))
        integral, err = _trapezoid_with_error(mus @ iso, times[1] - times[0])
        if err <= tol * max(1.0, abs(integral)):
            return integral, err
        h /= 2
    raise QuadratureError(f"quadrature error {err:.3e} above tol {tol:g} after refinement")


def mean_active_count(generator: GeneratorMatrix, t: float, x: int = 1,
                      dt: Optional[float] = None) -> float:
    return float(evolve(delta(x, generator.N), generator, t, dt).sum())


def size_biased(pi) -> np.ndarray:
    """n pi(n) / sum_j j pi(j) on sizes 1..len(pi)."""
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 1 or pi.size == 0:
        raise ValidationError("pi must be a non-empty vector")
    if np.any(pi < 0):
        raise ValidationError("pi must be nonnegative")
    weights = np.arange(1, pi.size + 1) * pi
    total = weights.sum()
    if total <= 0:
        raise ValidationError("pi is the zero vector")
    return weights / total
