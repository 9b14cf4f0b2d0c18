"""Small statistical helpers shared by the estimators and coupling checks."""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special, stats


def bootstrap_ci(groups: np.ndarray, statistic: Callable[[np.ndarray], float],
                 n_boot: int = 400, level: float = 0.99,
                 rng: Optional[np.random.Generator] = None) -> tuple[float, float]:
    """Percentile bootstrap over the first axis of ``groups`` (one row per replica)."""
    rng = np.random.default_rng(0) if rng is None else rng
    m = len(groups)
    if m == 0:
        return (math.nan, math.nan)
    values = np.empty(n_boot)
    for b in range(n_boot):
        values[b] = statistic(groups[rng.integers(0, m, m)])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return (float(lo), float(hi))


def grouped_jackknife(n_items: int, estimate: Callable[[np.ndarray], float],
                      groups: int = 50) -> tuple[float, float]:
    """Delete-a-group jackknife; ``estimate`` receives a boolean keep mask."""
    if n_items < 2:
        raise ValueError("the jackknife needs at least two replicas")
    g = min(groups, n_items)
    labels = np.arange(n_items) % g
    full = estimate(np.ones(n_items, dtype=bool))
    leave = np.array([estimate(labels != k) for k in range(g)])
    se = math.sqrt((g - 1) / g * float(np.sum((leave - leave.mean()) ** 2)))
    return float(full), se


def chi_square_gof(counts: Sequence[float], probs: Sequence[float],
                   min_expected: float = 5.0) -> tuple[float, int, float]:
    """Pearson goodness of fit; adjacent sparse cells are pooled left to right."""
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    total = counts.sum()
    expected = probs / probs.sum() * total
    obs_cells, exp_cells = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(counts, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_cells.append(acc_o)
            exp_cells.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if exp_cells:
            obs_cells[-1] += acc_o
            exp_cells[-1] += acc_e
        else:
            obs_cells.append(acc_o)
            exp_cells.append(acc_e)
    o = np.array(obs_cells)
    e = np.array(exp_cells)
    dof = len(o) - 1
    if dof < 1:
        return 0.0, 0, 1.0
    stat = float(np.sum((o - e) ** 2 / e))
    return stat, dof, float(stats.chi2.sf(stat, dof))


def two_sample_chi_square(x: np.ndarray, y: np.ndarray, min_expected: float = 5.0
                          ) -> tuple[float, int, float]:
    """Homogeneity test for two samples of (possibly multivariate) discrete values.

    Rows are treated as categories; categories are sorted and pooled until
    each pooled cell has the required expected count in both samples.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim == 1:
        x = x[:, None]
        y = y[:, None]
    keys, inverse = np.unique(np.vstack([x, y]), axis=0, return_inverse=True)
    inverse = inverse.ravel()
    cx = np.bincount(inverse[:len(x)], minlength=len(keys)).astype(float)
    cy = np.bincount(inverse[len(x):], minlength=len(keys)).astype(float)
    fx = len(x) / (len(x) + len(y))
    fy = 1.0 - fx
    cells = []
    ax = ay = 0.0
    for a, b in zip(cx, cy):
        ax += a
        ay += b
        if (ax + ay) * min(fx, fy) >= min_expected:
            cells.append((ax, ay))
            ax = ay = 0.0
    if ax + ay > 0:
        if cells:
            cells[-1] = (cells[-1][0] + ax, cells[-1][1] + ay)
        else:
            cells.append((ax, ay))
    if len(cells) < 2:
        return 0.0, 0, 1.0
    table = np.array(cells).T
    stat, p, dof, _ = stats.chi2_contingency(table, correction=False)
    return float(stat), int(dof), float(p)


def _dominance_counts(points: np.ndarray, origins: np.ndarray) -> np.ndarray:
    """#{points with x < x0 and y < y0} for every origin (x0, y0)."""
    ys = np.sort(points[:, 1])
    n = len(points)
    p_rank = np.searchsorted(ys, points[:, 1], "left") + 1
    o_rank = np.searchsorted(ys, origins[:, 1], "left")  # points with y < y0
    p_order = np.argsort(points[:, 0], kind="stable")
    o_order = np.argsort(origins[:, 0], kind="stable")
    px = points[p_order, 0].tolist()
    pr = p_rank[p_order].tolist()
    tree = [0] * (n + 1)
    out = np.zeros(len(origins), dtype=np.int64)
    j = 0
    for k in o_order.tolist():
        x0 = origins[k, 0]
        while j < n and px[j] < x0:
            i = pr[j]
            while i <= n:
                tree[i] += 1
                i += i & -i
            j += 1
        i = int(o_rank[k])
        s = 0
        while i > 0:
            s += tree[i]
            i -= i & -i
        out[k] = s
    return out


def _quadrant_fractions(points: np.ndarray, origins: np.ndarray) -> np.ndarray:
    n = len(points)
    xs = np.sort(points[:, 0])
    ys = np.sort(points[:, 1])
    x_lo = np.searchsorted(xs, origins[:, 0], "left")
    x_hi = n - np.searchsorted(xs, origins[:, 0], "right")
    y_lo = np.searchsorted(ys, origins[:, 1], "left")
    ll = _dominance_counts(points, origins)
    lu = x_lo - ll
    rl = y_lo - ll
    ru = x_hi - rl
    return np.stack([ll, lu, rl, ru], axis=1) / n


def ks_2d(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Two-sample two-dimensional Kolmogorov-Smirnov test (Fasano-Franceschini).

    The statistic averages the maximal quadrant discrepancy over origins
    taken from each sample; the p-value uses the Press et al. approximation.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two points")
    d1 = float(np.max(np.abs(_quadrant_fractions(a, a) - _quadrant_fractions(b, a))))
    d2 = float(np.max(np.abs(_quadrant_fractions(a, b) - _quadrant_fractions(b, b))))
    d = 0.5 * (d1 + d2)
    r1 = np.corrcoef(a[:, 0], a[:, 1])[0, 1]
    r2 = np.corrcoef(b[:, 0], b[:, 1])[0, 1]
    rr = math.sqrt(max(0.0, 1.0 - 0.5 * (r1 * r1 + r2 * r2)))
    ne = len(a) * len(b) / (len(a) + len(b))
    lam = math.sqrt(ne) * d / (1.0 + rr * (0.25 - 0.75 / math.sqrt(ne)))
    return d, float(special.kolmogorov(lam))


def ks_critical_value(n1: int, n2: int, alpha: float) -> float:
    """Asymptotic two-sample KS critical value for the sup distance."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c * math.sqrt((n1 + n2) / (n1 * n2))
