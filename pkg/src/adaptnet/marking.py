"""Classical marking strategies and the oracles used to certify the networks."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class MarkedSet:
    """Element ids selected for refinement, in selection order."""

    indices: tuple
    achieved_fraction: float

    def __contains__(self, i):
        return i in set(self.indices)

    def __len__(self):
        return len(self.indices)


def _values(estimates):
    v = getattr(estimates, "values", estimates)
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValidationError("estimates must be a flat vector")
    if np.any(v < 0):
        raise ValidationError("estimates must be nonnegative")
    return v


def doerfler_mark(estimates, theta):
    """Minimal set with sum >= theta * total; ties broken by earliest index.

    Sorting descending with stable index tie-break and taking the shortest
    prefix is provably optimal for this objective.
    """
    x = _values(estimates)
    if not 0 < theta <= 1:
        raise ValidationError("theta must be in (0, 1]")
    order = np.lexsort((np.arange(len(x)), -x))
    csum = np.cumsum(x[order])
    total = csum[-1] if len(csum) else 0.0
    if total <= 0.0:
        return MarkedSet(indices=(), achieved_fraction=0.0)
    k = int(np.searchsorted(csum, theta * total)) + 1
    k = min(k, len(x))
    # never include zero entries (theta = 1 with zero tail)
    while k > 0 and x[order[k - 1]] == 0.0:
        k -= 1
    chosen = order[:k]
    return MarkedSet(
        indices=tuple(int(i) for i in chosen),
        achieved_fraction=float(csum[k - 1] / total) if k else 0.0,
    )


def maximum_strategy_mark(estimates, theta):
    """All entries strictly above (1 - theta) times the maximum."""
    x = _values(estimates)
    if len(x) == 0 or x.max() == 0.0:
        return MarkedSet(indices=(), achieved_fraction=0.0)
    thresh = (1.0 - theta) * x.max()
    chosen = np.nonzero(x > thresh)[0]
    total = float(x.sum())
    return MarkedSet(
        indices=tuple(int(i) for i in chosen),
        achieved_fraction=float(x[chosen].sum() / total) if total else 0.0,
    )


# ---------------------------------------------------------------------------
# perturbed-Doerfler oracle; bit-exact replica of the MARK network arithmetic


def mark_depth(max_value, eps, n):
    """Binary-search depth guaranteeing band width <= eps / n."""
    if eps <= 0:
        raise ValidationError("eps must be positive")
    if max_value <= 0:
        return 1
    k = math.ceil(math.log2(max_value) + math.log2(n / eps)) + 1
    return max(1, k)


def binary_search_pivot(x, theta, k):
    """Float-faithful run of the pivot search; returns (pivot, halfwidth).

    Mirrors the network: sequential left-to-right sums, threshold comparison
    against theta times the sequentially accumulated total, pivot +- step.
    The returned halfwidth is the step used in the last round.
    """
    mx = 0.0
    for v in x:
        mx = max(mx, v)
    y = mx / 2.0
    z = mx / 4.0
    for _ in range(k):
        s_y = 0.0
        s_tot = 0.0
        for v in x:
            if v >= y:
                s_y = s_y + v
            s_tot = s_tot + v
        if s_y >= theta * s_tot:
            y = y + z
        else:
            y = y - z
        z = z / 2.0
    return y, 2.0 * z


def perturbed_doerfler_oracle(estimates, theta, eps, k=None):
    """Analytic replica of the MARK network's band rounding.

    Returns (MarkedSet, perturbed_values).  With eps = 0 this degenerates to
    exact Doerfler marking and the values are returned unchanged.
    """
    x = _values(estimates)
    if not 0 < theta <= 1:
        raise ValidationError("theta must be in (0, 1]")
    if eps == 0:
        ms = doerfler_mark(x, theta)
        return ms, x.copy()
    n = len(x)
    if n == 0:
        return MarkedSet(indices=(), achieved_fraction=0.0), x.copy()
    if k is None:
        k = mark_depth(float(x.max()), eps, n)

    pivot, z = binary_search_pivot(x, theta, k)
    hi = pivot + 2.0 * z
    lo = max(pivot - 2.0 * z, 0.0)

    xt = x.copy()
    band = (x >= lo) & (x <= hi)
    xt[band] = hi

    marked = []
    above = xt > hi
    s_above = 0.0
    s_tot = 0.0
    for i in range(n):
        if above[i]:
            s_above = s_above + xt[i]
        s_tot = s_tot + xt[i]
    target = theta * s_tot
    prefix = 0.0
    for i in range(n):
        if above[i]:
            marked.append(i)
        elif band[i] and s_above + prefix < target:
            marked.append(i)
            prefix = prefix + hi
    marked.sort(key=lambda i: (-xt[i], i))
    ssum = float(xt[marked].sum()) if marked else 0.0
    frac = ssum / s_tot if s_tot > 0 else 0.0
    return MarkedSet(indices=tuple(marked), achieved_fraction=frac), xt
