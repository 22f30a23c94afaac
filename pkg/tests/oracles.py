"""Independent reference computations used by the tests."""

from fractions import Fraction
import math


def brute_ranks(values):
    """Average ranks by explicit counting (O(n^2))."""
    out = []
    for x in values:
        below = sum(1 for y in values if y < x)
        equal = sum(1 for y in values if y == x)
        out.append(Fraction(2 * below + equal + 1, 2))
    return out


def brute_spearman(truth, pred):
    """Pearson correlation of brute-force ranks, in exact arithmetic up to one sqrt."""
    rt, rp = brute_ranks(truth), brute_ranks(pred)
    n = len(rt)
    mt, mp = sum(rt) / n, sum(rp) / n
    cov = sum((a - mt) * (b - mp) for a, b in zip(rt, rp))
    vt = sum((a - mt) ** 2 for a in rt)
    vp = sum((b - mp) ** 2 for b in rp)
    if vt == vp:
        return float(cov / vt)
    return float(cov) / math.sqrt(float(vt) * float(vp))


def direct_r_l2(truth, pred, s_min, s_max):
    total = 0.0
    for s, s_hat in zip(truth, pred):
        total += (abs(s - s_hat) / (s_max - s_min)) ** 2
    return total / len(truth)
