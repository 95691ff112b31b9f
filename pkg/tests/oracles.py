"""Independent reference implementations used as test oracles.

Everything here is deliberately written with python scalar loops and the
standard library so it shares no code path with the vectorized package
internals it is used to check.
"""

import cmath
import math


def sinr_loop(h, a, w, u, sigma2):
    """SINR of user u from scalar complex arithmetic."""
    n_u = len(w[0])
    n_t = len(a)
    n_rf = len(a[0])

    def h_a_w(j):
        acc = 0j
        for n in range(n_t):
            hn = complex(h[u][n]).conjugate()
            for m in range(n_rf):
                acc += hn * complex(a[n][m]) * complex(w[m][j])
        return acc

    signal = abs(h_a_w(u)) ** 2
    interference = sum(abs(h_a_w(j)) ** 2 for j in range(n_u) if j != u)
    return signal / (interference + sigma2)


def sum_rate_loop(h, a, w, sigma2):
    """Sum of log2(1 + SINR_u) from scalar loops."""
    n_u = len(h)
    return sum(math.log2(1.0 + sinr_loop(h, a, w, u, sigma2)) for u in range(n_u))


def water_level_bisect(gains, p_max, sigma2, iters=200):
    """Water-filling by bisection on the water level."""
    lo = 0.0
    hi = p_max + max(sigma2 / g for g in gains)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        total = sum(max(0.0, mid - sigma2 / g) for g in gains)
        if total > p_max:
            hi = mid
        else:
            lo = mid
    mu = 0.5 * (lo + hi)
    return [max(0.0, mu - sigma2 / g) for g in gains]
