"""Independent reference computations used only by the tests.

These are deliberately written in a different style from the package code
(plain Python loops, mpmath) so that agreement is meaningful.
"""

import mpmath as mp

mp.mp.dps = 40


def h2(x):
    x = mp.mpf(x)
    if x in (0, 1):
        return mp.mpf(0)
    return -x * mp.log(x, 2) - (1 - x) * mp.log(1 - x, 2)


def toeplitz_loops(n, l, seed, key):
    """Build the matrix row by row from T[i][j] = seed[j - i + l - 1]."""
    rows = [[seed[j - i + l - 1] for j in range(n)] for i in range(l)]
    return [sum(r[j] * key[j] for j in range(n)) % 2 for r in rows]


def cascade_first_pass_flip(a, b, k):
    """Single-error walk of cascade's first pass: returns the flipped index or None."""
    n = len(a)
    for start in range(0, n, k):
        lo, hi = start, min(n, start + k)
        if sum(a[lo:hi]) % 2 == sum(b[lo:hi]) % 2:
            continue
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if sum(a[lo:mid]) % 2 != sum(b[lo:mid]) % 2:
                hi = mid
            else:
                lo = mid
        return lo
    return None


def decoy_key_length(c, mu1, mu2, p1, eps_sec, eps_corr, lam):
    """One-decoy finite-key length evaluated in 40-digit arithmetic.

    ``c`` maps names nz1, nz2, nx1, nx2, mx1, mx2, mz1, mz2 to counts.
    Returns (s0, s1, phi, l) with phi clamped to 0.5 and l floored and clamped.
    """
    mu1, mu2, p1 = mp.mpf(mu1), mp.mpf(mu2), mp.mpf(p1)
    p2 = 1 - p1
    ln = mp.log(mp.mpf(19) / eps_sec)
    pk = {1: (mu1, p1), 2: (mu2, p2)}
    tau = lambda n: sum(p * mp.e ** (-mu) * mu**n / mp.factorial(n) for mu, p in pk.values())

    def hoeff(total):
        return mp.sqrt(total / 2 * ln)

    def plus(k, cnt, tot):
        mu, p = pk[k]
        return mp.e**mu / p * (cnt + hoeff(tot))

    def minus(k, cnt, tot):
        mu, p = pk[k]
        return mp.e**mu / p * (cnt - hoeff(tot))

    def bounds(n1, n2, m2, ntot, mtot):
        s0u = 2 * (tau(0) * plus(2, m2, mtot) + hoeff(ntot))
        s0l = tau(0) / (mu1 - mu2) * (mu1 * minus(2, n2, ntot) - mu2 * plus(1, n1, ntot))
        s1l = tau(1) * mu1 / (mu2 * (mu1 - mu2)) * (
            minus(2, n2, ntot) - (mu2 / mu1) ** 2 * plus(1, n1, ntot)
            - (mu1**2 - mu2**2) / mu1**2 * s0u / tau(0)
        )
        return max(s0l, 0), s1l

    nz = c["nz1"] + c["nz2"]
    nx = c["nx1"] + c["nx2"]
    mx = c["mx1"] + c["mx2"]
    mz = c["mz1"] + c["mz2"]
    s0, s1 = bounds(c["nz1"], c["nz2"], c["mz2"], nz, mz)
    _, sx1 = bounds(c["nx1"], c["nx2"], c["mx2"], nx, mx)
    if s1 <= 0 or sx1 <= 0:
        return s0, s1, mp.mpf("0.5"), 0
    v = tau(1) / (mu1 - mu2) * (plus(1, c["mx1"], mx) - minus(2, c["mx2"], mx))
    v = max(v, 0)
    r = min(v / sx1, mp.mpf("0.5"))
    if r <= 0:
        g = 0
    else:
        a = (s1 + sx1) / (s1 * sx1 * (1 - r) * r) * mp.mpf(19) ** 2 / eps_sec**2
        g = mp.sqrt((s1 + sx1) * (1 - r) * r / (s1 * sx1 * mp.log(2)) * mp.log(a, 2))
    phi = min(max(r + g, 0), mp.mpf("0.5"))
    raw = s0 + s1 * (1 - h2(phi)) - lam - 6 * mp.log(mp.mpf(19) / eps_sec, 2) - mp.log(2 / mp.mpf(eps_corr), 2)
    return s0, s1, phi, max(0, int(mp.floor(raw)))
