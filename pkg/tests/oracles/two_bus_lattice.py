"""Brute-force optimum of the 2-bus fixture by nested 50^4 lattice search.

Straight-line numpy, sharing nothing with the package. Lattice variables are
(P_g, v_1, v_2, delta_2); Q_g is whatever bus 1 needs. A point is kept when
both buses balance to within the mismatch one lattice step can cause and every
limit holds; the next, finer lattice is centred on the best-balanced point among those
that could still be optimal. Four levels. Run once; the printed numbers are pinned in test_baseline.py.
"""

import numpy as np

N = 50
base = 100.0
pd2, qd2, bs2 = 60 / base, 20 / base, 5 / base
y = 1 / (0.01 + 0.1j)
bc = 0.02
rate = 150 / base
qmin, qmax = -1.0, 1.0
vmin, vmax = 0.9, 1.1
amax = np.deg2rad(30)


def cost(pg):
    mw = pg * base
    return 0.01 * mw**2 + 10 * mw + 5


def search(lo, hi):
    lo, hi = np.asarray(lo), np.asarray(hi)
    axes = [np.linspace(a, b, N) for a, b in zip(lo, hi)]
    steps = np.array([ax[1] - ax[0] for ax in axes])
    PG, V1, V2, D2 = np.meshgrid(*axes, indexing="ij", sparse=True)
    e1 = V1 + 0j
    e2 = V2 * np.exp(1j * D2)
    s_f = e1 * np.conj((y + 0.5j * bc) * e1 - y * e2)
    s_t = e2 * np.conj((y + 0.5j * bc) * e2 - y * e1)
    # bus 2 has no generation; its shunt injects +j bs2 v^2
    bal2 = -(pd2 + 1j * qd2) + 1j * bs2 * V2**2 - s_t
    bal1 = PG - s_f.real
    # worst mismatch half a step can hide: |dS/dv|, |dS/ddelta| <= vmax^2 |y| + bc
    tol = 0.5 * (steps[0] + (vmax**2 * abs(y) + bc) * (steps[1] + steps[2] + steps[3]))
    ok = ((np.abs(bal1) <= tol) & (np.abs(bal2) <= tol)
          & (s_f.imag >= qmin) & (s_f.imag <= qmax)
          & (np.abs(s_f) <= rate) & (np.abs(s_t) <= rate)
          & (np.abs(D2) <= amax))
    c = np.where(ok, cost(PG), np.inf)
    # a kept point can undercut the optimum by at most the cost of tol extra
    # power, so among points within that slack take the best-balanced one
    slope = 0.02 * hi[0] * base + 10
    cheap = c <= c.min() + slope * base * (tol + steps[0])
    mismatch = np.maximum(np.abs(bal1), np.abs(bal2))
    k = np.unravel_index(np.argmin(np.where(cheap, mismatch, np.inf)), c.shape)
    return np.array([ax[i] for ax, i in zip(axes, k)]), steps, float(c.min()), float(mismatch[k]), tol


lo = np.array([pd2, vmin, vmin, -amax])
hi = np.array([pd2 + 0.2, vmax, vmax, 0.0])
for level in range(4):
    centre, steps, c, mis, tol = search(lo, hi)
    print(f"level {level}: min cost {c!r}, centre {centre.tolist()} "
          f"(mismatch {mis:.2e}, tol {tol:.2e})")
    lo = np.maximum(centre - 5 * steps, lo)
    hi = np.minimum(centre + 5 * steps, hi)
