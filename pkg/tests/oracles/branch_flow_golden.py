"""Branch-flow golden pair at 50 significant digits with mpmath.

Single branch, T = 1, no charging, y = 1/(0.01 + 0.1j), V_i = 1 at angle 0,
V_j = 0.98 at angle -0.05 rad. Run once; the printed values are pinned in
test_grid.py.
"""

import mpmath as mp

mp.mp.dps = 50
y = 1 / mp.mpc("0.01", "0.1")
vi = mp.mpc(1, 0)
vj = mp.mpf("0.98") * mp.expjpi(mp.mpf("-0.05") / mp.pi)
s_fwd = mp.conj(y) * abs(vi) ** 2 - mp.conj(y) * vi * mp.conj(vj)
s_rev = mp.conj(y) * abs(vj) ** 2 - mp.conj(y) * vj * mp.conj(vi)
for name, s in (("s_fwd", s_fwd), ("s_rev", s_rev)):
    print(name, mp.nstr(s.real, 20), mp.nstr(s.imag, 20))
