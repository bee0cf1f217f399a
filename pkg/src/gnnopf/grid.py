"""Dense grid arrays, AC branch flows, power balance, cost and the graph shift operator.

Everything here is plain numpy and accepts arrays with arbitrary leading batch
dimensions: a state is ``(..., N, 4)`` with columns ``[p, q, v, delta]`` and a
demand or generation matrix is ``(..., N, 2)`` with columns ``[Re, Im]``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .case_io import BusType, NetworkCase


class GridModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GridModel:
    name: str
    base_mva: float
    bus_ids: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    shunt: np.ndarray  # complex Y^s per bus
    reference_bus: int
    # generators, one row per bus (zeros where there is no generator)
    has_gen: np.ndarray
    gen_bus: np.ndarray  # bus index of each in-service generator
    sg_min: np.ndarray  # (N, 2) [p_min, q_min]
    sg_max: np.ndarray  # (N, 2) [p_max, q_max]
    cost_coeffs: np.ndarray  # (N, D) highest degree first, zero rows off generators
    # branches
    f: np.ndarray
    t: np.ndarray
    y: np.ndarray  # series admittance
    yc_from: np.ndarray  # charging admittance at the from end
    yc_to: np.ndarray
    tap: np.ndarray  # complex ratio
    rate_max: np.ndarray  # nan where unconstrained
    ang_min: np.ndarray  # nan where unconstrained
    ang_max: np.ndarray
    # graph
    gso: np.ndarray
    alpha: float
    beta: float
    normalize_gso: bool
    spectral_radius: float  # of the unnormalized operator
    ref_demand: np.ndarray  # (N, 2) case reference demand

    @property
    def n_buses(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branches(self) -> int:
        return len(self.f)

    @property
    def rate_mask(self) -> np.ndarray:
        return ~np.isnan(self.rate_max)

    @property
    def angle_mask(self) -> np.ndarray:
        return ~(np.isnan(self.ang_min) & np.isnan(self.ang_max))

    def fingerprint(self) -> dict:
        h = hashlib.sha256(np.ascontiguousarray(self.gso).tobytes()).hexdigest()[:16]
        return {"case_name": self.name, "alpha": self.alpha, "beta": self.beta,
                "normalize": self.normalize_gso, "gso_sha256": h}


def combined_admittances(case: NetworkCase) -> dict[tuple[int, int], complex]:
    """Series admittance summed over parallel branches, keyed by sorted bus-index pair."""
    idx = case.bus_index()
    out: dict[tuple[int, int], complex] = {}
    for br in case.branches:
        i, j = idx[br.from_bus], idx[br.to_bus]
        key = (min(i, j), max(i, j))
        out[key] = out.get(key, 0j) + br.series_admittance
    return out


def default_alpha(case: NetworkCase) -> float:
    """Scale that puts the median edge weight at 1/2."""
    mags = np.array([abs(y) ** 2 for y in combined_admittances(case).values()])
    return math.log(2.0) * float(np.median(mags))


def spectral_radius(a: np.ndarray, tol: float = 1e-9, max_iter: int = 100_000) -> float:
    """Largest eigenvalue magnitude of a symmetric matrix by power iteration."""
    n = a.shape[0]
    x = np.ones(n) / math.sqrt(n)
    rho = 0.0
    for _ in range(max_iter):
        ax = a @ x
        new = float(np.linalg.norm(ax))
        if new == 0.0:
            return 0.0
        x = ax / new
        if abs(new - rho) <= tol * new:
            return new
        rho = new
    return rho


def build_gso(case: NetworkCase, alpha: float, beta: float, normalize: bool = True):
    n = len(case.buses)
    a = np.zeros((n, n))
    for (i, j), y in combined_admittances(case).items():
        w = math.exp(-alpha / abs(y) ** 2)
        if w > beta:
            a[i, j] = a[j, i] = w
    if not a.any():
        raise GridModelError(f"no edge survives the threshold beta={beta} (alpha={alpha})")
    rho = spectral_radius(a)
    if normalize:
        a = a / rho
    return a, rho


def build_grid_model(case: NetworkCase, alpha: float | None = None, beta: float = 0.01,
                     normalize_gso: bool = True) -> GridModel:
    """Turn a parsed case into evaluation-ready arrays.

    ``alpha=None`` picks :func:`default_alpha`. Raises :class:`GridModelError` for
    more than one generator on a bus, a missing or repeated reference bus, or a
    graph with no surviving edges.
    """
    if alpha is None:
        alpha = default_alpha(case)
    if alpha < 0:
        raise GridModelError("alpha must be non-negative")
    if not (0 <= beta < 1):
        raise GridModelError("beta must lie in [0, 1)")
    idx = case.bus_index()
    n = len(case.buses)

    refs = [i for i, b in enumerate(case.buses) if b.bus_type == BusType.REFERENCE]
    if len(refs) != 1:
        raise GridModelError(f"expected exactly one reference bus, found {len(refs)}")

    has_gen = np.zeros(n, dtype=bool)
    sg_min = np.zeros((n, 2))
    sg_max = np.zeros((n, 2))
    gen_bus = []
    degree = max((len(g.cost.coefficients) for g in case.generators if g.cost is not None), default=1)
    cost = np.zeros((n, degree))
    for g in case.generators:
        i = idx[g.bus_id]
        if has_gen[i]:
            raise GridModelError(f"bus {g.bus_id} has more than one generator")
        has_gen[i] = True
        gen_bus.append(i)
        sg_min[i] = g.p_min, g.q_min
        sg_max[i] = g.p_max, g.q_max
        if g.cost is not None:
            c = np.asarray(g.cost.coefficients)
            cost[i, degree - len(c):] = c

    brs = case.branches
    f = np.array([idx[b.from_bus] for b in brs], dtype=int)
    t = np.array([idx[b.to_bus] for b in brs], dtype=int)
    y = np.array([b.series_admittance for b in brs], dtype=complex)
    yc = np.array([1j * b.total_charging / 2 for b in brs], dtype=complex)
    tap = np.array([b.complex_tap for b in brs], dtype=complex)
    nan = float("nan")
    rate = np.array([b.rate_max if b.rate_max is not None else nan for b in brs])
    amin = np.array([b.ang_min if b.ang_min is not None else nan for b in brs])
    amax = np.array([b.ang_max if b.ang_max is not None else nan for b in brs])

    gso, rho = build_gso(case, alpha, beta, normalize_gso)
    model = GridModel(
        name=case.name,
        base_mva=case.base_mva,
        bus_ids=np.array(case.bus_ids),
        v_min=np.array([b.v_min for b in case.buses]),
        v_max=np.array([b.v_max for b in case.buses]),
        shunt=np.array([b.shunt_admittance for b in case.buses], dtype=complex),
        reference_bus=refs[0],
        has_gen=has_gen,
        gen_bus=np.array(gen_bus, dtype=int),
        sg_min=sg_min,
        sg_max=sg_max,
        cost_coeffs=cost,
        f=f, t=t, y=y, yc_from=yc, yc_to=yc.copy(), tap=tap,
        rate_max=rate, ang_min=amin, ang_max=amax,
        gso=gso, alpha=float(alpha), beta=float(beta), normalize_gso=normalize_gso,
        spectral_radius=rho,
        ref_demand=case.reference_demand(),
    )
    return model


# --------------------------------------------------------------------------- physics

def complex_voltage(v, delta):
    return np.asarray(v) * np.exp(1j * np.asarray(delta))


def branch_flows(model: GridModel, v, delta):
    """Complex power entering each branch at its from end and at its to end."""
    vc = complex_voltage(v, delta)
    vi, vj = vc[..., model.f], vc[..., model.t]
    y, T = model.y, model.tap
    s_fwd = np.conj(y + model.yc_from) * np.abs(vi) ** 2 / np.abs(T) ** 2 - np.conj(y) * vi * np.conj(vj) / T
    s_rev = np.conj(y + model.yc_to) * np.abs(vj) ** 2 - np.conj(y) * np.conj(vi) * vj / np.conj(T)
    return s_fwd, s_rev


def bus_outflow(model: GridModel, s_fwd, s_rev):
    """Sum branch flows leaving each bus, over both orientations."""
    n = model.n_buses
    lead = np.shape(s_fwd)[:-1]
    out = np.zeros(lead + (n,), dtype=complex)
    np.add.at(out, (..., model.f), s_fwd)
    np.add.at(out, (..., model.t), s_rev)
    return out


def power_balance_residual(model: GridModel, x) -> np.ndarray:
    """Net injection minus shunt consumption minus branch outflow, per bus (complex)."""
    x = np.asarray(x, dtype=float)
    p, q, v, d = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    s_fwd, s_rev = branch_flows(model, v, d)
    s = p + 1j * q
    return s - np.conj(model.shunt) * v**2 - bus_outflow(model, s_fwd, s_rev)


def aggregate_demand(case: NetworkCase, loads) -> np.ndarray:
    """Sum ``(bus_id, complex demand)`` pairs into an N x 2 demand matrix."""
    idx = case.bus_index()
    out = np.zeros((len(case.buses), 2))
    for bus_id, s in loads:
        if bus_id not in idx:
            raise KeyError(f"load references unknown bus {bus_id}")
        out[idx[bus_id], 0] += complex(s).real
        out[idx[bus_id], 1] += complex(s).imag
    return out


def generation_from_state(model: GridModel, x, s_d) -> np.ndarray:
    return np.asarray(x)[..., :2] + np.asarray(s_d)


def state_from_generation(s_g, s_d, v, delta) -> np.ndarray:
    pq = np.asarray(s_g) - np.asarray(s_d)
    return np.concatenate([pq, np.asarray(v)[..., None], np.asarray(delta)[..., None]], axis=-1)


def generation_cost(model: GridModel, s_g) -> np.ndarray:
    """Total cost over generator buses, evaluated at each bus's active generation."""
    p = np.asarray(s_g, dtype=float)[..., 0]
    total = np.zeros(p.shape)
    for c in model.cost_coeffs.T:
        total = total * p + c
    return (total * model.has_gen).sum(axis=-1)


def angle_differences(model: GridModel, delta) -> np.ndarray:
    """Angle of V_i V_j^* on each branch."""
    delta = np.asarray(delta)
    return delta[..., model.f] - delta[..., model.t]


def gauge_fix(model: GridModel, delta) -> np.ndarray:
    delta = np.asarray(delta)
    return delta - delta[..., model.reference_bus: model.reference_bus + 1]


def permute_case(case: NetworkCase, perm) -> NetworkCase:
    """Reorder buses so that new position ``k`` holds old bus ``perm[k]``."""
    buses = tuple(case.buses[int(i)] for i in perm)
    return NetworkCase(case.name, case.base_mva, buses, case.generators, case.branches)
