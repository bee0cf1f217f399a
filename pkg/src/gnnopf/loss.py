"""Unsupervised training objective: cost plus extended log-barrier and squared penalties."""

from __future__ import annotations

import weakref
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .grid import GridModel, branch_flows, generation_cost, power_balance_residual


@dataclass(frozen=True)
class PenaltyConfig:
    """Barrier slope ``s``, barrier sharpness ``t``, inequality weight ``lam``,
    equality weight ``mu`` and the weight on the generation cost term.

    ``cost_weight=None`` divides the cost by :func:`midpoint_cost` of the grid,
    which brings it to O(1) next to the penalty terms.
    """

    s: float = 10.0
    t: float = 500.0
    lam: float = 1.0
    mu: float = 100.0
    cost_weight: float | None = 1.0

    def __post_init__(self):
        if not (self.s > 0 and self.t > 0):
            raise ValueError("s and t must be positive")
        if self.lam < 0 or self.mu < 0 or (self.cost_weight is not None and self.cost_weight < 0):
            raise ValueError("lam, mu and cost_weight must be non-negative")

    def cost_weight_for(self, model: GridModel) -> float:
        if self.cost_weight is not None:
            return self.cost_weight
        return 1.0 / midpoint_cost(model)

    def to_dict(self):
        return asdict(self)


def midpoint_cost(model: GridModel) -> float:
    """Generation cost with every generator at the middle of its active-power box."""
    mid = (model.sg_min + model.sg_max) / 2
    c = float(generation_cost(model, mid))
    if not c > 0:
        raise ValueError("midpoint cost is not positive; set cost_weight explicitly")
    return c


def extended_log(u, s: float):
    """``log(u)`` for ``u >= 1/s``, continued by its tangent line below the knot.

    The continuation ``s(u - 1/s) + log(1/s)`` matches value and slope at the
    knot, so the derivative is ``min(1/u, s)`` everywhere. The variant
    ``s(u + 1/s) - log(1/s)`` would jump by ``2 + 2 log s`` there.
    """
    u = np.asarray(u, dtype=float)
    knot = 1.0 / s
    return np.where(u >= knot, np.log(np.maximum(u, knot)), s * (u - knot) + np.log(knot))


def extended_log_derivative(u, s: float):
    u = np.asarray(u, dtype=float)
    return np.where(u > 0, np.minimum(1.0 / np.where(u > 0, u, 1.0), s), s)


def inequality_penalty(g, cfg: PenaltyConfig):
    """Extended log-barrier of a constraint ``g <= 0``."""
    return -extended_log(-np.asarray(g, dtype=float), cfg.s) / cfg.t


def equality_penalty(h):
    return np.square(h)


# --------------------------------------------------------------------------- constraint functions

def _angle_constraints(model: GridModel, dtheta):
    """Stack ``g <= 0`` forms of the angle-difference bounds that exist."""
    out = []
    lo = np.flatnonzero(~np.isnan(model.ang_min))
    hi = np.flatnonzero(~np.isnan(model.ang_max))
    if lo.size:
        out.append(model.ang_min[lo] - dtheta[..., lo])
    if hi.size:
        out.append(dtheta[..., hi] - model.ang_max[hi])
    return out


def inequality_values(model: GridModel, x) -> np.ndarray:
    """All penalized ``g(X) <= 0`` values of a state, concatenated on the last axis."""
    x = np.asarray(x, dtype=float)
    v, d = x[..., 2], x[..., 3]
    sf, sr = branch_flows(model, v, d)
    m = model.rate_mask
    parts = []
    if m.any():
        smax2 = model.rate_max[m] ** 2
        parts += [np.abs(sf[..., m]) ** 2 - smax2, np.abs(sr[..., m]) ** 2 - smax2]
    parts += _angle_constraints(model, d[..., model.f] - d[..., model.t])
    if not parts:
        return np.zeros(x.shape[:-2] + (0,))
    return np.concatenate(parts, axis=-1)


def _box_values(model, x, s_d):
    sg = x[..., :2] + s_d
    gb = model.gen_bus
    v = x[..., 2]
    return np.concatenate([
        model.sg_min[gb, 0] - sg[..., gb, 0], sg[..., gb, 0] - model.sg_max[gb, 0],
        model.sg_min[gb, 1] - sg[..., gb, 1], sg[..., gb, 1] - model.sg_max[gb, 1],
        model.v_min - v, v - model.v_max,
    ], axis=-1)


def total_loss_numpy(model: GridModel, x, s_d, cfg: PenaltyConfig, include_boxes: bool = False):
    """Per-sample loss evaluated directly with numpy (no tape)."""
    x = np.asarray(x, dtype=float)
    s_d = np.asarray(s_d, dtype=float)
    cost = generation_cost(model, x[..., :2] + s_d)
    g = inequality_values(model, x)
    if include_boxes:
        g = np.concatenate([g, _box_values(model, x, s_d)], axis=-1)
    res = power_balance_residual(model, x)
    return (cfg.cost_weight_for(model) * cost
            + cfg.lam * inequality_penalty(g, cfg).sum(axis=-1)
            + cfg.mu * (equality_penalty(res.real) + equality_penalty(res.imag)).sum(axis=-1))


# --------------------------------------------------------------------------- taped version

class _Consts:
    """Per-model constant arrays used by the taped loss; built once per model."""

    def __init__(self, model: GridModel):
        n, e = model.n_buses, model.n_branches
        yf = model.y + model.yc_from
        yt = model.y + model.yc_to
        tau = np.abs(model.tap)
        self.g, self.b = model.y.real, model.y.imag
        self.gf, self.bf = yf.real / tau**2, yf.imag / tau**2
        self.gt, self.bt = yt.real, yt.imag
        self.inv_tau = 1.0 / tau
        self.theta = np.angle(model.tap)
        self.cf = np.zeros((e, n))
        self.cf[np.arange(e), model.f] = 1.0
        self.ct = np.zeros((e, n))
        self.ct[np.arange(e), model.t] = 1.0
        self.gs, self.bs = model.shunt.real, model.shunt.imag


_CONSTS: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def _consts(model: GridModel) -> _Consts:
    c = _CONSTS.get(model)
    if c is None:
        c = _CONSTS[model] = _Consts(model)
    return c


def taped_branch_flows(model: GridModel, v: ad.Value, d: ad.Value):
    """Real and imaginary branch flows ``(pf, qf, pr, qr)``, each ``(B, E)``."""
    c = _consts(model)
    vi, vj = v[..., model.f], v[..., model.t]
    phi = d[..., model.f] - d[..., model.t] - c.theta
    cs, sn = ad.cos(phi), ad.sin(phi)
    vv = vi * vj * c.inv_tau
    vi2, vj2 = ad.square(vi), ad.square(vj)
    gcos, gsin = cs * c.g, sn * c.g
    bcos, bsin = cs * c.b, sn * c.b
    pf = vi2 * c.gf - vv * (gcos + bsin)
    qf = -(vi2 * c.bf) - vv * (gsin - bcos)
    pr = vj2 * c.gt - vv * (gcos - bsin)
    qr = -(vj2 * c.bt) + vv * (gsin + bcos)
    return pf, qf, pr, qr


def taped_residual(model: GridModel, x: ad.Value):
    """Real and imaginary power-balance residuals, each ``(B, N)``."""
    c = _consts(model)
    p, q, v, d = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    pf, qf, pr, qr = taped_branch_flows(model, v, d)
    v2 = ad.square(v)
    out_p = pf @ c.cf + pr @ c.ct
    out_q = qf @ c.cf + qr @ c.ct
    return p - v2 * c.gs - out_p, q + v2 * c.bs - out_q, (pf, qf, pr, qr)


def taped_cost(model: GridModel, x: ad.Value, s_d):
    gb = model.gen_bus
    pg = x[..., gb, 0] + np.asarray(s_d)[..., gb, 0]
    coeffs = model.cost_coeffs[gb]
    total = pg * coeffs[:, 0] if coeffs.shape[1] > 1 else pg * 0.0 + coeffs[:, 0]
    for k in range(1, coeffs.shape[1]):
        total = total + coeffs[:, k] if k == coeffs.shape[1] - 1 else (total + coeffs[:, k]) * pg
    return total.sum(axis=-1)


def _barrier(g: ad.Value, cfg: PenaltyConfig) -> ad.Value:
    return ad.scale(ad.extended_log(-g, cfg.s), -1.0 / cfg.t)


def taped_loss(model: GridModel, x: ad.Value, s_d, cfg: PenaltyConfig,
               include_boxes: bool = False) -> ad.Value:
    """Per-sample loss ``(B,)`` built on the tape of ``x`` (shape ``(B, N, 4)``)."""
    s_d = np.asarray(s_d, dtype=float)
    rp, rq, (pf, qf, pr, qr) = taped_residual(model, x)
    loss = ad.scale(taped_cost(model, x, s_d), cfg.cost_weight_for(model))
    ineq = []
    m = np.flatnonzero(model.rate_mask)
    if m.size:
        smax2 = model.rate_max[m] ** 2
        ineq.append(ad.square(pf[..., m]) + ad.square(qf[..., m]) - smax2)
        ineq.append(ad.square(pr[..., m]) + ad.square(qr[..., m]) - smax2)
    if model.angle_mask.any():
        d = x[..., 3]
        ineq += _angle_constraints(model, d[..., model.f] - d[..., model.t])
    if include_boxes:
        gb = model.gen_bus
        sg = x[..., :2] + s_d
        v = x[..., 2]
        ineq += [
            model.sg_min[gb, 0] - sg[..., gb, 0], sg[..., gb, 0] - model.sg_max[gb, 0],
            model.sg_min[gb, 1] - sg[..., gb, 1], sg[..., gb, 1] - model.sg_max[gb, 1],
            model.v_min - v, v - model.v_max,
        ]
    if ineq and cfg.lam > 0:
        g = ad.concat(ineq, axis=-1)
        loss = loss + ad.scale(_barrier(g, cfg).sum(axis=-1), cfg.lam)
    if cfg.mu > 0:
        loss = loss + ad.scale((ad.square(rp) + ad.square(rq)).sum(axis=-1), cfg.mu)
    return loss


def total_loss(model: GridModel, x: ad.Value, s_d, cfg: PenaltyConfig,
               include_boxes: bool = False) -> ad.Value:
    """Mean loss over the batch as a scalar :class:`~gnnopf.autodiff.Value`.

    ``x`` may be ``(N, 4)`` or ``(B, N, 4)``; ``s_d`` matches it as ``(N, 2)`` or
    ``(B, N, 2)``. The terms are the generation cost, ``lam`` times the barrier
    of every bounded branch-rate and angle-difference constraint, and ``mu``
    times the squared real and imaginary power-balance residuals.
    """
    if x.ndim == 2:
        x = x[None]
        s_d = np.asarray(s_d)[None]
    per = taped_loss(model, x, s_d, cfg, include_boxes)
    return ad.scale(per.sum(), 1.0 / per.shape[0])
