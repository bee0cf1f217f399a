"""Constraint margins, normalized violation errors and violation rates."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridModel, branch_flows, generation_cost, power_balance_residual

KINDS = ("gen_p", "gen_q", "voltage_mag", "rate_fwd", "rate_rev", "angle_diff")

# S^g is reconstructed as p + S^d and v comes out of a rescaled sigmoid; both can
# land a few ulps outside a bound they were constructed to meet.
ROUNDOFF = 1e-12


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintMargin:
    kind: str
    element_id: int
    value: float
    lower: float | None
    upper: float | None

    def __post_init__(self):
        if self.lower is None and self.upper is None:
            raise MetricsError("a margin needs at least one bound")
        if self.lower is not None and self.upper is not None and self.lower > self.upper:
            raise MetricsError(f"{self.kind}[{self.element_id}]: lower > upper")


@dataclass
class KindArrays:
    """Values of one constraint kind for a batch: ``values`` is ``(..., M)``."""

    kind: str
    element_ids: np.ndarray
    values: np.ndarray
    lower: np.ndarray  # nan where absent
    upper: np.ndarray


def absolute_error(value, lower=None, upper=None):
    """``(value - upper)^+ + (lower - value)^+``; an absent bound contributes 0."""
    value = np.asarray(value, dtype=float)
    err = np.zeros(value.shape)
    if lower is not None:
        lo = np.asarray(lower, dtype=float)
        err = err + np.where(np.isnan(lo), 0.0, np.maximum(np.nan_to_num(lo) - value, 0.0))
    if upper is not None:
        hi = np.asarray(upper, dtype=float)
        err = err + np.where(np.isnan(hi), 0.0, np.maximum(value - np.nan_to_num(hi), 0.0))
    return err if err.ndim else float(err)


def _snap(values, lower, upper):
    out = values.copy()
    for b in (lower, upper):
        near = ~np.isnan(b) & (np.abs(values - np.nan_to_num(b)) <= ROUNDOFF * np.maximum(1.0, np.abs(np.nan_to_num(b))))
        out = np.where(near, np.nan_to_num(b), out)
    return out


def margin_arrays(model: GridModel, x, s_d) -> list[KindArrays]:
    """Every bounded inequality instance, grouped by kind; unbounded ones are omitted."""
    x = np.asarray(x, dtype=float)
    s_d = np.asarray(s_d, dtype=float)
    gb = model.gen_bus
    sg = x[..., :2] + s_d
    v, d = x[..., 2], x[..., 3]
    sf, sr = branch_flows(model, v, d)
    rated = np.flatnonzero(model.rate_mask)
    angled = np.flatnonzero(model.angle_mask)
    nan_r = np.zeros(len(rated))
    groups = [
        KindArrays("gen_p", gb, sg[..., gb, 0], model.sg_min[gb, 0], model.sg_max[gb, 0]),
        KindArrays("gen_q", gb, sg[..., gb, 1], model.sg_min[gb, 1], model.sg_max[gb, 1]),
        KindArrays("voltage_mag", np.arange(model.n_buses), v, model.v_min, model.v_max),
        KindArrays("rate_fwd", rated, np.abs(sf[..., rated]), nan_r, model.rate_max[rated]),
        KindArrays("rate_rev", rated, np.abs(sr[..., rated]), nan_r.copy(), model.rate_max[rated]),
        KindArrays("angle_diff", angled, d[..., model.f[angled]] - d[..., model.t[angled]],
                   model.ang_min[angled], model.ang_max[angled]),
    ]
    out = []
    for g in groups:
        if g.values.shape[-1] == 0:
            continue
        g.values = _snap(g.values, np.broadcast_to(g.lower, g.values.shape),
                         np.broadcast_to(g.upper, g.values.shape))
        out.append(g)
    return out


def inequality_margins(model: GridModel, x, s_d) -> list[ConstraintMargin]:
    """Margins of a single state, one per bounded constraint instance."""
    margins = []
    for g in margin_arrays(model, x, s_d):
        for j, eid in enumerate(g.element_ids):
            lo, hi = g.lower[j], g.upper[j]
            margins.append(ConstraintMargin(
                g.kind, int(eid), float(g.values[..., j]),
                None if np.isnan(lo) else float(lo),
                None if np.isnan(hi) else float(hi),
            ))
    return margins


def normalizers(lower, upper) -> np.ndarray:
    """Feasible-width normalizer per instance of one kind.

    The width ``|upper - lower|`` where positive; otherwise (zero width or a
    missing bound) the mean of the positive widths of the kind.
    """
    width = np.abs(np.asarray(upper, dtype=float) - np.asarray(lower, dtype=float))
    ok = ~np.isnan(width) & (width > 0)
    if not ok.any():
        raise MetricsError("no instance of this kind has a positive feasible width")
    return np.where(ok, np.nan_to_num(width), width[ok].mean())


def _rate_lower(kind, lower):
    # rate limits are upper-only; their width is S_max itself
    return np.zeros_like(lower) if kind in ("rate_fwd", "rate_rev") else lower


def relative_errors(margins: list[ConstraintMargin]) -> list[float]:
    """Absolute errors normalized by the per-kind feasible width."""
    out = [0.0] * len(margins)
    by_kind: dict[str, list[int]] = {}
    for i, m in enumerate(margins):
        by_kind.setdefault(m.kind, []).append(i)
    for kind, idx in by_kind.items():
        lo = np.array([np.nan if margins[i].lower is None else margins[i].lower for i in idx])
        hi = np.array([np.nan if margins[i].upper is None else margins[i].upper for i in idx])
        val = np.array([margins[i].value for i in idx])
        eta = normalizers(_rate_lower(kind, lo), hi)
        rel = absolute_error(val, lo, hi) / eta
        for i, r in zip(idx, np.atleast_1d(rel)):
            out[i] = float(r)
    return out


def kind_relative_errors(g: KindArrays) -> np.ndarray:
    eta = normalizers(_rate_lower(g.kind, g.lower), g.upper)
    return absolute_error(g.values, g.lower, g.upper) / eta


def violation_rate(rel_errors) -> float:
    """Fraction of inequality instances with a positive error."""
    rel = np.asarray(rel_errors, dtype=float)
    if rel.size == 0:
        raise MetricsError("violation rate of an empty constraint set")
    return float(np.count_nonzero(rel > 0) / rel.size)


@dataclass
class FeasibilityReport:
    violation_rate: float
    n_instances: int
    n_violations: int
    max_relative_error: dict = field(default_factory=dict)
    mean_relative_error: dict = field(default_factory=dict)
    violation_counts: dict = field(default_factory=dict)
    max_residual: float = 0.0
    equality_ok: bool = True
    generation_cost: float = 0.0

    def to_dict(self):
        return asdict(self)


def batch_feasibility(model: GridModel, x, s_d, equality_tolerance: float = 1e-4):
    """Per-sample reports plus per-instance relative errors for a batch ``(B, N, 4)``."""
    x = np.asarray(x, dtype=float)
    s_d = np.asarray(s_d, dtype=float)
    single = x.ndim == 2
    if single:
        x, s_d = x[None], s_d[None]
    groups = margin_arrays(model, x, s_d)
    rels = {g.kind: kind_relative_errors(g) for g in groups}
    all_rel = np.concatenate(list(rels.values()), axis=-1)
    res = np.abs(power_balance_residual(model, x)).max(axis=-1)
    cost = generation_cost(model, x[..., :2] + s_d)
    reports = []
    for b in range(x.shape[0]):
        nviol = int(np.count_nonzero(all_rel[b] > 0))
        reports.append(FeasibilityReport(
            violation_rate=nviol / all_rel.shape[-1],
            n_instances=int(all_rel.shape[-1]),
            n_violations=nviol,
            max_relative_error={k: float(r[b].max()) for k, r in rels.items()},
            mean_relative_error={k: float(r[b].mean()) for k, r in rels.items()},
            violation_counts={k: int(np.count_nonzero(r[b] > 0)) for k, r in rels.items()},
            max_residual=float(res[b]),
            equality_ok=bool(res[b] <= equality_tolerance),
            generation_cost=float(cost[b]),
        ))
    return reports, groups, rels


def feasibility_report(model: GridModel, x, s_d, equality_tolerance: float = 1e-4) -> FeasibilityReport:
    reports, _, _ = batch_feasibility(model, np.asarray(x)[None], np.asarray(s_d)[None], equality_tolerance)
    return reports[0]


def write_error_csv(path, groups, rels, sample_ids=None) -> None:
    """Per-instance relative errors: ``sample_id, kind, element_id, rel_error``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "kind", "element_id", "rel_error"])
        for g in groups:
            r = rels[g.kind]
            for b in range(r.shape[0]):
                sid = b if sample_ids is None else sample_ids[b]
                for j, eid in enumerate(g.element_ids):
                    w.writerow([sid, g.kind, int(eid), repr(float(r[b, j]))])


def write_report_json(path, report: FeasibilityReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))
