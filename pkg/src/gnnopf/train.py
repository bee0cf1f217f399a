"""Unsupervised training of the GNN and evaluation on a held-out test set."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .case_io import LoadDataset
from .gnn import GnnConfig, GnnParams, gnn_forward, init_params, taped_forward
from .grid import GridModel
from .loss import PenaltyConfig, taped_loss, total_loss_numpy
from .metrics import KINDS, batch_feasibility
from .optim import OPTIMIZERS, OptimizerState, optimizer_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    penalty: PenaltyConfig = field(default_factory=lambda: PenaltyConfig(s=10.0, t=500.0))
    gnn: GnnConfig = field(default_factory=GnnConfig)
    seed: int = 0
    validation_fraction: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def to_dict(self):
        return asdict(self)


def config_from_dict(doc: dict) -> TrainConfig:
    """Build a config from nested ``gnn``, ``penalty`` and ``optimizer`` sections.

    The ``optimizer`` section carries ``kind`` and ``learning_rate``; any top-level
    field of :class:`TrainConfig` may also be given directly. ``grid`` and
    ``solver`` sections belong to other stages and are skipped.
    """
    doc = dict(doc)
    doc.pop("solver", None)
    doc.pop("grid", None)
    opt = doc.pop("optimizer", {})
    if isinstance(opt, str):
        opt = {"kind": opt}
    kw = {k: doc.pop(k) for k in list(doc) if k in ("epochs", "batch_size", "learning_rate", "seed",
                                                    "validation_fraction", "workers")}
    if "kind" in opt:
        kw["optimizer"] = opt["kind"]
    if "learning_rate" in opt:
        kw["learning_rate"] = opt["learning_rate"]
    kw["gnn"] = GnnConfig(**doc.pop("gnn", {}))
    kw["penalty"] = PenaltyConfig(**doc.pop("penalty", {"s": 10.0, "t": 500.0}))
    if doc:
        raise ValueError(f"unknown config keys: {sorted(doc)}")
    return TrainConfig(**kw)


def load_config(path) -> TrainConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_violation_rate: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.train_loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_violation_rate", "seconds"])
            for e in range(len(self)):
                w.writerow([e + 1, repr(self.train_loss[e]), repr(self.val_loss[e]),
                            repr(self.val_violation_rate[e]), repr(self.seconds[e])])


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, first ``round(fraction*n)`` indices held out for validation."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    if fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    return perm[n_val:], perm[:n_val]


def _chunk_grad(params_flat, config, model, s_d, penalty):
    tape = ad.Tape()
    leaves = [tape.leaf(h) for h in params_flat]
    x = taped_forward(leaves, config, model, s_d)
    per = taped_loss(model, x, s_d, penalty)
    grads = ad.backward(per.sum(), leaves)
    return float(per.data.sum()), grads


def batch_gradient(params: GnnParams, model: GridModel, s_d: np.ndarray, penalty: PenaltyConfig,
                   pool: ThreadPoolExecutor | None = None, workers: int = 1):
    """Mean loss and mean per-sample gradient over a batch ``(B, N, 2)``.

    With several workers the batch is cut into contiguous chunks, each on its
    own tape; chunk sums are added in sample order.
    """
    flat = params.flat()
    b = s_d.shape[0]
    bounds = np.linspace(0, b, min(workers, b) + 1).astype(int)
    chunks = [s_d[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
    if pool is not None and len(chunks) > 1:
        parts = list(pool.map(lambda c: _chunk_grad(flat, params.config, model, c, penalty), chunks))
    else:
        parts = [_chunk_grad(flat, params.config, model, c, penalty) for c in chunks]
    loss = sum(p[0] for p in parts)
    grads = [g.copy() for g in parts[0][1]]
    for _, gs in parts[1:]:
        for acc, g in zip(grads, gs):
            acc += g
    return loss / b, [g / b for g in grads]


def dataset_loss(params: GnnParams, model: GridModel, s_d: np.ndarray, penalty: PenaltyConfig,
                 chunk: int = 1024) -> np.ndarray:
    """Per-sample loss of the network on ``s_d`` without a tape."""
    out = [total_loss_numpy(model, gnn_forward(params, model, s_d[i:i + chunk]), s_d[i:i + chunk], penalty)
           for i in range(0, s_d.shape[0], chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def _check_dataset(dataset: LoadDataset, model: GridModel):
    if dataset.n_buses not in (None, model.n_buses):
        raise ValueError(f"dataset has {dataset.n_buses} buses, grid model has {model.n_buses}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")


def train(config: TrainConfig, dataset: LoadDataset, model: GridModel,
          params: GnnParams | None = None) -> tuple[GnnParams, TrainHistory]:
    """Mini-batch descent on the mean loss; returns the best-validation parameters."""
    _check_dataset(dataset, model)
    data = dataset.as_array()
    tr_idx, val_idx = split_indices(len(data), config.validation_fraction, config.seed)
    val = data[val_idx]
    params = params.copy() if params is not None else init_params(config.gnn)
    rng = np.random.default_rng(config.seed + 1)
    state = OptimizerState()
    history = TrainHistory()
    best, best_loss = params.copy(), np.inf
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    start = time.perf_counter()
    try:
        for epoch in range(config.epochs):
            order = tr_idx[rng.permutation(len(tr_idx))]
            total, count = 0.0, 0
            for b, lo in enumerate(range(0, len(order), config.batch_size)):
                batch = data[order[lo:lo + config.batch_size]]
                loss, grads = batch_gradient(params, model, batch, config.penalty, pool, config.workers)
                if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                    raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
                flat, state = optimizer_step(params.flat(), grads, state, config.optimizer,
                                             config.learning_rate)
                params = params.with_flat(flat)
                total += loss * len(batch)
                count += len(batch)
            history.train_loss.append(total / count)
            if len(val):
                vl = float(dataset_loss(params, model, val, config.penalty).mean())
                reports, _, _ = batch_feasibility(model, gnn_forward(params, model, val), val)
                vr = float(np.mean([r.violation_rate for r in reports]))
            else:
                vl, vr = history.train_loss[-1], float("nan")
            history.val_loss.append(vl)
            history.val_violation_rate.append(vr)
            history.seconds.append(time.perf_counter() - start)
            if vl < best_loss:
                best, best_loss, history.best_epoch = params.copy(), vl, epoch + 1
            log.info("epoch %d: train %.6g val %.6g violation %.4f", epoch + 1,
                     history.train_loss[-1], vl, vr)
    finally:
        if pool is not None:
            pool.shutdown()
    return best, history


# --------------------------------------------------------------------------- evaluation

@dataclass
class BaselineCosts:
    """Per-sample baseline costs aligned with a test set by ``sample_ids``."""

    sample_ids: np.ndarray
    costs: np.ndarray
    converged: np.ndarray

    @classmethod
    def from_results(cls, doc: dict) -> BaselineCosts:
        entries = doc["results"]
        return cls(np.array([e["sample_id"] for e in entries], dtype=int),
                   np.array([e["cost"] for e in entries], dtype=float),
                   np.array([e["converged"] for e in entries], dtype=bool))


@dataclass
class EvalReport:
    n_samples: int
    mean_cost: float
    mean_violation_rate: float
    fraction_with_violation: float
    max_residual: float
    max_error_by_kind: dict
    cost_ratio_zero_violation: float | None = None
    n_zero_violation: int | None = None
    cost_ratio_converged: float | None = None
    n_converged: int | None = None
    per_sample: list = field(default_factory=list, repr=False)

    def to_dict(self, with_samples: bool = False):
        d = asdict(self)
        if not with_samples:
            d.pop("per_sample")
        return d


def evaluate_states(model: GridModel, x: np.ndarray, s_d: np.ndarray,
                    baseline: BaselineCosts | None = None, tolerance: float = 1e-4):
    """Aggregate feasibility of a batch of states; returns ``(report, groups, rels)``."""
    if x.shape[0] == 0:
        raise ValueError("empty test set")
    reports, groups, rels = batch_feasibility(model, x, s_d, tolerance)
    cost = np.array([r.generation_cost for r in reports])
    vrate = np.array([r.violation_rate for r in reports])
    out = EvalReport(
        n_samples=len(reports),
        mean_cost=float(cost.mean()),
        mean_violation_rate=float(vrate.mean()),
        fraction_with_violation=float(np.mean(vrate > 0)),
        max_residual=float(max(r.max_residual for r in reports)),
        max_error_by_kind={k: rels[k].max(axis=-1).tolist() for k in KINDS if k in rels},
        per_sample=[r.to_dict() for r in reports],
    )
    if baseline is not None:
        if len(baseline.sample_ids) != len(reports) or not np.array_equal(
                baseline.sample_ids, np.arange(len(reports))):
            raise ValueError("baseline results are not aligned with the test set")
        clean = (vrate == 0) & baseline.converged
        out.n_zero_violation = int(clean.sum())
        if clean.any():
            out.cost_ratio_zero_violation = float(cost[clean].mean() / baseline.costs[clean].mean())
        conv = baseline.converged
        out.n_converged = int(conv.sum())
        if conv.any():
            out.cost_ratio_converged = float(cost[conv].mean() / baseline.costs[conv].mean())
    return out, groups, rels


def evaluate_test_set(params: GnnParams, model: GridModel, test: LoadDataset,
                      baseline: BaselineCosts | None = None, tolerance: float = 1e-4):
    """Run the network on every test sample and aggregate the feasibility reports."""
    s_d = test.as_array()
    if s_d.shape[0] == 0:
        raise ValueError("empty test set")
    x = gnn_forward(params, model, s_d)
    return evaluate_states(model, x, s_d, baseline, tolerance)
