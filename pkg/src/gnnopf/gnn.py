"""Graph convolutional network mapping demand to a bounded bus state."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .grid import GridModel

INPUT_WIDTH = 8
OUTPUT_WIDTH = 4
NONLINEARITIES = ("relu", "tanh")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GnnConfig:
    L: int = 2
    K: int = 8
    F: int = 32
    hidden_nonlinearity: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.L < 1 or self.K < 0 or self.F < 1:
            raise ValueError(f"invalid GNN shape L={self.L}, K={self.K}, F={self.F}")
        if self.hidden_nonlinearity not in NONLINEARITIES:
            raise ValueError(f"hidden_nonlinearity must be one of {NONLINEARITIES}")

    def widths(self) -> list[int]:
        return [INPUT_WIDTH] + [self.F] * (self.L - 1) + [OUTPUT_WIDTH]


@dataclass
class GnnParams:
    """``taps[l][k]`` is the ``F_{l} x F_{l+1}`` matrix applied to ``A^k Z``."""

    config: GnnConfig
    taps: list[list[np.ndarray]]

    def flat(self) -> list[np.ndarray]:
        return [h for layer in self.taps for h in layer]

    def with_flat(self, arrays) -> GnnParams:
        arrays = list(arrays)
        k1 = self.config.K + 1
        return GnnParams(self.config, [arrays[i * k1:(i + 1) * k1] for i in range(self.config.L)])

    def copy(self) -> GnnParams:
        return self.with_flat([h.copy() for h in self.flat()])

    def n_parameters(self) -> int:
        return sum(h.size for h in self.flat())


def init_params(config: GnnConfig) -> GnnParams:
    """Uniform(-c, c) taps with ``c = sqrt(6 / ((K+1)(F_in+F_out)))``, seeded."""
    rng = np.random.default_rng(config.seed)
    w = config.widths()
    taps = []
    for fin, fout in zip(w[:-1], w[1:]):
        c = init_bound(config.K, fin, fout)
        taps.append([rng.uniform(-c, c, size=(fin, fout)) for _ in range(config.K + 1)])
    return GnnParams(config, taps)


def init_bound(K: int, fin: int, fout: int) -> float:
    return math.sqrt(6.0 / ((K + 1) * (fin + fout)))


def zero_params(config: GnnConfig) -> GnnParams:
    w = config.widths()
    return GnnParams(config, [[np.zeros((a, b)) for _ in range(config.K + 1)]
                              for a, b in zip(w[:-1], w[1:])])


# --------------------------------------------------------------------------- building blocks

def build_input(model: GridModel, s_d) -> np.ndarray:
    """Input signal ``[S^d | S^g_min | S^g_max | V_min | V_max]``, width 8."""
    s_d = np.asarray(s_d, dtype=float)
    lead = s_d.shape[:-2]
    n = model.n_buses
    static = np.concatenate([model.sg_min, model.sg_max, model.v_min[:, None], model.v_max[:, None]], axis=1)
    return np.concatenate([s_d, np.broadcast_to(static, lead + (n, 6))], axis=-1)


def graph_filter(gso, z, taps):
    """``sum_k A^k Z H_k`` with numpy arrays."""
    z = np.asarray(z, dtype=float)
    if any(np.shape(h) != np.shape(taps[0]) for h in taps) or np.shape(taps[0])[0] != z.shape[-1]:
        raise ad.ShapeError(f"taps {[np.shape(h) for h in taps]} do not conform with signal {z.shape}")
    out = z @ taps[0]
    shifted = z
    for h in taps[1:]:
        shifted = np.matmul(gso, shifted)
        out = out + shifted @ h
    return out


def taped_graph_filter(gso, z: ad.Value, taps: list) -> ad.Value:
    """Taped graph filter; shifts are chained so ``A^k`` is never formed."""
    shifted = [z]
    for _ in taps[1:]:
        shifted.append(ad.shift(gso, shifted[-1], 1))
    stacked = ad.concat(shifted, axis=-1) if len(shifted) > 1 else z
    weights = ad.concat(taps, axis=0) if len(taps) > 1 else taps[0]
    return stacked @ weights


def bounded_sigmoid(x, a, b):
    """Sigmoid rescaled to the interval ``[a, b]``."""
    x = np.asarray(x, dtype=float)
    return (np.asarray(b) - np.asarray(a)) * (0.5 * (1.0 + np.tanh(0.5 * x))) + a


def _hidden(name):
    return {"relu": ad.relu, "tanh": ad.tanh}[name]


def taped_forward(params_leaves: list, config: GnnConfig, model: GridModel, s_d) -> ad.Value:
    """Bus state ``(B, N, 4)`` on the tape of ``params_leaves``."""
    s_d = np.asarray(s_d, dtype=float)
    if s_d.ndim == 2:
        s_d = s_d[None]
    tape = params_leaves[0].tape
    z = tape.constant(build_input(model, s_d))
    k1 = config.K + 1
    act = _hidden(config.hidden_nonlinearity)
    for layer in range(config.L):
        z = taped_graph_filter(model.gso, z, params_leaves[layer * k1:(layer + 1) * k1])
        if layer < config.L - 1:
            z = act(z)
    return taped_head(model, z, s_d)


def taped_head(model: GridModel, raw: ad.Value, s_d) -> ad.Value:
    """Map unbounded ``[Sg_re, Sg_im, v, delta]`` channels to a feasible-box state."""
    sg = ad.sigmoid(raw[..., 0:2]) * (model.sg_max - model.sg_min) + model.sg_min
    v = ad.sigmoid(raw[..., 2:3]) * (model.v_max - model.v_min)[:, None] + model.v_min[:, None]
    r = model.reference_bus
    d = raw[..., 3:4] - raw[..., r:r + 1, 3:4]
    return ad.concat([sg - s_d, v, d], axis=-1)


def head(model: GridModel, raw, s_d) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    sg = bounded_sigmoid(raw[..., 0:2], model.sg_min, model.sg_max)
    v = bounded_sigmoid(raw[..., 2:3], model.v_min[:, None], model.v_max[:, None])
    r = model.reference_bus
    d = raw[..., 3:4] - raw[..., r:r + 1, 3:4]
    return np.concatenate([sg - s_d, v, d], axis=-1)


def gnn_forward(params: GnnParams, model: GridModel, s_d) -> np.ndarray:
    """Bus state ``[p, q, v, delta]`` for demand ``s_d`` of shape ``(..., N, 2)``."""
    s_d = np.asarray(s_d, dtype=float)
    z = build_input(model, s_d)
    cfg = params.config
    for layer, taps in enumerate(params.taps):
        z = graph_filter(model.gso, z, taps)
        if layer < cfg.L - 1:
            z = np.maximum(z, 0.0) if cfg.hidden_nonlinearity == "relu" else np.tanh(z)
    return head(model, z, s_d)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(params: GnnParams, model: GridModel, path, extra: dict | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "gso": model.fingerprint(),
        "layers": [
            [{"shape": list(h.shape), "data": h.ravel().tolist()} for h in layer]
            for layer in params.taps
        ],
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path, model: GridModel | None = None) -> GnnParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    config = GnnConfig(**doc["config"])
    if model is not None:
        fp = model.fingerprint()
        if doc["gso"]["case_name"] != fp["case_name"]:
            raise ValueError(f"checkpoint was trained on {doc['gso']['case_name']!r}, not {fp['case_name']!r}")
    taps = [[np.array(h["data"], dtype=float).reshape(h["shape"]) for h in layer] for layer in doc["layers"]]
    return GnnParams(config, taps)
