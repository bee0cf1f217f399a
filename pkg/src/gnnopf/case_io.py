"""MATPOWER case parsing, per-unit normalization and load-sample datasets."""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_FORMAT_VERSION = 1


class CaseParseError(ValueError):
    """The case text is malformed or a required section is missing."""


class CaseValidationError(ValueError):
    """The case parsed but its records are inconsistent."""


class UnsupportedFeatureError(ValueError):
    """The case uses a MATPOWER feature this package does not model."""


class DatasetError(ValueError):
    """A dataset file is corrupt, truncated or of an unknown version."""


class BusType(enum.IntEnum):
    PQ = 1
    PV = 2
    REFERENCE = 3
    ISOLATED = 4


@dataclass(frozen=True)
class CostPolynomial:
    """Polynomial cost, highest degree first, taking active power in p.u."""

    coefficients: tuple[float, ...]

    def __post_init__(self):
        if len(self.coefficients) == 0:
            raise CaseValidationError("cost polynomial needs at least one coefficient")

    def __call__(self, p):
        return np.polyval(np.asarray(self.coefficients, dtype=float), p)

    def derivative(self, p):
        return np.polyval(np.polyder(np.asarray(self.coefficients, dtype=float)), p)


@dataclass(frozen=True)
class BusRecord:
    bus_id: int
    bus_type: BusType
    demand_ref: complex
    shunt_admittance: complex
    v_min: float
    v_max: float


@dataclass(frozen=True)
class GenRecord:
    gen_id: int
    bus_id: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    status: bool
    cost: CostPolynomial | None


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    series_impedance: complex
    total_charging: float
    tap_ratio: float
    phase_shift: float
    rate_max: float | None
    ang_min: float | None
    ang_max: float | None
    status: bool

    @property
    def series_admittance(self) -> complex:
        return 1.0 / self.series_impedance

    @property
    def complex_tap(self) -> complex:
        return self.tap_ratio * complex(math.cos(self.phase_shift), math.sin(self.phase_shift))


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_mva: float
    buses: tuple[BusRecord, ...]
    generators: tuple[GenRecord, ...]
    branches: tuple[BranchRecord, ...]

    @property
    def bus_ids(self) -> list[int]:
        return [b.bus_id for b in self.buses]

    def bus_index(self) -> dict[int, int]:
        return {b.bus_id: i for i, b in enumerate(self.buses)}

    def reference_demand(self) -> np.ndarray:
        """Total reference demand per bus as an N x 2 [Re, Im] matrix."""
        return np.array([[b.demand_ref.real, b.demand_ref.imag] for b in self.buses], dtype=float)

    @property
    def has_costs(self) -> bool:
        return all(g.cost is not None for g in self.generators)


# --------------------------------------------------------------------------- parsing

_COMMENT = re.compile(r"%.*")
_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[\]]+?)\s*;")
_MATRIX = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)
_FUNC = re.compile(r"^\s*function\s+(?:\w+\s*=\s*)?(\w+)", re.M)


def _strip_comments(text: str) -> str:
    return "\n".join(_COMMENT.sub("", line) for line in text.splitlines())


def _parse_matrix(name: str, body: str) -> np.ndarray:
    rows = []
    for chunk in re.split(r"[;\n]", body):
        chunk = chunk.strip().replace(",", " ")
        if not chunk:
            continue
        try:
            rows.append([float(tok) for tok in chunk.split()])
        except ValueError as exc:
            raise CaseParseError(f"non-numeric entry in {name} section: {chunk!r}") from exc
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise CaseParseError(f"ragged rows in {name} section")
    return np.array(rows, dtype=float)


def _sections(text: str) -> tuple[str | None, dict[str, float], dict[str, np.ndarray]]:
    clean = _strip_comments(text)
    m = _FUNC.search(clean)
    name = m.group(1) if m else None
    matrices = {k: _parse_matrix(k, body) for k, body in _MATRIX.findall(clean)}
    scalars = {}
    for key, raw in _SCALAR.findall(clean):
        raw = raw.strip().strip("'\"")
        try:
            scalars[key] = float(raw)
        except ValueError:
            continue
    return name, scalars, matrices


def _angle_bounds(lo_deg: float, hi_deg: float) -> tuple[float | None, float | None]:
    # both 0, or the full +-360 sweep, means no limit
    if (lo_deg == 0 and hi_deg == 0) or (lo_deg <= -360 and hi_deg >= 360):
        return None, None
    lo = math.radians(lo_deg) if lo_deg > -360 else None
    hi = math.radians(hi_deg) if hi_deg < 360 else None
    return lo, hi


def _cost_row(row: np.ndarray, base_mva: float, gen_id: int) -> CostPolynomial:
    model = int(row[0])
    if model == 1:
        raise UnsupportedFeatureError(
            f"piecewise-linear cost (model 1) on generator {gen_id} is not supported; "
            "only polynomial costs (model 2)"
        )
    if model != 2:
        raise CaseParseError(f"unknown cost model {model} on generator {gen_id}")
    n = int(row[3])
    coeffs = row[4:4 + n]
    if len(coeffs) != n:
        raise CaseParseError(f"gencost row for generator {gen_id} has fewer than {n} coefficients")
    # c(P_MW) = sum a_k P_MW^k with P_MW = base * P_pu  =>  a_k * base^k on the p.u. polynomial
    degrees = np.arange(n - 1, -1, -1)
    return CostPolynomial(tuple(float(a) * base_mva**int(k) for a, k in zip(coeffs, degrees)))


def parse_matpower(text: str, name: str | None = None) -> NetworkCase:
    """Parse MATPOWER ``.m`` case text into a per-unit :class:`NetworkCase`.

    Powers are divided by ``baseMVA``, shunts become complex admittances, angles
    become radians and cost polynomials are rescaled to take p.u. active power
    while returning the original currency. Out-of-service generators and branches
    are dropped.
    """
    fname, scalars, mats = _sections(text)
    if "baseMVA" not in scalars:
        raise CaseParseError("missing baseMVA section")
    for section in ("bus", "gen", "branch"):
        if section not in mats or mats[section].size == 0:
            raise CaseParseError(f"missing {section} section")
    base = scalars["baseMVA"]
    if not base > 0:
        raise CaseValidationError(f"baseMVA must be positive, got {base}")
    bus_m, gen_m, br_m = mats["bus"], mats["gen"], mats["branch"]
    if bus_m.shape[1] < 13:
        raise CaseParseError(f"bus section has {bus_m.shape[1]} columns, need 13")
    if gen_m.shape[1] < 10:
        raise CaseParseError(f"gen section has {gen_m.shape[1]} columns, need 10")
    if br_m.shape[1] < 11:
        raise CaseParseError(f"branch section has {br_m.shape[1]} columns, need 11")

    buses = []
    for row in bus_m:
        bt = int(row[1])
        if bt not in (1, 2, 3, 4):
            raise CaseValidationError(f"bus {int(row[0])} has unknown type {bt}")
        v_max, v_min = float(row[11]), float(row[12])
        if not (0 < v_min <= v_max):
            raise CaseValidationError(f"bus {int(row[0])} has invalid voltage bounds [{v_min}, {v_max}]")
        buses.append(BusRecord(
            bus_id=int(row[0]),
            bus_type=BusType(bt),
            demand_ref=complex(row[2], row[3]) / base,
            shunt_admittance=complex(row[4], row[5]) / base,
            v_min=v_min,
            v_max=v_max,
        ))
    ids = [b.bus_id for b in buses]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise CaseValidationError(f"duplicate bus ids: {dup}")
    known = set(ids)

    cost_m = mats.get("gencost")
    costs: list[CostPolynomial | None] = [None] * len(gen_m)
    if cost_m is not None and cost_m.size:
        if len(cost_m) < len(gen_m):
            raise CaseParseError(f"gencost has {len(cost_m)} rows for {len(gen_m)} generators")
        # rows beyond the first ng are reactive costs and are ignored
        costs = [_cost_row(cost_m[k], base, k + 1) for k in range(len(gen_m))]

    gens = []
    for k, row in enumerate(gen_m):
        if row[7] <= 0:
            continue
        rec = GenRecord(
            gen_id=k + 1,
            bus_id=int(row[0]),
            p_min=float(row[9]) / base,
            p_max=float(row[8]) / base,
            q_min=float(row[4]) / base,
            q_max=float(row[3]) / base,
            status=True,
            cost=costs[k],
        )
        gens.append(rec)

    branches = []
    for row in br_m:
        if row[10] <= 0:
            continue
        angmin, angmax = (row[11], row[12]) if br_m.shape[1] >= 13 else (0.0, 0.0)
        lo, hi = _angle_bounds(float(angmin), float(angmax))
        rate = float(row[5])
        branches.append(BranchRecord(
            from_bus=int(row[0]),
            to_bus=int(row[1]),
            series_impedance=complex(row[2], row[3]),
            total_charging=float(row[4]),
            tap_ratio=float(row[8]) if row[8] != 0 else 1.0,
            phase_shift=math.radians(float(row[9])),
            rate_max=rate / base if rate > 0 else None,
            ang_min=lo,
            ang_max=hi,
            status=True,
        ))

    case = NetworkCase(
        name=name or fname or "case",
        base_mva=base,
        buses=tuple(buses),
        generators=tuple(gens),
        branches=tuple(branches),
    )
    validate_case(case, known)
    return case


def validate_case(case: NetworkCase, known: set[int] | None = None) -> None:
    known = set(case.bus_ids) if known is None else known
    bad = [f"gen {g.gen_id} -> bus {g.bus_id}" for g in case.generators if g.bus_id not in known]
    bad += [
        f"branch {br.from_bus}-{br.to_bus}"
        for br in case.branches
        if br.from_bus not in known or br.to_bus not in known
    ]
    if bad:
        raise CaseValidationError("dangling bus reference: " + ", ".join(bad))
    for g in case.generators:
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseValidationError(f"gen {g.gen_id} has inverted bounds")
    for br in case.branches:
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} is a self loop")
        if br.series_impedance == 0:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")


def load_case(path) -> NetworkCase:
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


def bundled_case(name: str) -> NetworkCase:
    """Load one of the MATPOWER cases shipped with the package (case9, case30, case118)."""
    return load_case(bundled_case_path(name))


def bundled_case_path(name: str) -> Path:
    path = Path(__file__).parent / "data" / f"{name}.m"
    if not path.exists():
        raise FileNotFoundError(f"no bundled case named {name!r}")
    return path


def case_digest(case: NetworkCase) -> str:
    """SHA-256 of the parsed network data; the case name does not enter it."""
    doc = dataclasses.asdict(case)
    doc.pop("name")
    text = json.dumps(doc, sort_keys=True, default=repr)
    return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------- datasets

@dataclass
class LoadDataset:
    case_name: str
    seed: int
    samples: list[np.ndarray]
    low: float = 0.9
    high: float = 1.1
    n_buses: int | None = None
    extra: dict = field(default_factory=dict)
    case_digest: str | None = None

    def __len__(self):
        return len(self.samples)

    def as_array(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.n_buses or 0, 2))
        return np.stack(self.samples)

    def subset(self, idx) -> LoadDataset:
        return LoadDataset(self.case_name, self.seed, [self.samples[i] for i in idx],
                           self.low, self.high, self.n_buses, dict(self.extra), self.case_digest)


def sample_loads(case: NetworkCase, n: int, seed: int, low: float = 0.9, high: float = 1.1) -> LoadDataset:
    """Draw ``n`` demand matrices uniformly in ``[low*ref, high*ref]`` element-wise."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (0 <= low <= high):
        raise ValueError(f"need 0 <= low <= high, got low={low}, high={high}")
    ref = case.reference_demand()
    rng = np.random.default_rng(seed)
    scale = rng.uniform(low, high, size=(n,) + ref.shape)
    data = scale * ref
    return LoadDataset(case.name, seed, list(data), low, high, len(case.buses),
                       case_digest=case_digest(case))


def save_dataset(ds: LoadDataset, path) -> None:
    """Write ``manifest.json`` and ``samples.csv`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n_buses = ds.n_buses if ds.n_buses is not None else (ds.samples[0].shape[0] if ds.samples else 0)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "case_name": ds.case_name,
        "seed": ds.seed,
        "low": ds.low,
        "high": ds.high,
        "n_samples": len(ds.samples),
        "n_buses": n_buses,
        **({"case_digest": ds.case_digest} if ds.case_digest else {}),
        **({"extra": ds.extra} if ds.extra else {}),
    }
    with open(path / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "bus_id", "p_demand", "q_demand"])
        for sid, s in enumerate(ds.samples):
            for b in range(s.shape[0]):
                # repr of a float round-trips exactly
                w.writerow([sid, b, repr(float(s[b, 0])), repr(float(s[b, 1]))])
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(path, expected_case: str | None = None) -> LoadDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(
            f"dataset format version {manifest.get('format_version')!r} is not supported "
            f"(expected {DATASET_FORMAT_VERSION})"
        )
    if expected_case is not None and manifest["case_name"] != expected_case:
        warnings.warn(
            f"dataset was sampled from case {manifest['case_name']!r}, not {expected_case!r}",
            stacklevel=2,
        )
    n, nb = int(manifest["n_samples"]), int(manifest["n_buses"])
    data = np.zeros((n, nb, 2))
    seen = 0
    with open(path / "samples.csv", newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["sample_id", "bus_id", "p_demand", "q_demand"]:
            raise DatasetError(f"unexpected CSV header {header!r}")
        for row in r:
            if len(row) != 4:
                raise DatasetError(f"truncated row {seen + 2} in samples.csv")
            sid, b = int(row[0]), int(row[1])
            if not (0 <= sid < n and 0 <= b < nb):
                raise DatasetError(f"row {seen + 2} indexes outside the declared shape")
            data[sid, b] = float(row[2]), float(row[3])
            seen += 1
    if seen != n * nb:
        raise DatasetError(f"truncated dataset: expected {n * nb} rows, found {seen}")
    return LoadDataset(manifest["case_name"], int(manifest["seed"]), list(data),
                       float(manifest["low"]), float(manifest["high"]), nb,
                       manifest.get("extra", {}), manifest.get("case_digest"))
