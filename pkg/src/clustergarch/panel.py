"""Return panels: CSV ingestion (long or wide), sector sidecars, run configs
and report serialization."""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import corrparam as cp
from . import distributions as dk
from . import scores as sc
from .errors import IngestError, InvalidSpec

LONG_HEADER = ["date", "ticker", "return"]


@dataclass(frozen=True)
class ReturnPanel:
    dates: tuple[str, ...]
    tickers: tuple[str, ...]
    returns: np.ndarray
    sectors: tuple[str, ...] | None = None

    @property
    def T(self) -> int:
        return len(self.dates)

    @property
    def n(self) -> int:
        return len(self.tickers)

    def with_sectors(self, mapping: dict[str, str]) -> "ReturnPanel":
        missing = [t for t in self.tickers if t not in mapping]
        if missing:
            raise IngestError(f"no sector for tickers {missing}", cells=[("sector", t) for t in missing])
        return ReturnPanel(self.dates, self.tickers, self.returns, tuple(mapping[t] for t in self.tickers))

    def grouped(self) -> tuple["ReturnPanel", cp.BlockSpec]:
        """Columns reordered so sectors are contiguous (sectors sorted by name,
        tickers keep their order within a sector)."""
        if self.sectors is None:
            raise InvalidSpec("panel has no sector labels")
        names = sorted(set(self.sectors))
        order = [i for s in names for i, t in enumerate(self.sectors) if t == s]
        sizes = tuple(sum(1 for t in self.sectors if t == s) for s in names)
        panel = ReturnPanel(self.dates, tuple(self.tickers[i] for i in order), self.returns[:, order],
                            tuple(self.sectors[i] for i in order))
        return panel, cp.BlockSpec(sizes)

    def split(self, last_train_date: str) -> tuple["ReturnPanel", "ReturnPanel"]:
        cut = sum(1 for d in self.dates if d <= last_train_date)
        if cut == 0 or cut == self.T:
            raise InvalidSpec(f"split date {last_train_date} leaves an empty sample")
        return (ReturnPanel(self.dates[:cut], self.tickers, self.returns[:cut], self.sectors),
                ReturnPanel(self.dates[cut:], self.tickers, self.returns[cut:], self.sectors))


def _iso(value: str, row: int) -> str:
    try:
        return _dt.date.fromisoformat(value.strip()).isoformat()
    except ValueError as exc:
        raise IngestError(f"row {row}: {value!r} is not an ISO-8601 date") from exc


def _number(value: str, where) -> float:
    try:
        out = float(value)
    except ValueError as exc:
        raise IngestError(f"{where}: {value!r} is not a number", cells=[where]) from exc
    if not np.isfinite(out):
        raise IngestError(f"{where}: non-finite return", cells=[where])
    return out


def _read_rows(path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if any(cell.strip() for cell in r)]
    if not rows:
        raise IngestError(f"{path} is empty")
    return rows


def ingest(path) -> ReturnPanel:
    """Read a ``date,ticker,return`` (long) or ``date,T1,...,Tn`` (wide) CSV.

    Long files give tickers in sorted order; wide files keep the header order.
    """
    rows = _read_rows(path)
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise IngestError(f"{path} has a header but no data")
    if [h.lower() for h in header] == LONG_HEADER:
        return _ingest_long(body)
    if header[0].lower() != "date" or len(header) < 2:
        raise IngestError("header must be date,ticker,return or date,<tickers...>")
    return _ingest_wide(header[1:], body)


def _ingest_long(body) -> ReturnPanel:
    cells: dict[tuple[str, str], float] = {}
    seen: set[str] = set()
    dupes = []
    for i, row in enumerate(body, start=2):
        if len(row) != 3:
            raise IngestError(f"row {i}: expected 3 fields, got {len(row)}")
        date, ticker = _iso(row[0], i), row[1].strip()
        key = (date, ticker)
        if key in cells:
            dupes.append(key)
            continue
        if not row[2].strip():
            raise IngestError(f"row {i}: missing return", cells=[key])
        cells[key] = _number(row[2], key)
        if ticker not in seen:
            seen.add(ticker)
    if dupes:
        raise IngestError(f"duplicate rows for {dupes}", cells=dupes)
    dates = sorted({d for d, _ in cells})
    tickers = sorted(seen)
    missing = [(d, t) for d in dates for t in tickers if (d, t) not in cells]
    if missing:
        raise IngestError(f"{len(missing)} missing cells, first {missing[:5]}", cells=missing)
    ret = np.array([[cells[(d, t)] for t in tickers] for d in dates])
    return ReturnPanel(tuple(dates), tuple(tickers), ret)


def _ingest_wide(tickers, body) -> ReturnPanel:
    if len(set(tickers)) != len(tickers):
        raise IngestError("duplicate ticker columns")
    by_date: dict[str, list[float]] = {}
    missing, dupes = [], []
    for i, row in enumerate(body, start=2):
        date = _iso(row[0], i)
        if date in by_date:
            dupes.append((date,))
            continue
        vals = []
        for j, t in enumerate(tickers):
            cell = row[j + 1].strip() if j + 1 < len(row) else ""
            if not cell:
                missing.append((date, t))
                vals.append(np.nan)
            else:
                vals.append(_number(cell, (date, t)))
        by_date[date] = vals
    if dupes:
        raise IngestError(f"duplicate dates {dupes}", cells=dupes)
    if missing:
        raise IngestError(f"{len(missing)} missing cells, first {missing[:5]}", cells=missing)
    dates = sorted(by_date)
    return ReturnPanel(tuple(dates), tuple(tickers), np.array([by_date[d] for d in dates]))


def read_sectors(path) -> dict[str, str]:
    rows = _read_rows(path)
    if [h.strip().lower() for h in rows[0]] != ["ticker", "sector"]:
        raise IngestError("sector file header must be ticker,sector")
    out = {}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise IngestError(f"sector row {i}: expected 2 fields")
        t = row[0].strip()
        if t in out:
            raise IngestError(f"ticker {t} listed twice in sector file", cells=[("sector", t)])
        out[t] = row[1].strip()
    return out


def write_wide(path, panel: ReturnPanel) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *panel.tickers])
        for d, row in zip(panel.dates, panel.returns):
            w.writerow([d, *(fmt(v) for v in row)])


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in r])


# -------------------------------------------------------------------- config


@dataclass
class OptimizerConfig:
    n_starts: int = 3
    jitter: float = 0.1
    explore_iter: int = 4
    maxiter: int = 400
    gtol: float = 1e-5


@dataclass
class RunConfig:
    """Every setting of a run. Unknown keys are rejected."""

    model: str = "score"
    structure: str = "block"
    distribution: str = dk.GAUSSIAN
    dofs: list[float] | None = None
    partition: list[int] | None = None
    block_sizes: list[int] | None = None
    targeting: bool = False
    scalar: bool = False
    estimate_dofs: bool = True
    dcc_variant: str = "scalar"
    egarch: bool = False
    standard_errors: bool = True
    decompose: bool = False
    train_end: str | None = None
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    params: dict = field(default_factory=dict)
    simulate_T: int = 1000
    density: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.model not in ("score", "dcc"):
            raise InvalidSpec(f"model must be 'score' or 'dcc', got {self.model!r}")
        if self.structure not in ("block", "general"):
            raise InvalidSpec(f"structure must be 'block' or 'general', got {self.structure!r}")
        if self.distribution not in dk.TAGS:
            raise InvalidSpec(f"distribution must be one of {dk.TAGS}")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidSpec(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)

    def block_spec(self, panel: ReturnPanel | None = None) -> cp.BlockSpec | None:
        if self.block_sizes is not None:
            spec = cp.BlockSpec(tuple(self.block_sizes))
            if panel is not None and spec.n != panel.n:
                raise InvalidSpec(f"block sizes sum to {spec.n}, panel has {panel.n} series")
            return spec
        return None

    def model_kind(self, block: cp.BlockSpec | None, n: int, structure: str | None = None) -> sc.ModelKind:
        k = dk.n_dofs(self.distribution, n, block, self.partition)
        dofs = tuple(self.dofs) if self.dofs is not None else (8.0,) * k
        if len(dofs) != k:
            raise InvalidSpec(f"{self.distribution} needs {k} degrees of freedom, config gives {len(dofs)}")
        part = tuple(self.partition) if self.partition is not None else None
        if part is not None and sum(part) != n:
            raise InvalidSpec(f"partition sums to {sum(part)}, panel has {n} series")
        dist = dk.ModelDistribution(self.distribution, dofs, part)
        return sc.ModelKind(dist, block, structure or self.structure)


def dump_json(path, payload: dict) -> None:
    """JSON with shortest round-trip float representation."""
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
