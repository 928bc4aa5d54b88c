"""Parsing and validation of historical allocation logs.

A log file is a UTF-8 CSV with header::

    portfolio_id,horizon_id,epoch,asset_id,budget,spend,return

Any further columns are per-row covariates, except ``obs``, which is an
optional replicate sub-index: when present, several rows may share one
(epoch, asset) cell and the uniqueness key becomes
(portfolio_id, horizon_id, epoch, asset_id, obs).

Each (portfolio_id, horizon_id) pair becomes one :class:`PortfolioLog`.
Cell-level matrices (spend, return, budget) are means over the replicates
of that cell, so a file with one row per cell maps to its values verbatim.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable, Sequence, Union

import numpy as np

from regret_audit.errors import (
    DuplicateKey,
    EpochOutOfRange,
    IncompleteGrid,
    InvalidHyper,
    MalformedRow,
    NegativeSpend,
)

REQUIRED_COLUMNS = ("portfolio_id", "horizon_id", "epoch", "asset_id", "budget", "spend", "return")
OBS_COLUMN = "obs"


@dataclass(frozen=True)
class LogRecord:
    portfolio_id: str
    horizon_id: str
    epoch: int
    asset_id: str
    budget: float
    spend: float
    return_value: float
    covariates: dict = field(default_factory=dict)
    obs: int | None = None


@dataclass(frozen=True)
class PortfolioLog:
    """Validated epoch x asset grid for one portfolio-horizon pair.

    ``records`` are ordered by (epoch, asset position, obs). Matrices are
    indexed ``[epoch - 1, asset_index]``.
    """

    portfolio_id: str
    horizon_id: str
    assets: tuple[str, ...]
    records: tuple[LogRecord, ...]

    @property
    def key(self) -> tuple[str, str]:
        return (self.portfolio_id, self.horizon_id)

    @cached_property
    def n_epochs(self) -> int:
        return max(r.epoch for r in self.records)

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def has_replicates(self) -> bool:
        return any(r.obs is not None for r in self.records)

    @cached_property
    def _cells(self) -> dict[tuple[int, int], list[LogRecord]]:
        index = {a: k for k, a in enumerate(self.assets)}
        cells: dict[tuple[int, int], list[LogRecord]] = {}
        for r in self.records:
            cells.setdefault((r.epoch - 1, index[r.asset_id]), []).append(r)
        return cells

    def _cell_mean(self, attr: str) -> np.ndarray:
        out = np.empty((self.n_epochs, self.n_assets))
        for (e, i), recs in self._cells.items():
            out[e, i] = math.fsum(getattr(r, attr) for r in recs) / len(recs)
        return out

    @cached_property
    def spend_matrix(self) -> np.ndarray:
        return self._cell_mean("spend")

    @cached_property
    def return_matrix(self) -> np.ndarray:
        return self._cell_mean("return_value")

    @cached_property
    def budget_matrix(self) -> np.ndarray:
        return self._cell_mean("budget")

    def cell_observations(self, epoch: int, asset_index: int) -> tuple[np.ndarray, np.ndarray]:
        """(spends, returns) of every replicate in a cell; ``epoch`` is 1-based."""
        recs = self._cells[(epoch - 1, asset_index)]
        return (np.array([r.spend for r in recs]), np.array([r.return_value for r in recs]))

    def asset_index(self, asset_id: str) -> int:
        return self.assets.index(asset_id)


def _parse_float(value: str, column: str, line: int) -> float:
    try:
        x = float(value)
    except ValueError:
        raise MalformedRow(f"line {line}: column {column!r} is not a number: {value!r}") from None
    if not math.isfinite(x):
        raise MalformedRow(f"line {line}: column {column!r} must be finite, got {value!r}")
    return x


def _parse_int(value: str, column: str, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise MalformedRow(f"line {line}: column {column!r} is not an integer: {value!r}") from None


def _read_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def parse_log(source: Union[bytes, str, IO], format: str = "csv") -> list[PortfolioLog]:
    """Parse a log into one :class:`PortfolioLog` per (portfolio_id, horizon_id).

    ``source`` may be bytes, text, or a file object. Pairs are returned in
    lexicographic key order.
    """
    if format != "csv":
        raise ValueError(f"unsupported log format {format!r}")
    text = _read_text(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MalformedRow("line 1: empty input, header expected") from None
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise MalformedRow(f"line 1: header lacks required columns {missing}")
    if len(set(header)) != len(header):
        raise MalformedRow("line 1: duplicate column names in header")
    col = {name: k for k, name in enumerate(header)}
    has_obs = OBS_COLUMN in col
    cov_cols = [h for h in header if h not in REQUIRED_COLUMNS and h != OBS_COLUMN]

    groups: dict[tuple[str, str], list[tuple[int, LogRecord]]] = {}
    seen: dict[tuple, int] = {}
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MalformedRow(f"line {line}: expected {len(header)} fields, got {len(row)}")
        get = lambda c: row[col[c]].strip()  # noqa: E731
        pid, hid, aid = get("portfolio_id"), get("horizon_id"), get("asset_id")
        if not pid or not hid or not aid:
            raise MalformedRow(f"line {line}: empty identifier")
        epoch = _parse_int(get("epoch"), "epoch", line)
        if epoch < 1:
            raise MalformedRow(f"line {line}: epoch must be >= 1, got {epoch}")
        budget = _parse_float(get("budget"), "budget", line)
        spend = _parse_float(get("spend"), "spend", line)
        ret = _parse_float(get("return"), "return", line)
        if spend < 0:
            raise NegativeSpend(f"line {line}: spend {spend} < 0 (portfolio {pid}, epoch {epoch}, asset {aid})")
        if budget < 0:
            raise NegativeSpend(f"line {line}: budget {budget} < 0 (portfolio {pid}, epoch {epoch}, asset {aid})")
        obs = _parse_int(get(OBS_COLUMN), OBS_COLUMN, line) if has_obs else None
        covariates = {c: _parse_float(get(c), c, line) for c in cov_cols if get(c) != ""}
        key = (pid, hid, epoch, aid, obs)
        if key in seen:
            raise DuplicateKey(
                f"line {line}: duplicate key (portfolio {pid}, horizon {hid}, epoch {epoch}, asset {aid}"
                + (f", obs {obs}" if has_obs else "")
                + f"), first seen on line {seen[key]}"
            )
        seen[key] = line
        rec = LogRecord(pid, hid, epoch, aid, budget, spend, ret, covariates, obs)
        groups.setdefault((pid, hid), []).append((line, rec))

    return [_build_log(key, groups[key]) for key in sorted(groups)]


def _build_log(key: tuple[str, str], rows: list[tuple[int, LogRecord]]) -> PortfolioLog:
    assets: list[str] = []
    for _, r in rows:
        if r.asset_id not in assets:
            assets.append(r.asset_id)
    epochs = {r.epoch for _, r in rows}
    n_epochs = max(epochs)
    if n_epochs < 2:
        raise IncompleteGrid(f"portfolio {key[0]}, horizon {key[1]}: need at least 2 epochs, found {n_epochs}")
    present = {(r.epoch, r.asset_id) for _, r in rows}
    for e in range(1, n_epochs + 1):
        for a in assets:
            if (e, a) not in present:
                raise IncompleteGrid(f"portfolio {key[0]}, horizon {key[1]}: missing cell (epoch {e}, asset {a})")
    position = {a: k for k, a in enumerate(assets)}
    ordered = sorted(
        (r for _, r in rows),
        key=lambda r: (r.epoch, position[r.asset_id], -1 if r.obs is None else r.obs),
    )
    return PortfolioLog(key[0], key[1], tuple(assets), tuple(ordered))


def read_log(path: Union[str, Path]) -> list[PortfolioLog]:
    return parse_log(Path(path).read_bytes())


def serialize_logs(logs: Sequence[PortfolioLog]) -> str:
    """Write logs back out in the dialect :func:`parse_log` reads.

    Numbers use ``repr`` so every float survives the round trip exactly.
    """
    with_obs = any(log.has_replicates for log in logs)
    cov_keys = sorted({k for log in logs for r in log.records for k in r.covariates})
    header = list(REQUIRED_COLUMNS) + ([OBS_COLUMN] if with_obs else []) + cov_keys
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for log in logs:
        for r in log.records:
            row = [r.portfolio_id, r.horizon_id, r.epoch, r.asset_id, repr(r.budget), repr(r.spend), repr(r.return_value)]
            if with_obs:
                row.append("" if r.obs is None else r.obs)
            row.extend(repr(r.covariates[k]) if k in r.covariates else "" for k in cov_keys)
            writer.writerow(row)
    return buf.getvalue()


def realized_total_budget(log: PortfolioLog) -> float:
    """Total realized spend over the horizon; the budget every oracle must spend."""
    return float(math.fsum(log.spend_matrix.ravel()))


def compute_aux_weights(distances: Iterable[float], alpha_aux: float, tau_w: float) -> list[float]:
    """Exponential down-weighting ``alpha_aux * exp(-|d| / tau_w)`` for auxiliary epochs."""
    if not (0.0 < alpha_aux <= 1.0) or not math.isfinite(alpha_aux):
        raise InvalidHyper(f"alpha_aux must lie in (0, 1], got {alpha_aux}")
    if not (tau_w > 0.0) or not math.isfinite(tau_w):
        raise InvalidHyper(f"tau_w must be > 0, got {tau_w}")
    return [alpha_aux * math.exp(-abs(d) / tau_w) for d in distances]


@dataclass(frozen=True)
class AuditWindow:
    """Weighted training data for one (asset, core epoch) fit.

    Core observations carry weight 1; auxiliary ones the exponential weight
    of their epoch distance.
    """

    asset_id: str
    core_epoch: int
    aux_epochs: tuple[tuple[int, int], ...]
    spends: np.ndarray
    returns: np.ndarray
    weights: np.ndarray
    is_core: np.ndarray

    @property
    def core_spends(self) -> np.ndarray:
        return self.spends[self.is_core]

    @property
    def core_returns(self) -> np.ndarray:
        return self.returns[self.is_core]

    @property
    def s_lo(self) -> float:
        return float(self.core_spends.min())

    @property
    def s_hi(self) -> float:
        return float(self.core_spends.max())

    @property
    def s_hi_all(self) -> float:
        return float(self.spends.max())


def slice_epoch_window(
    log: PortfolioLog,
    asset_index: int,
    core_epoch: int,
    radius: int,
    alpha_aux: float,
    tau_w: float,
) -> AuditWindow:
    """Collect core-epoch data plus down-weighted neighbours within ``radius`` epochs.

    The window is clipped at the horizon boundaries.
    """
    E = log.n_epochs
    if not 1 <= core_epoch <= E:
        raise EpochOutOfRange(f"epoch {core_epoch} outside 1..{E}")
    if radius < 0:
        raise InvalidHyper(f"window radius must be >= 0, got {radius}")
    if not 0 <= asset_index < log.n_assets:
        raise IndexError(f"asset index {asset_index} outside 0..{log.n_assets - 1}")

    aux = [(e, abs(e - core_epoch)) for e in range(max(1, core_epoch - radius), min(E, core_epoch + radius) + 1)
           if e != core_epoch]
    aux_w = compute_aux_weights([d for _, d in aux], alpha_aux, tau_w)

    spends, returns, weights, core = [], [], [], []
    s, r = log.cell_observations(core_epoch, asset_index)
    spends.append(s), returns.append(r), weights.append(np.ones(len(s))), core.append(np.ones(len(s), bool))
    for (e, _), w in zip(aux, aux_w):
        s, r = log.cell_observations(e, asset_index)
        spends.append(s), returns.append(r), weights.append(np.full(len(s), w)), core.append(np.zeros(len(s), bool))

    return AuditWindow(
        asset_id=log.assets[asset_index],
        core_epoch=core_epoch,
        aux_epochs=tuple(aux),
        spends=np.concatenate(spends),
        returns=np.concatenate(returns),
        weights=np.concatenate(weights),
        is_core=np.concatenate(core),
    )
