"""Panel CSV ingestion and empirical joint-choice tensors.

Input format: long CSV with header ``unit_id,cell_id,t,choice``, UTF-8,
``#``-prefixed comment lines ignored.  Every unit must supply one choice for
each period ``1..T`` of its cell; periods are inferred from the data and must
be contiguous.  Counts stay integral until the final division so tensors built
from the same file are bit-identical across platforms.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError
from .model import JointChoiceTensor, _default_periods

__all__ = [
    "PanelDataset",
    "CellTensorSet",
    "PanelReport",
    "parse_panel_csv",
    "empirical_tensor",
    "build_cell_tensors",
    "validate_panel",
]


@dataclass(frozen=True)
class PanelDataset:
    """Immutable panel of per-unit choice sequences with covariate cells.

    Attributes
    ----------
    Y : int
        Number of alternatives; every choice lies in ``1..Y``.
    T : int
        Number of periods; every unit has exactly ``T`` choices.
    unit_ids, cell_ids : tuple[str, ...]
        Parallel to the rows of ``choices``.
    choices : numpy.ndarray
        Shape ``(n, T)`` integer array of 1-based alternatives.
    """

    Y: int
    T: int
    unit_ids: tuple[str, ...]
    cell_ids: tuple[str, ...]
    choices: np.ndarray

    def __post_init__(self) -> None:
        choices = np.array(self.choices, dtype=np.int16, copy=True)
        choices.setflags(write=False)
        object.__setattr__(self, "choices", choices)
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "cell_ids", tuple(self.cell_ids))
        n = choices.shape[0]
        if choices.ndim != 2 or choices.shape[1] != self.T:
            raise ValueError(f"choices must be (n, {self.T})")
        if len(self.unit_ids) != n or len(self.cell_ids) != n:
            raise ValueError("unit_ids/cell_ids must match the number of rows")
        if n and (choices.min() < 1 or choices.max() > self.Y):
            raise ValueError(f"choices must lie in 1..{self.Y}")
        seen: set[tuple[str, str]] = set()
        for u, c in zip(self.unit_ids, self.cell_ids):
            key = (c, u)
            if key in seen:
                raise ValueError(f"duplicate unit_id {u!r} within cell {c!r}")
            seen.add(key)

    @property
    def n(self) -> int:
        return self.choices.shape[0]

    @property
    def records(self) -> tuple[tuple[str, str, tuple[int, ...]], ...]:
        return tuple(
            (u, c, tuple(int(v) for v in row))
            for u, c, row in zip(self.unit_ids, self.cell_ids, self.choices)
        )

    def cells(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.cell_ids)))

    def cell_choices(self, cell_id: str) -> np.ndarray:
        keep = np.array([c == cell_id for c in self.cell_ids], dtype=bool)
        return self.choices[keep]

    def to_csv(self, stream) -> None:
        writer = csv.writer(stream)
        writer.writerow(["unit_id", "cell_id", "t", "choice"])
        for u, c, row in zip(self.unit_ids, self.cell_ids, self.choices):
            for t, y in enumerate(row, start=1):
                writer.writerow([u, c, t, int(y)])


def parse_panel_csv(stream, Y: int | None = None) -> PanelDataset:
    """Parse a long-format panel CSV into a validated :class:`PanelDataset`.

    ``Y`` bounds the choice codes; when omitted it is inferred as the largest
    observed choice.  Errors carry 1-based line numbers of the offending row.
    """
    if isinstance(stream, (str, bytes)):
        stream = io.StringIO(stream if isinstance(stream, str) else stream.decode("utf-8"))

    header = None
    # (cell, unit) -> {t: (choice, line)}
    units: dict[tuple[str, str], dict[int, tuple[int, int]]] = {}
    order: list[tuple[str, str]] = []
    reader = csv.reader(stream)
    for lineno, row in enumerate(reader, start=1):
        if not row or (row[0].lstrip().startswith("#")):
            continue
        cells = [c.strip() for c in row]
        if header is None:
            if cells != ["unit_id", "cell_id", "t", "choice"]:
                raise ParseError("expected header 'unit_id,cell_id,t,choice'", line=lineno)
            header = cells
            continue
        if len(cells) != 4:
            raise ParseError(f"expected 4 fields, got {len(cells)}", line=lineno)
        unit, cell, t_str, y_str = cells
        if not unit:
            raise ParseError("empty unit_id", line=lineno)
        try:
            t = int(t_str)
        except ValueError:
            raise ParseError(f"period {t_str!r} is not an integer", line=lineno) from None
        try:
            y = int(y_str)
        except ValueError:
            raise ParseError(f"choice {y_str!r} is not an integer", line=lineno) from None
        if t < 1:
            raise ParseError(f"period {t} must be >= 1", line=lineno)
        if y < 1 or (Y is not None and y > Y):
            raise ParseError(f"choice out of range: {y} not in 1..{Y if Y is not None else '...'}", line=lineno)
        key = (cell, unit)
        if key not in units:
            units[key] = {}
            order.append(key)
        if t in units[key]:
            raise ParseError(f"duplicate period {t} for unit {unit!r} in cell {cell!r}", line=lineno)
        units[key][t] = (y, lineno)
    if header is None:
        raise ParseError("empty input: no header found")
    if not units:
        return PanelDataset(Y=Y or 1, T=1, unit_ids=(), cell_ids=(), choices=np.zeros((0, 1), dtype=np.int16))

    T = max(max(ts) for ts in units.values())
    rows = []
    unit_ids = []
    cell_ids = []
    for cell, unit in order:
        ts = units[(cell, unit)]
        for t in range(1, T + 1):
            if t not in ts:
                first_line = min(line for _, line in ts.values())
                raise ParseError(f"missing period {t} for unit {unit!r} in cell {cell!r}", line=first_line)
        rows.append([ts[t][0] for t in range(1, T + 1)])
        unit_ids.append(unit)
        cell_ids.append(cell)
    y_max = max(max(r) for r in rows)
    y_bound = Y if Y is not None else y_max
    return PanelDataset(
        Y=y_bound,
        T=T,
        unit_ids=tuple(unit_ids),
        cell_ids=tuple(cell_ids),
        choices=np.array(rows, dtype=np.int16),
    )


def _flat_codes(choices: np.ndarray, group: Sequence[int], Y: int) -> np.ndarray:
    """Mixed-radix code of each unit's choices over the given periods."""
    code = np.zeros(choices.shape[0], dtype=np.int64)
    for t in group:
        code = code * Y + (choices[:, t - 1].astype(np.int64) - 1)
    return code


def empirical_tensor(
    data: PanelDataset,
    cell: str,
    grouping: tuple[int, int, int] = (1, 1, 1),
    period_assignment: Sequence[Sequence[int]] | None = None,
) -> JointChoiceTensor:
    """Frequency estimator of the grouped joint choice distribution in a cell.

    Each entry is (count of units with matching grouped choices) / (cell units).
    """
    sub = data.cell_choices(cell)
    if sub.shape[0] == 0:
        raise ValueError(f"cell {cell!r} is empty")
    if period_assignment is None:
        periods = _default_periods(tuple(grouping), data.T)
    else:
        periods = tuple(tuple(int(t) for t in g) for g in period_assignment)
    Y = data.Y
    dims = tuple(Y ** len(g) for g in periods)
    codes = [_flat_codes(sub, g, Y) for g in periods]
    flat = (codes[0] * dims[1] + codes[1]) * dims[2] + codes[2]
    counts = np.bincount(flat, minlength=dims[0] * dims[1] * dims[2]).reshape(dims)
    probs = counts / sub.shape[0]
    return JointChoiceTensor(Y, tuple(grouping), periods, probs)


@dataclass(frozen=True)
class CellTensorSet:
    """Tensors for one covariate cell, keyed by (grouping, periods)."""

    cell_id: str
    n_cell: int
    tensors: dict

    def get(self, grouping, period_assignment=None):
        key = (tuple(grouping), _freeze_periods(grouping, period_assignment, self._T))
        return self.tensors[key]

    @property
    def _T(self) -> int:
        any_tensor = next(iter(self.tensors.values()))
        return max(t for g in any_tensor.periods for t in g)


def _freeze_periods(grouping, period_assignment, T):
    if period_assignment is None:
        return _default_periods(tuple(grouping), T)
    return tuple(tuple(int(t) for t in g) for g in period_assignment)


def build_cell_tensors(
    data: PanelDataset,
    groupings: Iterable[tuple[tuple[int, int, int], Sequence[Sequence[int]] | None]] = (((1, 1, 1), None),),
) -> dict[str, CellTensorSet]:
    """Build the requested tensors for every cell of the panel."""
    out = {}
    for cell in data.cells():
        n_cell = int(data.cell_choices(cell).shape[0])
        tensors = {}
        for grouping, assignment in groupings:
            key = (tuple(grouping), _freeze_periods(grouping, assignment, data.T))
            tensors[key] = empirical_tensor(data, cell, grouping, assignment)
        out[cell] = CellTensorSet(cell_id=cell, n_cell=n_cell, tensors=tensors)
    return out


@dataclass(frozen=True)
class PanelReport:
    """Per-cell unit counts, choice frequencies, and small-cell flags."""

    cell_counts: dict
    choice_frequencies: dict  # cell -> (Y,) array of pooled per-period frequencies
    never_observed: dict  # cell -> tuple of alternatives never chosen
    flagged_cells: tuple[str, ...]
    min_units: int


def validate_panel(data: PanelDataset, min_units: int = 200) -> PanelReport:
    """Summarize cell sizes and observed alternatives; flag thin cells."""
    cell_counts = {}
    freqs = {}
    never = {}
    flagged = []
    for cell in data.cells():
        sub = data.cell_choices(cell)
        cell_counts[cell] = int(sub.shape[0])
        counts = np.bincount(sub.ravel(), minlength=data.Y + 1)[1:]
        total = counts.sum()
        freqs[cell] = counts / total if total else counts.astype(float)
        never[cell] = tuple(int(y + 1) for y in np.flatnonzero(counts == 0))
        if sub.shape[0] < min_units:
            flagged.append(cell)
    return PanelReport(
        cell_counts=cell_counts,
        choice_frequencies=freqs,
        never_observed=never,
        flagged_cells=tuple(flagged),
        min_units=min_units,
    )
