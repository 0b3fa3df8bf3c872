"""Per-cluster diffusion measure store.

Holds one scalar per (subject, fiber cluster) for a given diffusion measure,
tracks missing clusters, imputes them, and lays the values out either as a
flat vector (right hemisphere, left hemisphere, commissural) or as a
``3 x n_atlas`` grid whose rows are the three regions and whose columns are
atlas cluster numbers.

File formats (all UTF-8 CSV):

    atlas layout   cluster_id,category,atlas_index     (category: right|left|comm)
    measure file   subject_id,<cluster_id_1>,...,<cluster_id_N>
    label file     subject_id,sex,age

Cluster ids look like ``c0007_left``. An empty cell or ``NaN`` in a measure
file means the cluster is missing for that subject.
"""

from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

N_ATLAS_CLUSTERS = 800
N_BILATERAL = 716
N_COMMISSURAL = 84
N_FEATURES = 2 * N_BILATERAL + N_COMMISSURAL  # 1516

AGE_MEAN = 28.71
AGE_SD = 3.672
AGE_RANGE = (22.0, 37.0)


class SchemaError(ValueError):
    """Input file violates its schema. ``violations`` lists every problem found."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        head = "; ".join(self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(head + more)


# --------------------------------------------------------------------------
# Measure identifiers
# --------------------------------------------------------------------------


class Quantity(enum.Enum):
    FA = "FA"
    MD = "MD"
    NUM_FIBERS = "Num_Fibers"
    NUM_POINTS = "Num_Points"


class Statistic(enum.Enum):
    MIN = "min"
    MAX = "max"
    MEAN = "mean"


@dataclass(frozen=True)
class MeasureId:
    """One of the 14 per-cluster measures, e.g. ``FA1-mean`` or ``Num_Fibers``."""

    quantity: Quantity
    tensor_index: int | None = None
    statistic: Statistic | None = None

    def __post_init__(self):
        if self.quantity in (Quantity.FA, Quantity.MD):
            if self.tensor_index not in (1, 2) or self.statistic is None:
                raise ValueError(f"{self.quantity.value} needs tensor 1|2 and a statistic")
        elif self.tensor_index is not None or self.statistic is not None:
            raise ValueError(f"{self.quantity.value} takes no tensor index or statistic")

    @property
    def name(self) -> str:
        if self.statistic is None:
            return self.quantity.value
        return f"{self.quantity.value}{self.tensor_index}-{self.statistic.value}"

    @property
    def number(self) -> int:
        """1-based position in the canonical measure list."""
        return ALL_MEASURES.index(self) + 1

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "MeasureId":
        """Parse ``FA1-mean``, ``md2_max``, ``Num_Fibers`` or a 1-based number like ``13``."""
        s = text.strip()
        if s.isdigit():
            n = int(s)
            if not 1 <= n <= len(ALL_MEASURES):
                raise ValueError(f"measure number {n} out of range 1..{len(ALL_MEASURES)}")
            return ALL_MEASURES[n - 1]
        key = s.lower().replace("_", "").replace("-", "")
        for m in ALL_MEASURES:
            if m.name.lower().replace("_", "").replace("-", "") == key:
                return m
        raise ValueError(f"unknown measure {text!r}")


ALL_MEASURES: tuple[MeasureId, ...] = tuple(
    [
        MeasureId(q, t, s)
        for q in (Quantity.FA, Quantity.MD)
        for t in (1, 2)
        for s in (Statistic.MIN, Statistic.MAX, Statistic.MEAN)
    ]
    + [MeasureId(Quantity.NUM_FIBERS), MeasureId(Quantity.NUM_POINTS)]
)


def parse_measure_list(text: str) -> list[MeasureId]:
    """Comma-separated measure names or numbers; ``all`` expands to all 14."""
    if text.strip().lower() == "all":
        return list(ALL_MEASURES)
    out = [MeasureId.parse(tok) for tok in text.split(",") if tok.strip()]
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate measure in {text!r}")
    return out


# --------------------------------------------------------------------------
# Atlas layout
# --------------------------------------------------------------------------


class Category(enum.IntEnum):
    """Region category; the value is the row in the 2D arrangement."""

    RIGHT = 0
    LEFT = 1
    COMMISSURAL = 2

    @property
    def token(self) -> str:
        return _CATEGORY_TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "Category":
        for cat, tok in _CATEGORY_TOKENS.items():
            if tok == token.strip().lower():
                return cat
        raise ValueError(f"unknown category {token!r} (expected right|left|comm)")


_CATEGORY_TOKENS = {Category.RIGHT: "right", Category.LEFT: "left", Category.COMMISSURAL: "comm"}
_CLUSTER_ID_RE = re.compile(r"^c(\d{4})_(right|left|comm)$")


def cluster_id(category: Category, atlas_index: int) -> str:
    return f"c{atlas_index:04d}_{category.token}"


@dataclass(frozen=True)
class ClusterEntry:
    cluster_id: str
    category: Category
    atlas_index: int


class AtlasLayout:
    """Mapping from cluster id to (category, atlas index), fixing the feature order.

    Entries are stored in canonical order: RIGHT by ascending atlas index, then
    LEFT, then COMMISSURAL. Position ``i`` of a 1D feature vector is entry ``i``.
    """

    def __init__(self, entries: Iterable[ClusterEntry]):
        entries = list(entries)
        problems = _layout_problems(entries)
        if problems:
            raise SchemaError(problems)
        self.entries: tuple[ClusterEntry, ...] = tuple(
            sorted(entries, key=lambda e: (int(e.category), e.atlas_index))
        )
        self._position = {e.cluster_id: i for i, e in enumerate(self.entries)}
        rows = np.array([int(e.category) for e in self.entries], dtype=np.intp)
        cols = np.array([e.atlas_index - 1 for e in self.entries], dtype=np.intp)
        rows.setflags(write=False)
        cols.setflags(write=False)
        self.rows, self.cols = rows, cols

    @classmethod
    def from_counts(cls, n_bilateral: int, n_commissural: int) -> "AtlasLayout":
        """Layout with bilateral indices ``1..n_bilateral`` followed by commissural ones."""
        entries = []
        for i in range(1, n_bilateral + 1):
            entries.append(ClusterEntry(cluster_id(Category.RIGHT, i), Category.RIGHT, i))
            entries.append(ClusterEntry(cluster_id(Category.LEFT, i), Category.LEFT, i))
        for i in range(n_bilateral + 1, n_bilateral + n_commissural + 1):
            entries.append(ClusterEntry(cluster_id(Category.COMMISSURAL, i), Category.COMMISSURAL, i))
        return cls(entries)

    @classmethod
    def full(cls) -> "AtlasLayout":
        """800-cluster layout; commissural clusters take atlas indices 717..800.

        Which atlas indices are commissural depends on the atlas in use, so real
        data should come with its own layout file.
        """
        return cls.from_counts(N_BILATERAL, N_COMMISSURAL)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, AtlasLayout) and self.entries == other.entries

    def __hash__(self) -> int:
        return hash(self.entries)

    def __contains__(self, cid: str) -> bool:
        return cid in self._position

    @property
    def cluster_ids(self) -> list[str]:
        return [e.cluster_id for e in self.entries]

    @property
    def n_bilateral(self) -> int:
        return sum(e.category is Category.RIGHT for e in self.entries)

    @property
    def n_commissural(self) -> int:
        return sum(e.category is Category.COMMISSURAL for e in self.entries)

    @property
    def width(self) -> int:
        """Number of columns in the 2D arrangement (largest atlas index)."""
        return max(e.atlas_index for e in self.entries)

    def position(self, cid: str) -> int:
        return self._position[cid]

    def strict_problems(self) -> list[str]:
        """Deviations from the 800-cluster atlas (716 bilateral + 84 commissural)."""
        problems = []
        n_idx = len({e.atlas_index for e in self.entries})
        if n_idx != N_ATLAS_CLUSTERS:
            problems.append(f"expected {N_ATLAS_CLUSTERS} atlas indices, found {n_idx}")
        if self.n_bilateral != N_BILATERAL:
            problems.append(f"expected {N_BILATERAL} bilateral clusters, found {self.n_bilateral}")
        if self.n_commissural != N_COMMISSURAL:
            problems.append(f"expected {N_COMMISSURAL} commissural clusters, found {self.n_commissural}")
        if len(self) != N_FEATURES:
            problems.append(f"expected {N_FEATURES} layout entries, found {len(self)}")
        if self.width > N_ATLAS_CLUSTERS:
            problems.append(f"atlas index {self.width} exceeds {N_ATLAS_CLUSTERS}")
        return problems


def _layout_problems(entries: Sequence[ClusterEntry]) -> list[str]:
    problems = []
    if not entries:
        return ["layout is empty"]
    seen_ids: set[str] = set()
    by_index: dict[int, list[Category]] = {}
    for e in entries:
        if e.cluster_id in seen_ids:
            problems.append(f"duplicate cluster_id {e.cluster_id}")
        seen_ids.add(e.cluster_id)
        if e.atlas_index < 1:
            problems.append(f"{e.cluster_id}: atlas_index must be >= 1")
        by_index.setdefault(e.atlas_index, []).append(e.category)
    for idx, cats in sorted(by_index.items()):
        if sorted(cats) == [Category.RIGHT, Category.LEFT]:
            continue
        if cats == [Category.COMMISSURAL]:
            continue
        names = ",".join(c.token for c in sorted(cats))
        problems.append(
            f"atlas_index {idx}: categories [{names}]; need exactly right+left or exactly one comm"
        )
    return problems


def parse_layout(stream: TextIO) -> AtlasLayout:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["cluster_id", "category", "atlas_index"]:
        raise SchemaError([f"layout header must be cluster_id,category,atlas_index; got {header}"])
    entries, problems = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            problems.append(f"layout line {lineno}: expected 3 fields, got {len(row)}")
            continue
        cid, cat, idx = (c.strip() for c in row)
        try:
            entry = ClusterEntry(cid, Category.from_token(cat), int(idx))
        except ValueError as exc:
            problems.append(f"layout line {lineno}: {exc}")
            continue
        m = _CLUSTER_ID_RE.match(cid)
        if m and (int(m.group(1)) != entry.atlas_index or m.group(2) != entry.category.token):
            problems.append(f"layout line {lineno}: {cid} disagrees with category/atlas_index")
        entries.append(entry)
    if problems:
        raise SchemaError(problems)
    return AtlasLayout(entries)


def write_layout(layout: AtlasLayout, stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["cluster_id", "category", "atlas_index"])
    for e in layout.entries:
        w.writerow([e.cluster_id, e.category.token, e.atlas_index])


# --------------------------------------------------------------------------
# Measure tables
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClusterMeasureTable:
    """Values of one measure for every (subject, cluster); NaN marks MISSING.

    ``values`` has shape ``(n_subjects, len(layout))`` with columns in the
    layout's canonical order. The array is read-only.
    """

    subjects: tuple[str, ...]
    measure: MeasureId
    layout: AtlasLayout
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(self.subjects), len(self.layout)):
            raise ValueError(
                f"values shape {values.shape} != ({len(self.subjects)}, {len(self.layout)})"
            )
        if len(set(self.subjects)) != len(self.subjects):
            raise ValueError("duplicate subject ids")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_row", {s: i for i, s in enumerate(self.subjects)})

    def row(self, subject_id: str) -> int:
        try:
            return self._row[subject_id]
        except KeyError:
            raise KeyError(f"subject {subject_id!r} not in table for {self.measure}") from None

    def value(self, subject_id: str, cid: str) -> float:
        """The stored value, or NaN for MISSING."""
        return float(self.values[self.row(subject_id), self.layout.position(cid)])

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.values).sum())

    def missing_per_cluster(self) -> np.ndarray:
        return np.isnan(self.values).sum(axis=0)

    def rows_for(self, subject_ids: Sequence[str]) -> np.ndarray:
        """Canonical-order values for the given subjects, shape (n, len(layout))."""
        return self.values[[self.row(s) for s in subject_ids]]

    def equals(self, other: "ClusterMeasureTable") -> bool:
        return (
            self.subjects == other.subjects
            and self.measure == other.measure
            and self.layout == other.layout
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


def _parse_cell(cell: str) -> float:
    s = cell.strip()
    if s == "" or s.lower() == "nan":
        return math.nan
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("non-finite value")
    return v


def parse_measure_table(stream: TextIO, layout: AtlasLayout, measure: MeasureId) -> ClusterMeasureTable:
    """Read a wide measure CSV. Clusters in the layout but absent from the file are MISSING.

    All violations are collected and raised together as a :class:`SchemaError`.
    """
    reader = csv.reader(stream)
    header = next(reader, None)
    if not header or header[0].strip() != "subject_id":
        raise SchemaError([f"{measure}: header must start with subject_id"])
    columns = [h.strip() for h in header[1:]]
    problems = []
    positions = []
    seen = set()
    for j, col in enumerate(columns):
        if col in seen:
            problems.append(f"{measure}: duplicate cluster column {col}")
        seen.add(col)
        if col not in layout:
            problems.append(f"{measure}: unknown cluster column {col}")
            positions.append(-1)
        else:
            positions.append(layout.position(col))
    if problems:
        raise SchemaError(problems)

    subjects: list[str] = []
    seen_subjects: set[str] = set()
    rows: list[np.ndarray] = []
    pos = np.array(positions, dtype=np.intp)
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        sid = rec[0].strip()
        if len(rec) != len(header):
            problems.append(f"{measure} line {lineno} ({sid}): expected {len(header)} fields, got {len(rec)}")
            continue
        if sid in seen_subjects:
            problems.append(f"{measure} line {lineno}: duplicate subject_id {sid}")
            continue
        row = np.full(len(layout), np.nan)
        vals = np.empty(len(columns))
        for j, cell in enumerate(rec[1:]):
            try:
                vals[j] = _parse_cell(cell)
            except ValueError:
                problems.append(f"{measure}: non-numeric value {cell!r} at ({sid}, {columns[j]})")
                vals[j] = np.nan
        row[pos] = vals
        subjects.append(sid)
        seen_subjects.add(sid)
        rows.append(row)
    if problems:
        raise SchemaError(problems)
    values = np.vstack(rows) if rows else np.empty((0, len(layout)))
    return ClusterMeasureTable(tuple(subjects), measure, layout, values)


def format_value(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_measure_table(table: ClusterMeasureTable, stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["subject_id"] + table.layout.cluster_ids)
    for sid, row in zip(table.subjects, table.values):
        w.writerow([sid] + [format_value(v) for v in row])


def impute_missing(table: ClusterMeasureTable) -> ClusterMeasureTable:
    """Replace every MISSING value with 0.0; present values are untouched."""
    if table.n_missing == 0:
        return table
    return ClusterMeasureTable(
        table.subjects, table.measure, table.layout, np.nan_to_num(table.values, nan=0.0)
    )


# --------------------------------------------------------------------------
# Feature arrangements
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    measure: MeasureId
    subject_id: str


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    measure: MeasureId
    subject_id: str


def _check_ready(table: ClusterMeasureTable, measure: MeasureId | None) -> None:
    if measure is not None and measure != table.measure:
        raise ValueError(f"table holds {table.measure}, not {measure}")
    if table.n_missing:
        raise ValueError(f"table for {table.measure} has {table.n_missing} MISSING values; impute first")


def arrange_1d(table: ClusterMeasureTable, subject_id: str, measure: MeasureId | None = None) -> FeatureVector:
    """Right clusters, then left, then commissural, each by ascending atlas index."""
    _check_ready(table, measure)
    values = table.values[table.row(subject_id)].copy()
    values.setflags(write=False)
    return FeatureVector(values, table.measure, subject_id)


def grid_from_vectors(vectors: np.ndarray, layout: AtlasLayout) -> np.ndarray:
    """Scatter canonical-order vectors ``(..., len(layout))`` into ``(..., 3, width)`` grids."""
    vectors = np.asarray(vectors, dtype=np.float64)
    out = np.zeros(vectors.shape[:-1] + (3, layout.width))
    out[..., layout.rows, layout.cols] = vectors
    return out


def arrange_2d(table: ClusterMeasureTable, subject_id: str, measure: MeasureId | None = None) -> FeatureMatrix:
    """3 x width grid: row 0 right, row 1 left, row 2 commissural; column = atlas index - 1.

    Cells with no cluster in the layout hold 0.
    """
    _check_ready(table, measure)
    grid = grid_from_vectors(table.values[table.row(subject_id)], table.layout)
    grid.setflags(write=False)
    return FeatureMatrix(grid, table.measure, subject_id)


# --------------------------------------------------------------------------
# Labels
# --------------------------------------------------------------------------

SEX_CLASSES = ("F", "M")  # class index order, lexicographic


@dataclass(frozen=True)
class LabelTable:
    rows: Mapping[str, tuple[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        problems = []
        for sid, (sex, age) in self.rows.items():
            if sex not in SEX_CLASSES:
                problems.append(f"labels: subject {sid} has sex {sex!r} (expected M|F)")
            if not (math.isfinite(age) and age > 0):
                problems.append(f"labels: subject {sid} has age {age!r} (must be > 0)")
        if problems:
            raise SchemaError(problems)

    def __contains__(self, sid: str) -> bool:
        return sid in self.rows

    def __len__(self) -> int:
        return len(self.rows)

    def sex_index(self, subject_ids: Sequence[str]) -> np.ndarray:
        return np.array([SEX_CLASSES.index(self.rows[s][0]) for s in subject_ids], dtype=np.intp)

    def ages(self, subject_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.rows[s][1] for s in subject_ids], dtype=np.float64)


def parse_labels(stream: TextIO) -> LabelTable:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["subject_id", "sex", "age"]:
        raise SchemaError([f"label header must be subject_id,sex,age; got {header}"])
    rows: dict[str, tuple[str, float]] = {}
    problems = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != 3:
            problems.append(f"labels line {lineno}: expected 3 fields, got {len(rec)}")
            continue
        sid, sex, age = (c.strip() for c in rec)
        if sid in rows:
            problems.append(f"labels line {lineno}: duplicate subject_id {sid}")
            continue
        try:
            rows[sid] = (sex, float(age))
        except ValueError:
            problems.append(f"labels line {lineno}: non-numeric age {age!r}")
    if problems:
        raise SchemaError(problems)
    return LabelTable(rows)


def write_labels(labels: LabelTable, stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["subject_id", "sex", "age"])
    for sid, (sex, age) in labels.rows.items():
        w.writerow([sid, sex, repr(float(age))])



# --------------------------------------------------------------------------
# Data bundles
# --------------------------------------------------------------------------


def bundle_paths(root) -> dict:
    """Standard bundle layout: ``atlas.csv``, ``labels.csv``, ``measures/<name>.csv``."""
    root = Path(root)
    return {"atlas": root / "atlas.csv", "labels": root / "labels.csv", "measures": root / "measures"}


def measure_path(measure_dir, measure: MeasureId):
    return Path(measure_dir) / f"{measure.name}.csv"


def write_bundle(root, tables: Mapping[MeasureId, ClusterMeasureTable], labels: LabelTable) -> None:
    paths = bundle_paths(root)
    paths["measures"].mkdir(parents=True, exist_ok=True)
    layout = next(iter(tables.values())).layout
    with open(paths["atlas"], "w", newline="", encoding="utf-8") as fh:
        write_layout(layout, fh)
    with open(paths["labels"], "w", newline="", encoding="utf-8") as fh:
        write_labels(labels, fh)
    for m, t in tables.items():
        with open(measure_path(paths["measures"], m), "w", newline="", encoding="utf-8") as fh:
            write_measure_table(t, fh)


def read_layout_file(path) -> AtlasLayout:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_layout(fh)


def read_labels_file(path) -> LabelTable:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_labels(fh)


def read_measure_file(path, layout: AtlasLayout, measure: MeasureId) -> ClusterMeasureTable:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_measure_table(fh, layout, measure)
