"""Loading, cleaning, label mapping and splitting of biography corpora."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadRatios,
    EmptyInput,
    GenderCardinality,
    MalformedRow,
    SchemaMismatch,
    TooFewRecords,
)

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = ("bio", "gender", "profession")
SPLIT_NAMES = ("train", "dev", "test")

_NON_ALPHA = re.compile(r"[^a-z]+")


@dataclass(frozen=True)
class RawRecord:
    bio: str
    gender: str
    profession: str


@dataclass(frozen=True)
class Record:
    text: str
    gender_id: int
    profession_id: int

    def label(self, task: str) -> int:
        if task == "gender":
            return self.gender_id
        if task == "profession":
            return self.profession_id
        raise ValueError(f"unknown task {task!r}")


@dataclass
class LoadResult:
    """Outcome of :func:`load_corpus`.

    ``dropped_count`` includes malformed rows, so that
    ``len(records) + dropped_count == raw_row_count`` always holds.
    """

    records: list[RawRecord]
    raw_row_count: int
    dropped_count: int
    malformed: list[MalformedRow] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass
class LabelMap:
    name_to_id: dict[str, int]
    id_to_name: dict[int, str]

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "LabelMap":
        ordered = sorted(set(names))
        return cls(
            name_to_id={n: i for i, n in enumerate(ordered)},
            id_to_name={i: n for i, n in enumerate(ordered)},
        )

    def __len__(self):
        return len(self.name_to_id)

    def encode(self, name: str) -> int:
        return self.name_to_id[name]

    def decode(self, idx: int) -> str:
        return self.id_to_name[idx]

    def to_dict(self) -> dict:
        return {"names": [self.id_to_name[i] for i in range(len(self))]}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelMap":
        names = list(d["names"])
        return cls(
            name_to_id={n: i for i, n in enumerate(names)},
            id_to_name={i: n for i, n in enumerate(names)},
        )


@dataclass
class SplitSet:
    train: list[Record]
    dev: list[Record]
    test: list[Record]
    seed: int | None = None

    def items(self):
        return (("train", self.train), ("dev", self.dev), ("test", self.test))

    def __len__(self):
        return len(self.train) + len(self.dev) + len(self.test)


@dataclass
class DistributionStats:
    """Counts and percentages per split.

    Split keys are ``train``, ``dev``, ``test`` and ``all``.  Label keys are
    label names when label maps were supplied, integer ids otherwise.
    """

    gender_counts: dict
    gender_percent: dict
    profession_counts: dict
    profession_gender_ratio: dict


def normalize_header(name: str) -> str:
    return name.strip().lower()


def normalize_text(raw: str) -> str:
    """Lowercase, replace every non ``[a-z]`` character by a space, collapse
    runs of spaces and trim.

    >>> normalize_text("Dr. Jane O'Neil, MD (2024)!")
    'dr jane o neil md'
    """
    return _NON_ALPHA.sub(" ", raw.lower()).strip()


def _detect_format(path: Path) -> str:
    if path.suffix.lower() in (".jsonl", ".ndjson", ".json"):
        return "jsonl"
    return "csv"


def _clean(value) -> str:
    if value is None:
        return ""
    return str(value).strip()


def load_corpus(path, schema: Sequence[str] = DEFAULT_SCHEMA, fmt: str | None = None) -> LoadResult:
    """Read a CSV or line-delimited JSON corpus.

    Header names are lowercased and stripped before they are matched against
    ``schema`` (bio, gender, profession column names). Rows with any of the
    three fields missing or blank are dropped; unparseable rows are skipped and
    reported in ``LoadResult.malformed``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    schema = tuple(normalize_header(s) for s in schema)
    if len(schema) != 3:
        raise SchemaMismatch("schema must name exactly three columns (bio, gender, profession)")
    fmt = fmt or _detect_format(path)
    if fmt == "csv":
        rows = _iter_csv(path, schema)
    elif fmt == "jsonl":
        rows = _iter_jsonl(path, schema)
    else:
        raise ValueError(f"unknown format {fmt!r}")

    records, malformed = [], []
    raw = dropped = 0
    for item in rows:
        raw += 1
        if isinstance(item, MalformedRow):
            malformed.append(item)
            dropped += 1
            continue
        bio, gender, profession = (_clean(v) for v in item)
        if not bio or not gender or not profession:
            dropped += 1
            continue
        records.append(RawRecord(bio, gender, profession))
    if malformed:
        logger.warning("%s: skipped %d malformed row(s)", path, len(malformed))
    return LoadResult(records=records, raw_row_count=raw, dropped_count=dropped, malformed=malformed)


def _iter_csv(path: Path, schema):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path}: empty file, no header row") from None
        header = [normalize_header(h) for h in header]
        missing = [c for c in schema if c not in header]
        if missing:
            raise SchemaMismatch(f"{path}: missing column(s) {missing}; found {header}")
        idx = [header.index(c) for c in schema]
        width = len(header)
        while True:
            try:
                row = next(reader)
            except StopIteration:
                return
            except csv.Error as exc:
                yield MalformedRow(reader.line_num, str(exc))
                continue
            if not row:
                continue
            if len(row) != width:
                yield MalformedRow(reader.line_num, f"expected {width} fields, got {len(row)}")
                continue
            yield tuple(row[i] for i in idx)


def _iter_jsonl(path: Path, schema):
    seen_any = False
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                yield MalformedRow(line_no, f"invalid JSON: {exc.msg}")
                continue
            if not isinstance(obj, dict):
                yield MalformedRow(line_no, "not a JSON object")
                continue
            obj = {normalize_header(str(k)): v for k, v in obj.items()}
            if not seen_any:
                missing = [c for c in schema if c not in obj]
                if missing:
                    raise SchemaMismatch(f"{path}: missing field(s) {missing} in first object")
                seen_any = True
            yield tuple(obj.get(c) for c in schema)


def build_label_maps(records: Sequence[RawRecord]) -> tuple[LabelMap, LabelMap]:
    """Return ``(gender_map, profession_map)`` with ids in lexicographic order."""
    if not records:
        raise EmptyInput("cannot build label maps from an empty record list")
    genders = {r.gender for r in records}
    if len(genders) != 2:
        raise GenderCardinality(f"expected exactly 2 gender labels, found {sorted(genders)}")
    return LabelMap.from_names(genders), LabelMap.from_names(r.profession for r in records)


def encode_records(raw: Iterable[RawRecord], gender_map: LabelMap, profession_map: LabelMap) -> list[Record]:
    return [
        Record(normalize_text(r.bio), gender_map.encode(r.gender), profession_map.encode(r.profession))
        for r in raw
    ]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(records: Sequence[Record], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitSet:
    """Seeded uniform shuffle followed by contiguous slicing (no stratification)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(records)
    if n < 10:
        raise TooFewRecords(f"need at least 10 records to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = _round_half_up(n * ratios[0])
    n_dev = _round_half_up(n * ratios[1])
    if n_train + n_dev > n:
        n_dev = n - n_train
    shuffled = [records[i] for i in perm]
    return SplitSet(
        train=shuffled[:n_train],
        dev=shuffled[n_train:n_train + n_dev],
        test=shuffled[n_train + n_dev:],
        seed=seed,
    )


def load_presplit(paths: Sequence, schema: Sequence[str] = DEFAULT_SCHEMA):
    """Load a corpus that is already divided into train/dev/test files.

    Label maps are built over the union of the three files. Returns
    ``(SplitSet, gender_map, profession_map)``.
    """
    if len(paths) != 3:
        raise ValueError("expected three paths: train, dev, test")
    loaded = [load_corpus(p, schema).records for p in paths]
    gender_map, profession_map = build_label_maps([r for part in loaded for r in part])
    train, dev, test = (encode_records(part, gender_map, profession_map) for part in loaded)
    return SplitSet(train, dev, test, seed=None), gender_map, profession_map


def _percentages(counts: dict) -> dict:
    total = sum(counts.values())
    return {k: (100.0 * v / total if total else 0.0) for k, v in counts.items()}


def compute_distribution_stats(splits: SplitSet, gender_map: LabelMap | None = None,
                               profession_map: LabelMap | None = None) -> DistributionStats:
    gname = gender_map.decode if gender_map else (lambda i: i)
    pname = profession_map.decode if profession_map else (lambda i: i)

    parts = dict(splits.items())
    parts["all"] = splits.train + splits.dev + splits.test

    gender_counts, gender_percent, profession_counts = {}, {}, {}
    for name, recs in parts.items():
        gc = Counter(r.gender_id for r in recs)
        pc = Counter(r.profession_id for r in recs)
        gender_counts[name] = {gname(k): gc[k] for k in sorted(gc)}
        gender_percent[name] = _percentages(gender_counts[name])
        profession_counts[name] = {pname(k): pc[k] for k in sorted(pc)}

    joint = Counter((r.profession_id, r.gender_id) for r in parts["all"])
    genders = sorted({g for _, g in joint})
    ratio = {}
    for p in sorted({p for p, _ in joint}):
        total = sum(joint[(p, g)] for g in genders)
        ratio[pname(p)] = {gname(g): joint[(p, g)] / total for g in genders}
    return DistributionStats(gender_counts, gender_percent, profession_counts, ratio)
