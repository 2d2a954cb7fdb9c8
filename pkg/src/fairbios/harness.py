"""Experiment grid: tasks x mitigation conditions, result tables and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import classifier, fairmetrics, mitigate
from .corpus import (
    DEFAULT_SCHEMA,
    LabelMap,
    Record,
    SplitSet,
    build_label_maps,
    compute_distribution_stats,
    encode_records,
    load_corpus,
    load_presplit,
    split_dataset,
)
from .errors import DataError, FairBiosError, NonProbabilisticScores, SchemaMismatch
from .fairmetrics import FairnessReport
from .featurize import FeaturizerConfig, featurize_batch, to_csr
from .synthdata import SynthConfig, generate

logger = logging.getLogger(__name__)

TASKS = ("gender", "profession")
CONDITIONS = ("baseline", "oversampling", "loss_weighting", "postproc_eo")
COLUMNS = ("Method", "Feature", "Group", "Accuracy", "Macro-F1", "DPD", "EOD")
METHOD_NAMES = {
    "baseline": "Baseline",
    "oversampling": "Oversampling",
    "loss_weighting": "Loss Weighting",
    "postproc_eo": "Post-proc EO",
}
FEATURE_NAMES = {"gender": "Gender", "profession": "Profession"}
PLACEHOLDER = "—"
SAME_TARGET_CAVEAT = ("gender task: the sensitive attribute equals the target, so each group holds a "
                      "single true class and group rates are partly undefined")


@dataclass
class ExperimentConfig:
    data: str | None = None
    presplit: tuple | None = None
    synth: SynthConfig | None = None
    tasks: tuple = TASKS
    conditions: tuple = CONDITIONS
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    train: classifier.TrainConfig = field(default_factory=classifier.TrainConfig)
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    out_dir: str | None = None
    joint_balance: bool = False
    grid_resolution: int = 101
    schema: tuple = DEFAULT_SCHEMA

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.conditions = tuple(self.conditions)
        if not self.tasks or not self.conditions:
            raise ValueError("need at least one task and one condition")
        bad = [t for t in self.tasks if t not in TASKS] + [c for c in self.conditions if c not in CONDITIONS]
        if bad:
            raise ValueError(f"unknown task/condition {bad}")
        if sum(x is not None for x in (self.data, self.presplit, self.synth)) != 1:
            raise ValueError("exactly one of data, presplit or synth must be given")


@dataclass
class ResultsTable:
    rows: list[FairnessReport]
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)


@dataclass
class PreparedData:
    splits: SplitSet
    gender_map: LabelMap
    profession_map: LabelMap


def cell_seed(master_seed: int, task: str, condition: str) -> int:
    """Per-cell seed: first 8 bytes (little-endian) of BLAKE2b over
    ``"<master>:<task>:<condition>"``, masked to 63 bits."""
    digest = hashlib.blake2b(f"{master_seed}:{task}:{condition}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    if cfg.presplit is not None:
        splits, gmap, pmap = load_presplit(cfg.presplit, cfg.schema)
        return PreparedData(splits, gmap, pmap)
    if cfg.synth is not None:
        corpus = generate(cfg.synth)
        records, gmap, pmap = corpus.records, corpus.gender_map, corpus.profession_map
    else:
        loaded = load_corpus(cfg.data, cfg.schema)
        if loaded.dropped_count:
            logger.info("dropped %d incomplete or malformed rows", loaded.dropped_count)
        gmap, pmap = build_label_maps(loaded.records)
        records = encode_records(loaded.records, gmap, pmap)
    return PreparedData(split_dataset(records, cfg.ratios, cfg.seed), gmap, pmap)


class _FeatureCache:
    """Featurizes each distinct text once and serves row blocks of a CSR matrix."""

    def __init__(self, texts: Sequence[str], fcfg: FeaturizerConfig):
        unique = sorted(set(texts))
        self.row = {t: i for i, t in enumerate(unique)}
        self.matrix = to_csr(featurize_batch(unique, fcfg), fcfg.dim)

    def rows(self, records: Sequence[Record]):
        return self.matrix[[self.row[r.text] for r in records]]


def _labels(records, task):
    attr = "gender_id" if task == "gender" else "profession_id"
    return np.fromiter((getattr(r, attr) for r in records), dtype=np.int64, count=len(records))


def _groups(records):
    return _labels(records, "gender")


def run_cell(prepared: PreparedData, cfg: ExperimentConfig, task: str, condition: str,
             features: _FeatureCache | None = None) -> tuple[FairnessReport, dict]:
    """Run one (task, condition) cell; returns its report and diagnostics."""
    splits = prepared.splits
    features = features or _FeatureCache([r.text for _, part in splits.items() for r in part], cfg.featurizer)
    K = len(prepared.gender_map) if task == "gender" else len(prepared.profession_map)
    seed = cell_seed(cfg.seed, task, condition)

    train_recs = splits.train
    if condition == "oversampling":
        target = "joint" if cfg.joint_balance else task
        train_recs = mitigate.oversample(train_recs, target, seed=seed,
                                         num_classes=None if cfg.joint_balance else K)
    y_train = _labels(train_recs, task)
    weights = mitigate.compute_class_weights(y_train, K) if condition == "loss_weighting" else None
    tcfg = replace(cfg.train, seed=seed)
    model, report = classifier.train(
        (features.rows(train_recs), y_train),
        (features.rows(splits.dev), _labels(splits.dev, task)),
        weights, tcfg, num_classes=K)

    test_probs = classifier.predict_proba(model, features.rows(splits.test))
    y_test, g_test = _labels(splits.test, task), _groups(splits.test)
    diagnostics = {
        "seed": seed,
        "train_size": len(train_recs),
        "best_epoch": report.best_epoch,
        "stopped_early": report.stopped_early,
        "dev_macro_f1": report.dev_macro_f1,
    }
    if condition == "postproc_eo":
        dev_probs = classifier.predict_proba(model, features.rows(splits.dev))
        y_dev, g_dev = _labels(splits.dev, task), _groups(splits.dev)
        policy = mitigate.fit_eo_policy_multiclass(dev_probs, y_dev, g_dev, cfg.grid_resolution)
        y_pred = mitigate.apply_eo_policy_multiclass(policy, test_probs, g_test, seed=seed)
        diagnostics["policy"] = policy.to_dict()
    else:
        y_pred = np.argmax(test_probs, axis=1)

    result = fairmetrics.evaluate(y_test, y_pred, g_test, K, condition, task)
    if task == "gender":
        result.flags = [SAME_TARGET_CAVEAT] + result.flags
    return result, diagnostics


def run_experiments(cfg: ExperimentConfig, prepared: PreparedData | None = None) -> ResultsTable:
    """Run every (task, condition) cell in table order.

    A cell that raises a package error is recorded as failed and the grid
    continues.
    """
    prepared = prepared or prepare_data(cfg)
    splits = prepared.splits
    features = _FeatureCache([r.text for _, part in splits.items() for r in part], cfg.featurizer)
    rows, cells = [], {}
    for task in cfg.tasks:
        for condition in cfg.conditions:
            key = f"{task}/{condition}"
            try:
                result, diag = run_cell(prepared, cfg, task, condition, features)
            except (FairBiosError, ValueError, ArithmeticError) as exc:
                logger.warning("cell %s failed: %s", key, exc)
                result = FairnessReport(condition=condition, task=task, status="failed",
                                        error=f"{type(exc).__name__}: {exc}")
                diag = {"seed": cell_seed(cfg.seed, task, condition)}
            rows.append(result)
            cells[key] = diag
    metadata = {
        "master_seed": cfg.seed,
        "split_sizes": {name: len(part) for name, part in splits.items()},
        "featurizer": asdict(cfg.featurizer),
        "featurizer_hash": cfg.featurizer.fingerprint(),
        "train": asdict(cfg.train),
        "joint_balance": cfg.joint_balance,
        "sensitive_attribute": "gender",
        "cells": cells,
    }
    table = ResultsTable(rows, metadata)
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for fmt in ("csv", "json", "markdown"):
            emit_table(table, fmt, out / f"results.{_EXT[fmt]}")
        emit_distribution_report(splits, out, prepared.gender_map, prepared.profession_map)
    return table


# --------------------------------------------------------------------------
# Output


_EXT = {"csv": "csv", "json": "json", "markdown": "md"}


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return PLACEHOLDER if x is None or math.isnan(x) else f"{x:.3f}"


def table_rows(table: ResultsTable) -> list[list[str]]:
    out = []
    for r in table.rows:
        failed = r.failed
        out.append([
            METHOD_NAMES.get(r.condition, r.condition),
            FEATURE_NAMES.get(r.task, r.task),
            r.group,
            *(PLACEHOLDER if failed else _fmt(v) for v in (r.accuracy, r.macro_f1, r.dpd, r.eod)),
        ])
    return out


def _json_safe(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def render_table(table: ResultsTable, fmt: str) -> str:
    """Render as ``csv``, ``markdown`` (three decimals, fixed column order) or
    ``json`` (full precision, round-trips through :func:`parse_table_json`)."""
    if not table.rows:
        raise ValueError("cannot emit an empty table")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows(table_rows(table))
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "|".join("---" for _ in COLUMNS) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in table_rows(table)]
        return "\n".join(lines) + "\n"
    if fmt == "json":
        doc = {"columns": list(COLUMNS), "rows": [r.to_dict() for r in table.rows], "metadata": table.metadata}
        return json.dumps(_json_safe(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def emit_table(table: ResultsTable, fmt: str, path) -> Path:
    atomic_write(path, render_table(table, fmt))
    return Path(path)


def parse_table_json(text: str) -> ResultsTable:
    doc = json.loads(text)
    if list(doc.get("columns", [])) != list(COLUMNS):
        raise SchemaMismatch("unexpected table columns")
    return ResultsTable([FairnessReport.from_dict(r) for r in doc["rows"]], doc.get("metadata", {}))


def emit_distribution_report(splits: SplitSet, out_dir, gender_map: LabelMap | None = None,
                             profession_map: LabelMap | None = None) -> dict:
    """Write gender and profession distribution tables plus whitespace-separated
    plot-data files. Returns the paths written, keyed by role."""
    out = Path(out_dir)
    stats = compute_distribution_stats(splits, gender_map, profession_map)
    paths = {}

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "gender", "count", "percent"])
    for split, counts in stats.gender_counts.items():
        for g, c in counts.items():
            w.writerow([split, g, c, f"{stats.gender_percent[split][g]:.6f}"])
    paths["gender_table"] = out / "gender_distribution.csv"
    atomic_write(paths["gender_table"], buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "profession", "count"])
    for split, counts in stats.profession_counts.items():
        for p, c in counts.items():
            w.writerow([split, p, c])
    paths["profession_table"] = out / "profession_distribution.csv"
    atomic_write(paths["profession_table"], buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    genders = sorted({g for v in stats.profession_gender_ratio.values() for g in v}, key=str)
    w.writerow(["profession", *(f"frac_{g}" for g in genders)])
    for p, ratio in stats.profession_gender_ratio.items():
        w.writerow([p, *(f"{ratio.get(g, 0.0):.6f}" for g in genders)])
    paths["profession_gender_ratio"] = out / "profession_gender_ratio.csv"
    atomic_write(paths["profession_gender_ratio"], buf.getvalue())

    lines = ["# gender distribution: split gender percent"]
    for split in ("train", "dev", "test"):
        for g, pct in stats.gender_percent[split].items():
            lines.append(f"{split} {g} {pct:.6f}")
    paths["gender_plot"] = out / "plot_gender_distribution.dat"
    atomic_write(paths["gender_plot"], "\n".join(lines) + "\n")

    lines = ["# occupation distribution: split profession count"]
    for split in ("train", "dev", "test"):
        for p, c in sorted(stats.profession_counts[split].items(), key=lambda kv: (-kv[1], str(kv[0]))):
            lines.append(f"{split} {p} {c}")
    paths["profession_plot"] = out / "plot_profession_distribution.dat"
    atomic_write(paths["profession_plot"], "\n".join(lines) + "\n")

    paths["stats_json"] = out / "distribution_stats.json"
    atomic_write(paths["stats_json"], json.dumps(_json_safe(asdict(stats)), indent=2, sort_keys=True) + "\n")
    return paths


# --------------------------------------------------------------------------
# Score files from external models


@dataclass
class ScoreFile:
    y_true: np.ndarray
    group: np.ndarray
    scores: np.ndarray | None
    y_pred: np.ndarray | None
    split: np.ndarray | None

    @property
    def num_classes(self) -> int:
        if self.scores is not None:
            return self.scores.shape[1]
        return int(max(self.y_true.max(), self.y_pred.max())) + 1


def read_score_file(path, num_classes: int | None = None) -> ScoreFile:
    """Parse a CSV with ``y_true``, ``group`` and either ``score_0..score_{K-1}``
    or ``y_pred``; an optional ``split`` column marks rows ``dev`` or ``test``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip().lower() for h in (reader.fieldnames or [])]
        rows = [{k.strip().lower(): v for k, v in row.items()} for row in reader]
    for col in ("y_true", "group"):
        if col not in header:
            raise SchemaMismatch(f"{path}: missing column {col!r}")
    score_cols = sorted((h for h in header if h.startswith("score_")), key=lambda h: int(h[6:]))
    if score_cols and [int(h[6:]) for h in score_cols] != list(range(len(score_cols))):
        raise SchemaMismatch(f"{path}: score columns must be score_0..score_{{K-1}}")
    if not score_cols and "y_pred" not in header:
        raise SchemaMismatch(f"{path}: need score_0..score_{{K-1}} or y_pred columns")
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        y_true = np.array([int(r["y_true"]) for r in rows])
        scores = np.array([[float(r[c]) for c in score_cols] for r in rows]) if score_cols else None
        y_pred = np.array([int(r["y_pred"]) for r in rows]) if not score_cols else None
    except (TypeError, ValueError) as exc:
        raise SchemaMismatch(f"{path}: non-numeric value ({exc})") from None
    group = np.array([r["group"] for r in rows])
    split = np.array([r["split"].strip().lower() for r in rows]) if "split" in header else None
    if scores is not None:
        sums = scores.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
        if len(bad) or (scores < 0).any():
            raise NonProbabilisticScores(
                f"{path}: {len(bad)} row(s) do not sum to 1 (first at data row {bad[0] + 1 if len(bad) else '?'})")
    sf = ScoreFile(y_true, group, scores, y_pred, split)
    K = num_classes or sf.num_classes
    if (y_true < 0).any() or (y_true >= K).any():
        raise DataError(f"{path}: y_true outside [0, {K})")
    return sf


def mitigate_scores(sf: ScoreFile, seed: int = 0, grid_resolution: int = 101):
    """Fit EO thresholds on the dev rows and apply them to the test rows.

    Returns ``(policy, test_mask, y_pred_test)``.
    """
    if sf.scores is None:
        raise SchemaMismatch("EO post-processing needs score columns, not hard labels")
    if sf.split is None:
        raise SchemaMismatch("EO post-processing needs a split column marking dev and test rows")
    dev, test = sf.split == "dev", sf.split == "test"
    if not dev.any() or not test.any():
        raise DataError("split column must mark at least one dev and one test row")
    policy = mitigate.fit_eo_policy_multiclass(sf.scores[dev], sf.y_true[dev], sf.group[dev], grid_resolution)
    pred = mitigate.apply_eo_policy_multiclass(policy, sf.scores[test], sf.group[test], seed=seed)
    return policy, test, pred


def audit_scores(score_file, seed: int = 0, grid_resolution: int = 101,
                 num_classes: int | None = None) -> FairnessReport:
    """Metric suite for an external model's outputs.

    With a ``split`` column and scores, EO thresholds are fitted on dev rows and
    the report covers the post-processed test rows; otherwise the report covers
    every row, predicting the argmax of the scores (or ``y_pred``).
    """
    sf = score_file if isinstance(score_file, ScoreFile) else read_score_file(score_file, num_classes)
    K = num_classes or sf.num_classes
    if sf.scores is not None and sf.split is not None:
        _, test, pred = mitigate_scores(sf, seed, grid_resolution)
        return fairmetrics.evaluate(sf.y_true[test], pred, sf.group[test], K, "postproc_eo", "audit")
    pred = sf.y_pred if sf.scores is None else np.argmax(sf.scores, axis=1)
    return fairmetrics.evaluate(sf.y_true, pred, sf.group, K, "audit", "audit")


def write_score_file(path, y_true, group, scores, split=None) -> None:
    """Write scores in the format read by :func:`read_score_file`."""
    scores = np.asarray(scores)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["y_true", "group"] + [f"score_{k}" for k in range(scores.shape[1])]
    if split is not None:
        header.append("split")
    w.writerow(header)
    for i in range(len(y_true)):
        row = [int(y_true[i]), group[i]] + [repr(float(s)) for s in scores[i]]
        if split is not None:
            row.append(split[i])
        w.writerow(row)
    atomic_write(path, buf.getvalue())
