"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 internal or
numeric error. Settings resolve as command line > ``--config`` file > defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import classifier, harness, mitigate
from .corpus import compute_distribution_stats
from .errors import DataError, FairBiosError, NumericError
from .featurize import FeaturizerConfig
from .harness import ExperimentConfig, atomic_write
from .synthdata import SynthConfig, generate

logger = logging.getLogger("fairbios")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_TRAIN_KEYS = {f.name for f in fields(classifier.TrainConfig)} - {"seed"}
_FEAT_KEYS = {"dim", "ngram_max", "normalize", "hash_seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path) -> dict:
    """Read ``key = value`` lines (``#`` comments allowed); a file starting with
    ``{`` is read as a JSON object instead. Values are parsed as JSON when
    possible, otherwise kept as strings. Keys use ``-`` or ``_`` interchangeably."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            raw[k.strip()] = _parse_value(v.strip())
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _csv_list(value):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return tuple(v.strip() for v in str(value).split(",") if v.strip())


def _settings(args) -> dict:
    """Merge the config file (if any) under explicitly given CLI flags."""
    merged = read_config_file(args.config) if getattr(args, "config", None) else {}
    for k, v in vars(args).items():
        if v is not None and k not in ("command", "config", "func", "verbose"):
            merged[k] = v
    return merged


def _synth_config(s: dict) -> SynthConfig | None:
    overrides = {k[6:]: v for k, v in s.items() if k.startswith("synth_") and k != "synth_config"}
    overrides.update({k[6:]: v for k, v in s.items() if k.startswith("synth.")})
    if s.get("synth_config"):
        base = read_config_file(s["synth_config"])
        base.update(overrides)
        overrides = base
    elif not overrides:
        return None
    overrides.setdefault("seed", s.get("seed", 0))
    return SynthConfig.from_dict(overrides)


def _experiment_config(s: dict, need_data: bool = True) -> ExperimentConfig:
    synth = _synth_config(s)
    presplit = s.get("presplit")
    if presplit is not None:
        presplit = _resolve_presplit(presplit)
    if need_data and sum(x is not None for x in (s.get("data"), presplit, synth)) != 1:
        raise UsageError("give exactly one data source: --data, --presplit or --synth-config")
    train_cfg = classifier.TrainConfig(**{k: s[k] for k in _TRAIN_KEYS if k in s})
    feat_cfg = FeaturizerConfig(**{k: s[k] for k in _FEAT_KEYS if k in s})
    kwargs = dict(
        data=s.get("data"), presplit=presplit, synth=synth,
        seed=int(s.get("seed", 0)), train=train_cfg, featurizer=feat_cfg,
        out_dir=s.get("out_dir"), joint_balance=bool(s.get("joint_balance", False)),
        grid_resolution=int(s.get("grid_resolution", 101)),
    )
    if s.get("tasks"):
        kwargs["tasks"] = _csv_list(s["tasks"])
    if s.get("conditions"):
        kwargs["conditions"] = _csv_list(s["conditions"])
    if s.get("ratios"):
        kwargs["ratios"] = tuple(float(x) for x in _csv_list(s["ratios"]))
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _resolve_presplit(value):
    parts = _csv_list(value)
    if len(parts) == 1:
        d = Path(parts[0])
        for ext in (".csv", ".jsonl"):
            files = [d / f"{name}{ext}" for name in ("train", "dev", "test")]
            if all(f.exists() for f in files):
                return tuple(str(f) for f in files)
        raise UsageError(f"{d}: expected train/dev/test .csv or .jsonl files")
    if len(parts) != 3:
        raise UsageError("--presplit takes a directory or three comma-separated files")
    return parts


def _out_dir(s: dict) -> Path:
    out = Path(s.get("out_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj) -> str:
    return json.dumps(harness._json_safe(obj), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# subcommands


def cmd_prep(args) -> int:
    s = _settings(args)
    cfg = _experiment_config(s)
    prepared = harness.prepare_data(cfg)
    out = _out_dir(s)
    gmap, pmap = prepared.gender_map, prepared.profession_map
    for name, part in prepared.splits.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bio", "gender", "profession"])
        w.writerows([r.text, gmap.decode(r.gender_id), pmap.decode(r.profession_id)] for r in part)
        atomic_write(out / f"{name}.csv", buf.getvalue())
    atomic_write(out / "label_maps.json", _dump({"gender": gmap.to_dict(), "profession": pmap.to_dict()}))
    harness.emit_distribution_report(prepared.splits, out, gmap, pmap)
    stats = compute_distribution_stats(prepared.splits, gmap, pmap)
    for split in ("train", "dev", "test"):
        pct = ", ".join(f"{g} {v:.1f}%" for g, v in stats.gender_percent[split].items())
        print(f"{split}: {len(dict(prepared.splits.items())[split])} records ({pct})")
    return EXIT_OK


def cmd_synth(args) -> int:
    s = _settings(args)
    cfg = _synth_config(s) or SynthConfig(seed=int(s.get("seed", 0)))
    corpus = generate(cfg)
    out = _out_dir(s)
    corpus.write(out / "corpus.csv", out / "corpus.params.json")
    print(f"wrote {len(corpus.records)} records to {out / 'corpus.csv'}")
    return EXIT_OK


def _task_arrays(prepared, task, part):
    return harness._labels(part, task), harness._groups(part)


def cmd_train(args) -> int:
    s = _settings(args)
    cfg = _experiment_config(s)
    task, condition = s.get("task", "gender"), s.get("condition", "baseline")
    if condition == "postproc_eo":
        raise UsageError("train covers baseline, oversampling and loss_weighting; use `mitigate` on its scores")
    prepared = harness.prepare_data(cfg)
    splits = prepared.splits
    K = len(prepared.gender_map) if task == "gender" else len(prepared.profession_map)
    feats = harness._FeatureCache([r.text for _, part in splits.items() for r in part], cfg.featurizer)
    seed = harness.cell_seed(cfg.seed, task, condition)
    train_recs = splits.train
    if condition == "oversampling":
        train_recs = mitigate.oversample(train_recs, "joint" if cfg.joint_balance else task, seed,
                                         None if cfg.joint_balance else K)
    y_train = harness._labels(train_recs, task)
    weights = mitigate.compute_class_weights(y_train, K) if condition == "loss_weighting" else None
    model, report = classifier.train((feats.rows(train_recs), y_train),
                                     (feats.rows(splits.dev), harness._labels(splits.dev, task)),
                                     weights, replace(cfg.train, seed=seed), num_classes=K)
    out = _out_dir(s)
    classifier.save_checkpoint(out / "model.npz", model, cfg.featurizer)
    atomic_write(out / "train_report.json", _dump(asdict(report)))
    parts = [("dev", splits.dev), ("test", splits.test)]
    y = np.concatenate([harness._labels(p, task) for _, p in parts])
    g = np.concatenate([harness._groups(p) for _, p in parts])
    probs = np.vstack([classifier.predict_proba(model, feats.rows(p)) for _, p in parts])
    split = ["dev"] * len(splits.dev) + ["test"] * len(splits.test)
    harness.write_score_file(out / "scores.csv", y, g, probs, split)
    print(f"best epoch {report.best_epoch}, dev macro-F1 {max(report.dev_macro_f1):.3f}; wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    s = _settings(args)
    cfg = _experiment_config(s)
    task = s.get("task", "gender")
    model, fcfg = classifier.load_checkpoint(s["model"])
    prepared = harness.prepare_data(replace(cfg, featurizer=fcfg))
    K = len(prepared.gender_map) if task == "gender" else len(prepared.profession_map)
    if model.num_classes != K:
        raise DataError(f"model has {model.num_classes} classes, task {task!r} has {K}")
    feats = harness._FeatureCache([r.text for r in prepared.splits.test], fcfg)
    test = prepared.splits.test
    pred = classifier.predict_labels(model, feats.rows(test))
    report = harness.fairmetrics.evaluate(harness._labels(test, task), pred, harness._groups(test), K,
                                          "evaluate", task)
    _emit_report(report, s)
    return EXIT_OK


def _emit_report(report, s):
    text = _dump(report.to_dict())
    if s.get("out_dir"):
        atomic_write(_out_dir(s) / "report.json", text)
    print(text, end="")


def cmd_mitigate(args) -> int:
    s = _settings(args)
    sf = harness.read_score_file(s["scores"])
    policy, test, pred = harness.mitigate_scores(sf, int(s.get("seed", 0)), int(s.get("grid_resolution", 101)))
    out = _out_dir(s)
    atomic_write(out / "eo_policy.json", _dump(policy.to_dict()))
    lines = ["row,group,y_true,y_pred"]
    rows = np.flatnonzero(test)
    lines += [f"{i},{sf.group[i]},{sf.y_true[i]},{p}" for i, p in zip(rows.tolist(), pred.tolist())]
    atomic_write(out / "predictions.csv", "\n".join(lines) + "\n")
    report = harness.fairmetrics.evaluate(sf.y_true[test], pred, sf.group[test], sf.num_classes,
                                          "postproc_eo", "mitigate")
    atomic_write(out / "report.json", _dump(report.to_dict()))
    print(f"accuracy {report.accuracy:.3f}, DPD {report.dpd:.3f}, EOD {report.eod:.3f}; wrote {out}")
    return EXIT_OK


def cmd_run_all(args) -> int:
    s = _settings(args)
    cfg = _experiment_config(s)
    table = harness.run_experiments(cfg)
    print(harness.render_table(table, s.get("format", "markdown")), end="")
    return EXIT_OK


def cmd_audit(args) -> int:
    s = _settings(args)
    report = harness.audit_scores(s["scores"], int(s.get("seed", 0)), int(s.get("grid_resolution", 101)))
    _emit_report(report, s)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fairbios", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value file overriding defaults")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        if data:
            sp.add_argument("--data", help="CSV or JSONL corpus")
            sp.add_argument("--presplit", help="directory with train/dev/test files, or three comma-separated paths")
            sp.add_argument("--synth-config", help="synthetic corpus settings (key = value or JSON)")
            sp.add_argument("--joint-balance", action="store_true", default=None,
                            help="oversample gender x profession cells jointly (extension)")
            for k in sorted(_TRAIN_KEYS | _FEAT_KEYS):
                sp.add_argument(f"--{k.replace('_', '-')}", dest=k, type=_parse_value, help=argparse.SUPPRESS)

    sp = sub.add_parser("prep", help="load, normalize, split and summarize a corpus")
    common(sp)
    sp.set_defaults(func=cmd_prep)

    sp = sub.add_parser("synth", help="generate a synthetic biased corpus")
    common(sp, data=False)
    sp.add_argument("--synth-config")
    sp.add_argument("--n", dest="synth_n", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one model and write checkpoint + dev/test scores")
    common(sp)
    sp.add_argument("--task", choices=harness.TASKS)
    sp.add_argument("--condition", choices=harness.CONDITIONS[:3])
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--task", choices=harness.TASKS)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("mitigate", help="fit EO thresholds on dev rows of a score file, apply to test rows")
    common(sp, data=False)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--grid-resolution", type=int)
    sp.set_defaults(func=cmd_mitigate)

    sp = sub.add_parser("run-all", help="run the task x condition grid")
    common(sp)
    sp.add_argument("--tasks", help="comma-separated subset of gender,profession")
    sp.add_argument("--conditions", help="comma-separated subset of " + ",".join(harness.CONDITIONS))
    sp.add_argument("--format", choices=("csv", "json", "markdown"))
    sp.add_argument("--grid-resolution", type=int)
    sp.set_defaults(func=cmd_run_all)

    sp = sub.add_parser("audit", help="metric suite for an external score or label file")
    common(sp, data=False)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--grid-resolution", type=int)
    sp.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fairbios: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"fairbios: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"fairbios: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FairBiosError, ValueError, ArithmeticError) as exc:
        print(f"fairbios: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
