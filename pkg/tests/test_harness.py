import csv
import hashlib
import json

import numpy as np
import pytest

from fairbios import classifier, harness
from fairbios.classifier import TrainConfig
from fairbios.errors import NonProbabilisticScores, SchemaMismatch
from fairbios.fairmetrics import evaluate
from fairbios.featurize import FeaturizerConfig
from fairbios.harness import (
    COLUMNS,
    CONDITIONS,
    PLACEHOLDER,
    ExperimentConfig,
    ResultsTable,
    audit_scores,
    cell_seed,
    emit_distribution_report,
    parse_table_json,
    prepare_data,
    render_table,
    run_experiments,
    write_score_file,
)
from fairbios.synthdata import SynthConfig


def small_config(**kw):
    base = dict(synth=SynthConfig(n=1500, num_professions=4, seed=1), seed=1,
                featurizer=FeaturizerConfig(dim=2 ** 12), train=TrainConfig(learning_rate=2.0, max_epochs=2))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def grid():
    return run_experiments(small_config())


def test_full_grid_order(grid):
    assert [(r.task, r.condition) for r in grid.rows] == [(t, c) for t in ("gender", "profession") for c in CONDITIONS]


def test_gender_eo_cell_fails_gracefully(grid):
    eo = grid.rows[3]
    assert eo.failed and "GroupMissingClass" in eo.error
    assert all(not r.failed for r in grid.rows[4:])
    assert grid.rows[0].flags[0] == harness.SAME_TARGET_CAVEAT
    md = render_table(grid, "markdown").splitlines()
    assert md[5].count(PLACEHOLDER) == 4


def test_single_cell():
    t = run_experiments(small_config(tasks=("profession",), conditions=("baseline",)))
    assert len(t) == 1 and t.rows[0].task == "profession"


def test_render_formats(grid):
    rows = list(csv.reader(render_table(grid, "csv").splitlines()))
    assert tuple(rows[0]) == COLUMNS and len(rows) == 9
    assert rows[1][:3] == ["Baseline", "Gender", "All"]
    assert all(len(v.split(".")[1]) == 3 for v in rows[1][3:])
    back = parse_table_json(render_table(grid, "json"))
    assert back.rows == grid.rows
    with pytest.raises(ValueError):
        render_table(ResultsTable([]), "csv")


def test_run_all_writes_identical_files(tmp_path):
    digests = []
    for name in ("a", "b"):
        run_experiments(small_config(out_dir=str(tmp_path / name), conditions=("baseline", "postproc_eo")))
        files = sorted(p.name for p in (tmp_path / name).iterdir())
        digests.append({f: hashlib.sha256((tmp_path / name / f).read_bytes()).hexdigest() for f in files})
    assert digests[0] == digests[1] and "results.json" in digests[0]


def test_dev_and_test_identical_across_conditions(monkeypatch):
    seen = {"dev": [], "test": []}
    real_train, real_proba = classifier.train, classifier.predict_proba

    def spy_train(train_data, dev_data, *a, **k):
        seen["dev"].append((dev_data[0].toarray().tobytes(), dev_data[1].tobytes()))
        return real_train(train_data, dev_data, *a, **k)

    monkeypatch.setattr(classifier, "train", spy_train)
    cfg = small_config(tasks=("profession",))
    prepared = prepare_data(cfg)
    before = (list(prepared.splits.dev), list(prepared.splits.test))
    run_experiments(cfg, prepared)
    assert len(seen["dev"]) == 4 and len(set(seen["dev"])) == 1
    assert (prepared.splits.dev, prepared.splits.test) == before


def test_cell_seed_definition():
    d = hashlib.blake2b(b"7:gender:baseline", digest_size=8).digest()
    assert cell_seed(7, "gender", "baseline") == int.from_bytes(d, "little") & ((1 << 63) - 1)
    assert cell_seed(7, "gender", "baseline") != cell_seed(7, "gender", "oversampling")


def test_distribution_report(tmp_path):
    prepared = prepare_data(small_config())
    paths = emit_distribution_report(prepared.splits, tmp_path, prepared.gender_map, prepared.profession_map)
    for p in paths.values():
        assert p.exists() and p.stat().st_size > 0
    stats = json.loads(paths["stats_json"].read_text())
    assert abs(sum(stats["gender_percent"]["train"].values()) - 100) <= 1e-9


def test_audit_hard_labels(tmp_path):
    rng = np.random.default_rng(0)
    y, p, g = rng.integers(0, 3, 200), rng.integers(0, 3, 200), rng.integers(0, 2, 200)
    path = tmp_path / "labels.csv"
    path.write_text("y_true,y_pred,group\n" + "".join(f"{a},{b},{c}\n" for a, b, c in zip(y, p, g)))
    rep = audit_scores(path)
    ref = evaluate(y, p, g.astype(str), 3)
    assert (rep.accuracy, rep.macro_f1, rep.dpd, rep.eod) == (ref.accuracy, ref.macro_f1, ref.dpd, ref.eod)


def test_audit_rejects_non_probabilities(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("y_true,group,score_0,score_1\n0,a,0.5,0.4\n1,b,0.2,0.8\n")
    with pytest.raises(NonProbabilisticScores):
        audit_scores(path)
    path.write_text("y_true,score_0\n0,1.0\n")
    with pytest.raises(SchemaMismatch):
        audit_scores(path)


def test_audit_fits_on_dev_only(tmp_path, monkeypatch):
    rng = np.random.default_rng(1)
    n = 400
    y, g = rng.integers(0, 2, n), rng.integers(0, 2, n)
    s1 = 1 / (1 + np.exp(-rng.normal(1.5 * y)))
    split = np.where(np.arange(n) < 150, "dev", "test")
    write_score_file(tmp_path / "s.csv", y, g, np.column_stack([1 - s1, s1]), split)
    sizes = []
    real = harness.mitigate.fit_eo_policy_multiclass

    def spy(scores, *a, **k):
        sizes.append(len(scores))
        return real(scores, *a, **k)

    monkeypatch.setattr(harness.mitigate, "fit_eo_policy_multiclass", spy)
    rep = audit_scores(tmp_path / "s.csv")
    assert sizes == [150] and sum(p.support for p in rep.per_class) == 250
