import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ulab import harness
from ulab.datasets import LabeledDataset, idx_bytes, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
from ulab.errors import ConfigError, FormatError, UsageError
from ulab.harness import (ExperimentConfig, MetricsRow, confusion_matrix, grid_csv, grid_points,
                          multiclass_forget_sets, parse_results_csv, reassignment_report,
                          results_csv)
from ulab.nn import ClassifierModel

SMALL = {
    "dataset": "toy3", "architecture": [2, 8, 3], "forgetClasses": [1],
    "methods": ["original", "retrain", {"method": "trw", "epochs": 3},
                {"method": "ft", "epochs": 3}],
    "nRetrainModels": 2, "seeds": [0, 1], "trainPerClass": 30, "testPerClass": 30,
    "training": {"learning_rate": 0.05, "epochs": 8, "batch_size": 16},
}


def small(**changes):
    return ExperimentConfig.from_dict({**SMALL, **changes})


# -- config -----------------------------------------------------------------------

def test_config_round_trip():
    cfg = small(uliraShadows=2, beta=5.0)
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert json.loads(json.dumps(cfg.to_dict())) == cfg.to_dict()
    trw = [m for m in cfg.methods if m.method == "trw"][0]
    assert trw.beta == 5.0 and trw.epochs == 3


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SMALL))
    assert harness.load_config(p) == small()
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        harness.load_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        harness.load_config(p)


@pytest.mark.parametrize("changes", [
    {"dataset": "cifar"}, {"methods": []}, {"forgetClasses": []}, {"forgetClasses": [3]},
    {"forgetClasses": [0, 1]}, {"nRetrainModels": 0}, {"seeds": []}, {"uliraShadows": 1},
    {"methods": ["nope"]}, {"methods": [{"method": "ft", "bogus": 1}]},
    {"training": {"epochs": 0}}, {"dataset": "mnistIdx"}, {"extra": 1},
])
def test_config_rejects(changes):
    with pytest.raises(ConfigError):
        small(**changes)


def test_config_missing_key():
    d = dict(SMALL)
    del d["methods"]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_architecture_must_fit_data():
    with pytest.raises(ConfigError):
        harness.load_data(small(architecture=[3, 8, 3]), 0)


def test_gaussian_spec_file(tmp_path):
    spec = {"per_class": [{"mean": [0, 0, 0], "var": [1, 1, 1], "count": 10},
                          {"mean": [3, 0, 0], "var": [1, 1, 1], "count": 10},
                          {"mean": [0, 3, 0], "var": [1, 1, 1], "count": 10}]}
    path = tmp_path / "g.json"
    path.write_text(json.dumps(spec))
    cfg = small(dataset="gaussianSpecFile", dataPath=str(path), architecture=[3, 4, 3],
                testPerClass=7, trainPerClass=None)
    train, test = harness.load_data(cfg, 0)
    assert len(train) == 30 and len(test) == 21
    path.write_text("{}")
    with pytest.raises(ConfigError):
        harness.load_data(cfg, 0)


def test_mnist_missing_files(tmp_path):
    cfg = small(dataset="mnistIdx", dataPath=str(tmp_path), architecture=[784, 10],
                forgetClasses=[8])
    with pytest.raises(FormatError):
        harness.load_data(cfg, 0)


def test_mnist_plain_files(tmp_path):
    rng = np.random.default_rng(0)
    for (img, lab), n in zip(harness.MNIST_FILES, (40, 20)):
        (tmp_path / img).write_bytes(idx_bytes(rng.integers(0, 255, (n, 2, 2)), IDX_IMAGES_MAGIC))
        (tmp_path / lab).write_bytes(idx_bytes(np.arange(n) % 10, IDX_LABELS_MAGIC))
    cfg = small(dataset="mnistIdx", dataPath=str(tmp_path), architecture=[4, 10],
                forgetClasses=[8], trainPerClass=2, testPerClass=None)
    train, test = harness.load_data(cfg, 0)
    assert len(train) == 20 and len(test) == 20


# -- tables -----------------------------------------------------------------------

floats = st.one_of(st.none(), st.floats(allow_nan=False, allow_infinity=False))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["trw", "ft", "trw[beta=5]", "trw[forget=0,3]"]),
                          st.integers(0, 99), floats, floats, floats), max_size=6))
def test_results_csv_round_trip(raw):
    rows = [MetricsRow(m, s, a, b, c, a, b, c, None) for m, s, a, b, c in raw]
    text = results_csv(rows)
    back = parse_results_csv(text)
    assert results_csv(back) == text
    assert [(r.method, r.seed, r.acc_r) for r in back] == [(r.method, r.seed, r.acc_r)
                                                           for r in rows]


def test_results_header_and_empty_cells():
    text = results_csv([MetricsRow("ga", 3, error="DivergenceError: x")])
    assert text.splitlines() == [",".join(harness.RESULTS_HEADER), "ga,3,,,,,,,"]
    with pytest.raises(FormatError):
        parse_results_csv("a,b\n")


def _identity_model():
    return ClassifierModel([np.eye(3)], [np.zeros(3)])


def test_confusion_and_reassignment():
    m = _identity_model()
    tbc = {0: LabeledDataset([[1, 0, 0], [0, 1, 0]], [0, 0], (0, 1, 2)),
           1: LabeledDataset([[0, 0, 1], [0, 0, 2], [1, 0, 0]], [1, 1, 1], (0, 1, 2)),
           2: LabeledDataset([[0, 0, 1]], [2], (0, 1, 2))}
    cm = confusion_matrix(m, tbc)
    assert cm.tolist() == [[1, 1, 0], [1, 0, 2], [0, 0, 1]]
    assert cm.sum(axis=1).tolist() == [2, 3, 1]
    rep = reassignment_report(m, tbc[1])
    assert rep == [(2, 2 / 3), (0, 1 / 3)]
    with pytest.raises(UsageError):
        confusion_matrix(m, {**tbc, 2: tbc[2].subset(np.zeros(1, bool))})


# -- runs -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def run_rows():
    return harness.run_experiment(small(), write=False)


def test_rows_per_seed_and_method(run_rows):
    assert [(r.method, r.seed) for r in run_rows] == [
        (m, s) for s in (0, 1) for m in ("original", "retrain", "trw", "ft")]
    for r in run_rows:
        assert r.error is None and r.runtime_s is None and r.ulira is None
        assert 0 <= r.acc_r <= 1 and 0 <= r.acc_f <= 1 and 0 <= r.mia <= 100
        assert 0 <= r.mia_nn <= 1 and math.isfinite(r.mia_nn_gap)


def test_retrain_row_uses_training_config():
    cfg = small(seeds=[0])
    ctx = harness.build_context(cfg, 0)
    res, row = harness._run_method(ctx, cfg.methods[1])
    assert len(res.epoch_losses) == cfg.training.epochs
    assert row.acc_f == 0.0


def test_outputs_byte_identical(tmp_path):
    a = tmp_path / "a"
    harness.run_experiment(small(outputDir=str(a)))
    first = {n: (a / n).read_bytes() for n in ("results.csv", "results.json")}
    harness.run_experiment(small(outputDir=str(a)), jobs=2)
    for name, data in first.items():
        assert (a / name).read_bytes() == data
    doc = json.loads((a / "results.json").read_text())
    assert doc["errors"] == [] and len(doc["rows"]) == 8


def test_ulira_column_filled():
    rows = harness.run_experiment(small(seeds=[0], uliraShadows=2,
                                        methods=["retrain", {"method": "ft", "epochs": 2}]),
                                  write=False)
    assert all(0 <= r.ulira <= 1 for r in rows)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_cell_becomes_error_row():
    cfg = small(seeds=[0], methods=[{"method": "ft", "epochs": 1, "learning_rate": 1e300},
                                    "original"])
    rows = harness.run_experiment(cfg, write=False)
    assert rows[0].error.startswith("DivergenceError") and rows[0].acc_r is None
    assert rows[1].error is None
    assert not harness.all_diverged(rows)
    assert harness.all_diverged(rows[:1])


def test_ablation_labels(tmp_path):
    rows = harness.ablate_beta(small(seeds=[0], outputDir=str(tmp_path)), [0, 5])
    assert [r.method for r in rows] == ["trw[beta=0]", "trw[beta=5]"]
    assert json.loads((tmp_path / "ablation.json").read_text())["betas"] == [0.0, 5.0]
    with pytest.raises(ConfigError):
        harness.ablate_beta(small(), [])


def test_multiclass_sets_nested_and_seeded():
    sets = multiclass_forget_sets(10, [1, 2, 4], 3)
    assert [len(s) for s in sets] == [1, 2, 4]
    assert set(sets[0]) < set(sets[1]) < set(sets[2])
    assert sets == multiclass_forget_sets(10, [1, 2, 4], 3)
    with pytest.raises(ConfigError):
        multiclass_forget_sets(3, [2], 0)


def test_multiclass_rejects_too_many():
    with pytest.raises(ConfigError):
        harness.run_multiclass(small(), [2], write=False)


def test_multiclass_run():
    cfg = small(seeds=[0], architecture=[2, 8, 3])
    rows = harness.run_multiclass(cfg, [1], write=False)
    assert len(rows) == 1 and rows[0].method.startswith("trw[forget=")


# -- toy grids --------------------------------------------------------------------

def test_grid_points_order_and_count():
    pts = grid_points((0, 1, 10, 12), 3)
    assert pts.shape == (9, 2)
    assert pts[:3].tolist() == [[0, 10], [0.5, 10], [1, 10]]
    assert pts[-1].tolist() == [1, 12]
    with pytest.raises(ConfigError):
        grid_points((0, 1, 0, 1), 0)


def test_grid_csv_format():
    text = grid_csv(np.array([[0.5, 1.0]]), np.array([2]))
    assert text == "x,y,predictedClass\n0.5,1.0,2\n"


def test_toy_boundary_outputs(tmp_path):
    cfg = small(seeds=[0], gridResolution=7, outputDir=str(tmp_path), nRetrainModels=1)
    summary = harness.emit_toy_boundary(cfg)
    assert summary["agreement"]["0"]["retrain"] == 1.0
    for name in harness.BOUNDARY_VARIANTS:
        lines = (tmp_path / "seed_0" / f"{name}.csv").read_text().splitlines()
        assert len(lines) == 1 + 49
    doc = json.loads((tmp_path / "agreement.json").read_text())
    assert set(doc["mean"]) == set(harness.BOUNDARY_VARIANTS)


def test_toy_boundary_needs_2d(tmp_path):
    cfg = small(seeds=[0], architecture=[3, 4, 3])
    with pytest.raises(UsageError):
        harness.emit_toy_boundary(cfg, write=False)
