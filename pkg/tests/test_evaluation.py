import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import auc_pairwise, youden_exhaustive
from panogan import evaluation as ev
from panogan.errors import UndefinedMetricError

NEG, POS = "normal", "abnormal"


def random_case(seed, size=None):
    rng = np.random.default_rng(seed)
    n = size or int(rng.integers(10, 501))
    scores = np.round(rng.normal(size=n), 1)  # coarse rounding forces ties
    labels = rng.random(n) < rng.uniform(0.2, 0.8)
    labels[0], labels[1] = True, False
    scores[labels] += rng.uniform(0, 1.5)
    return scores.tolist(), labels.tolist()


def test_perfect_separation():
    r = ev.evaluate([0.1, 0.2, 0.8, 0.9], [NEG, NEG, POS, POS])
    assert r.auc == 1.0
    assert r.sensitivity == r.specificity == r.youden_j == 1.0
    assert 0.2 < r.threshold < 0.8


def test_reversed_labels():
    assert ev.roc_auc([0.1, 0.2, 0.8, 0.9], [POS, POS, NEG, NEG]).auc == 0.0


def test_all_scores_identical():
    r = ev.youden_optimal([0.5] * 6, [POS, NEG] * 3)
    assert r.youden_j == 0.0 and r.auc == 0.5
    assert r.specificity == 1.0


def test_single_class_rejected():
    with pytest.raises(UndefinedMetricError):
        ev.roc_auc([0.1, 0.2], [NEG, NEG])
    with pytest.raises(UndefinedMetricError):
        ev.youden_optimal([0.1, 0.2], [POS, POS])


@pytest.mark.parametrize("seed", range(5))
def test_auc_matches_pairwise_oracle(seed):
    s, y = random_case(seed, 200)
    assert abs(ev.roc_auc(s, y).auc - auc_pairwise(s, y)) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_youden_matches_exhaustive_oracle(seed):
    s, y = random_case(100 + seed, 100)
    r = ev.youden_optimal(s, y)
    assert abs(r.youden_j - youden_exhaustive(s, y)) <= 1e-12
    assert r.youden_j == pytest.approx(r.sensitivity + r.specificity - 1, abs=1e-15)


def test_youden_threshold_reproduces_rates():
    s, y = random_case(7, 300)
    r = ev.youden_optimal(s, y)
    tp = sum(1 for v, p in zip(s, y) if p and v >= r.threshold)
    tn = sum(1 for v, p in zip(s, y) if not p and v < r.threshold)
    assert tp / r.positives == r.sensitivity and tn / r.negatives == r.specificity


def test_youden_tie_prefers_specificity():
    # thresholds 0.5 (sens 1, spec 0.5) and 1.5 (sens 0.5, spec 1) both give J = 0.5
    r = ev.youden_optimal([0.0, 1.0, 1.0, 2.0], [NEG, NEG, POS, POS])
    assert r.youden_j == 0.5 and r.specificity == 1.0 and r.threshold == 1.5


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6))
def test_auc_equals_trapezoid(seed):
    s, y = random_case(seed)
    r = ev.roc_auc(s, y)
    assert abs(r.auc - ev.trapezoid_auc(r.roc_points)) <= 1e-9


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6))
def test_roc_points_monotone(seed):
    r = ev.roc_auc(*random_case(seed))
    pts = np.array(r.roc_points)
    assert tuple(pts[0]) == (0.0, 0.0) and tuple(pts[-1]) == (1.0, 1.0)
    assert np.all(np.diff(pts, axis=0) >= 0)


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6))
def test_auc_invariant_under_increasing_transform(seed):
    s, y = random_case(seed)
    a = ev.youden_optimal(s, y)
    b = ev.youden_optimal([math.exp(v) * 3 + 1 for v in s], y)
    assert a.auc == b.auc and a.youden_j == b.youden_j


@settings(max_examples=50)
@given(st.integers(0, 10 ** 6))
def test_label_flip(seed):
    s, y = random_case(seed)
    assert ev.roc_auc(s, [not v for v in y]).auc == pytest.approx(1 - ev.roc_auc(s, y).auc, abs=1e-12)


def test_report_json_schema_round_trip():
    r = ev.evaluate(*random_case(3, 50))
    doc = json.loads(r.to_json())
    jsonschema.validate(doc, ev.REPORT_SCHEMA)
    back = ev.EvalReport.from_json(r.to_json())
    assert back.to_dict() == r.to_dict()


def test_infinite_threshold_encoding():
    r = ev.youden_optimal([0.5] * 4, [POS, NEG] * 2)
    assert r.threshold == math.inf
    doc = json.loads(r.to_json())
    assert doc["threshold"] == "inf"
    jsonschema.validate(doc, ev.REPORT_SCHEMA)
    assert ev.EvalReport.from_json(r.to_json()).threshold == math.inf


def test_select_epoch():
    assert ev.select_epoch([0.7, 0.9, 0.9]) == 1
    assert ev.select_epoch([0.4]) == 0


class Labelled:
    def __init__(self, labels):
        self._labels = labels

    def labels(self):
        return self._labels


def test_validate_per_epoch_with_scripted_scorers():
    labels = [NEG, NEG, POS, POS]
    scripted = {"e0": [0.9, 0.1, 0.2, 0.8], "e1": [0.1, 0.2, 0.8, 0.9], "e2": [0.1, 0.9, 0.8, 0.2]}
    expected = [ev.roc_auc(v, labels).auc for v in scripted.values()]
    sel = ev.validate_per_epoch(list(scripted), Labelled(labels), "izi",
                                lambda ck, ds, variant: scripted[ck])
    assert sel.aucs == expected == [0.5, 1.0, 0.5]
    assert sel.best_epoch == 1 and sel.best_checkpoint == "e1"


def test_validate_single_class_propagates():
    with pytest.raises(UndefinedMetricError):
        ev.validate_per_epoch(["a"], Labelled([NEG, NEG]), "izi", lambda *a: [0.1, 0.2])


def test_roc_outputs(tmp_path):
    r = ev.evaluate([0.1, 0.4, 0.35, 0.8], [NEG, NEG, POS, POS])
    table = ev.roc_table(r).splitlines()
    assert table[0] == "fpr\ttpr" and len(table) == len(r.roc_points) + 1
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    ev.write_roc_svg(a, r)
    ev.write_roc_svg(b, r)
    assert a.read_bytes() == b.read_bytes()
    assert b"<svg" in a.read_bytes()
