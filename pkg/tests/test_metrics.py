import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edna.builtins import default_registry
from edna.errors import MetricError
from edna.metrics import (Accuracy, KLDivergence, MetricSeries, MetricSpec, accuracy, build_metric,
                          kl_divergence, series_from_csv, series_to_csv, weighted_f1)

from oracles import ref_kl, ref_weighted_f1


def test_weighted_f1_frozen_case():
    # per class: F1 = 0.5 (support 2), 0.8 (support 3), 0 (support 0)
    assert weighted_f1([0, 0, 1, 1, 2], [0, 1, 1, 1, 0], 3) == pytest.approx(0.68, abs=1e-15)


def test_weighted_f1_random_against_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        p = rng.integers(0, c, n).tolist()
        y = rng.integers(0, c, n).tolist()
        assert weighted_f1(p, y, c) == ref_weighted_f1(p, y, c)


def test_perfect_and_absent_classes():
    assert weighted_f1([1, 1], [1, 1], 4) == 1.0
    assert accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    with pytest.raises(MetricError):
        weighted_f1([0, 5], [0, 1], 3)
    with pytest.raises(MetricError):
        accuracy([], [])


def test_kl_frozen_and_identity():
    assert kl_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(math.log(5 / 3), abs=1e-15)
    assert kl_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.integers(0, 2**31))
def test_kl_against_direct_sum(raw, seed):
    p = np.array(raw) / sum(raw)
    q = np.random.default_rng(seed).dirichlet(np.ones(len(raw)))
    q = np.maximum(q, 1e-6)
    q = q / q.sum()
    assert abs(kl_divergence(p, q) - ref_kl(p.tolist(), q.tolist())) < 1e-12
    assert kl_divergence(p, q) >= -1e-15


def test_kl_undefined_and_invalid():
    with pytest.raises(MetricError, match="undefined"):
        kl_divergence([0.5, 0.5], [1.0, 0.0])
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    with pytest.raises(MetricError):
        kl_divergence([0.5, 0.6], [0.5, 0.5])


def test_series_order_and_csv():
    s = MetricSeries([(0, 0, 1.0), (1, 0, 0.5)])
    with pytest.raises(MetricError):
        s.append(0, 5, 1.0)
    assert series_from_csv(series_to_csv(s)) == s


def test_metric_lifecycle():
    m = build_metric(MetricSpec("acc"), "Accuracy", default_registry())
    assert isinstance(m, Accuracy)
    m.update(epoch=1, preds=[1, 1], labels=[1, 0])
    m.update(epoch=2, preds=[1, 0], labels=[1, 0])
    assert m.aggregate("last") == 1.0 and m.aggregate() == 0.75
    assert [r[:2] for r in m.series().records] == [(1, 0), (2, 1)]
    with pytest.raises(MetricError):
        Accuracy("raw").update(preds=[0], labels=[0])


def test_kl_metric_from_predictions():
    m = KLDivergence("kl")
    m.build_module()
    value = m.update(labels=[0, 1, 1, 1], probs=[[0.5, 0.5]] * 4, num_classes=2)
    assert value == pytest.approx(ref_kl([0.25, 0.75], [0.5, 0.5]), abs=1e-15)
