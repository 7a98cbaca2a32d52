import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edna.data import (STOP_FILE, SampleRecord, SampleSet, StreamSource, TransformSpec, batch_iter,
                       csv_file, decode_line, encode_line, epoch_permutation, inline, poll_stream,
                       record_to_payload, split_eval, synthetic_gaussian, transform)
from edna.errors import DataError


def test_synthetic_counts_and_separation():
    s = synthetic_gaussian(n_samples=100, n_features=2, n_classes=2, class_sep=2.0, seed=42)
    labels = np.array([r.labels["label"] for r in s.records])
    assert len(s) == 100 and set(labels) <= {0, 1}
    assert (labels == 0).sum() == 50
    x = np.stack([r.features for r in s.records])
    m0, m1 = x[labels == 0].mean(axis=0), x[labels == 1].mean(axis=0)
    assert np.linalg.norm(m0 - m1) == pytest.approx(2.0 * np.sqrt(2), rel=0.15)


def test_synthetic_is_seeded():
    a = synthetic_gaussian(50, 3, 3, 1.0, seed=1)
    b = synthetic_gaussian(50, 3, 3, 1.0, seed=1)
    assert a.records == b.records


def test_record_is_immutable_and_checked():
    rec = SampleRecord([1.0, 2.0], {"label": 1})
    with pytest.raises(ValueError):
        rec.features[0] = 5.0
    with pytest.raises(DataError):
        SampleRecord([float("nan")], {"label": 0})


def test_sampleset_checks_label_range():
    with pytest.raises(DataError):
        SampleSet.from_records([SampleRecord([0.0], {"y": 3})], "y", {"y": 2})


def test_csv_with_header(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,target\n1,2,0\n3,4,1\n")
    s = csv_file(p, label_column="target", label_name="cls")
    assert len(s) == 2 and s.feature_dim == 2
    assert s.records[1].labels == {"cls": 1}


def test_csv_bad_row_names_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2,0\n3,x,1\n")
    with pytest.raises(DataError, match="row 2"):
        csv_file(p)


@pytest.mark.parametrize("text", ["", "a,b,label\n"])
def test_csv_without_rows(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(DataError):
        csv_file(p)


def test_inline_accepts_payloads():
    s = inline([{"features": [1.0], "labels": {"y": 0}}, {"features": [2.0], "labels": {"y": 1}}])
    assert s.primary_label == "y" and s.num_classes == 2


def test_line_codec_round_trip():
    rec = SampleRecord([0.25, -1.0], {"label": 1})
    line = encode_line(7, record_to_payload(rec))
    assert line == '7\t{"features":[0.25,-1.0],"labels":{"label":1}}\n'
    assert decode_line(line) == (7, record_to_payload(rec))
    with pytest.raises(DataError):
        decode_line("garbage")


def test_normalization_mnist_values():
    spec = TransformSpec.from_args({"normalization": [0.1307, 0.3081, 0.5], "i_shape": [28, 28]})
    assert len(spec) == 1
    out = transform(SampleRecord([0.1307], {"label": 0}), spec[0])
    assert out.features[0] == 0.0


def test_scale_transform():
    (spec,) = TransformSpec.from_args({"scale": 2.0})
    assert list(transform(SampleRecord([1.5, -2.0], {"l": 0}), spec).features) == [3.0, -4.0]


def test_split_is_deterministic_and_disjoint():
    s = synthetic_gaussian(100, 2, 2, 2.0, seed=0)
    tr, ev = split_eval(s, 0.2, seed=5)
    tr2, ev2 = split_eval(s, 0.2, seed=5)
    assert len(ev) == 20 and len(tr) == 80
    assert tr.records == tr2.records and ev.records == ev2.records
    assert not set(tr.records) & set(ev.records)


def test_batches_keep_short_tail():
    s = synthetic_gaussian(10, 2, 2, 2.0, seed=0)
    sizes = [len(b) for b in batch_iter(s, 4)]
    assert sizes == [4, 4, 2]
    feats, labels, datalabels = batch_iter(s, 4)[0]
    assert feats.shape == (4, 2) and labels.shape == (4,)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**40), st.integers(0, 50))
def test_epoch_permutation_is_a_reproducible_permutation(n, seed, epoch):
    p = epoch_permutation(n, seed, epoch)
    assert sorted(p.tolist()) == list(range(n))
    assert np.array_equal(p, epoch_permutation(n, seed, epoch))


def test_stream_polling(tmp_path):
    src = StreamSource(tmp_path, poll_interval=0.01)
    rec = SampleRecord([1.0, 2.0], {"label": 0})
    (tmp_path / "b.rec").write_text(encode_line(0, record_to_payload(rec)))
    (tmp_path / "a.rec").write_text(encode_line(0, record_to_payload(rec)) * 2)
    (tmp_path / "c.tmp").write_text("partial")
    assert len(poll_stream(src)) == 3
    assert poll_stream(src) == []
    assert not src.stop_requested
    (tmp_path / STOP_FILE).touch()
    assert src.stop_requested
