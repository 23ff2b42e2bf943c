import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab.nnkit import forward
from unlearnlab.speechgen import (
    Corpus,
    ForgetSpec,
    GenSpec,
    Partition,
    corpus_from_text,
    corpus_to_text,
    featurize,
    generate,
    select_forget,
    split,
)
from unlearnlab.unlearn import TrainSettings, train


def test_same_spec_is_byte_identical():
    a, b = generate(GenSpec(seed=5)), generate(GenSpec(seed=5))
    assert a.equals(b)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert not a.equals(generate(GenSpec(seed=6)))


def test_zero_noise_makes_cells_identical():
    c = generate(GenSpec(num_keywords=3, num_speakers=2, frames=4, feature_dim=3, samples_per_class=10, noise_sigma=0.0))
    for k in range(3):
        for j in range(2):
            cell = c.frames[(c.keyword_labels == k) & (c.speaker_labels == j)]
            assert len(cell) > 0
            assert np.all(cell == cell[0])


def test_shapes_labels_and_balance():
    spec = GenSpec(num_keywords=5, num_speakers=4, frames=3, feature_dim=7, samples_per_class=8)
    c = generate(spec)
    assert c.frames.shape == (40, 3, 7)
    np.testing.assert_array_equal(c.ids, np.arange(40))
    assert np.bincount(c.keyword_labels).tolist() == [8] * 5
    assert np.bincount(c.speaker_labels).tolist() == [10] * 4
    assert c.features().shape == (40, 7)


@pytest.mark.parametrize("field,value", [("num_keywords", 0), ("frames", 0), ("noise_sigma", -1.0), ("keyword_scale", 0.0)])
def test_spec_validation(field, value):
    with pytest.raises(ValueError):
        generate(GenSpec(**{field: value}))


def test_nearest_centroid_oracle_separates_keywords():
    c = generate(GenSpec(num_keywords=12, num_speakers=10, noise_sigma=0.1, seed=2))
    part = split(c, 0.3, 0, "keyword")
    X, y = c.features(), c.keyword_labels
    cent = np.stack([X[part.train_ids][y[part.train_ids] == k].mean(axis=0) for k in range(12)])
    d = ((X[part.test_ids][:, None, :] - cent[None]) ** 2).sum(axis=2)
    acc = (d.argmin(axis=1) == y[part.test_ids]).mean()
    assert acc >= 0.99


def test_featurize_examples():
    f = np.array([[1.0, -2.0, 3.5]])
    np.testing.assert_array_equal(featurize(f), f[0])
    np.testing.assert_array_equal(featurize([[0.0, 0.0], [2.0, 4.0]]), [1.0, 2.0])
    np.testing.assert_array_equal(featurize(np.full((5, 3), 0.25)), [0.25] * 3)
    with pytest.raises(ValueError):
        featurize(np.zeros((0, 3)))


def test_features_are_featurized_frames(small_corpus):
    np.testing.assert_array_equal(small_corpus.features()[3], featurize(small_corpus.frames[3]))


def test_split_sizes_and_strata():
    c = generate(GenSpec(num_keywords=12, samples_per_class=100))
    p = split(c, 0.2, 0, "keyword")
    assert abs(len(p.test_ids) - 240) <= 12
    assert len(np.intersect1d(p.train_ids, p.test_ids)) == 0
    np.testing.assert_array_equal(np.union1d(p.train_ids, p.test_ids), c.ids)
    for k in range(12):
        assert np.any(c.keyword_labels[p.test_ids] == k) and np.any(c.keyword_labels[p.train_ids] == k)
    q = split(c, 0.2, 0, "keyword")
    np.testing.assert_array_equal(p.test_ids, q.test_ids)


def test_split_by_speaker_keeps_every_speaker_on_both_sides():
    c = generate(GenSpec())
    p = split(c, 0.2, 1, "speaker")
    for j in range(c.num_speakers):
        assert np.any(c.speaker_labels[p.test_ids] == j) and np.any(c.speaker_labels[p.train_ids] == j)


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
def test_split_rejects_degenerate_fractions(small_corpus, frac):
    with pytest.raises(ValueError):
        split(small_corpus, frac, 0)


def _check_algebra(p):
    assert len(np.intersect1d(p.forget_ids, p.retain_ids)) == 0
    np.testing.assert_array_equal(np.union1d(p.forget_ids, p.retain_ids), p.train_ids)
    assert len(np.intersect1d(p.train_ids, p.test_ids)) == 0


def test_select_forget_sample_mode_arithmetic():
    base = Partition(np.arange(1000), np.arange(1000, 1200))
    p = select_forget(base, ForgetSpec("sample", 0.05, seed=3), np.zeros(1200, int))
    assert len(p.forget_ids) == 50
    _check_algebra(p)


def test_select_forget_ratio_zero():
    base = Partition(np.arange(100), np.arange(100, 120))
    p = select_forget(base, ForgetSpec("sample", 0.0), np.zeros(120, int))
    assert len(p.forget_ids) == 0
    np.testing.assert_array_equal(p.retain_ids, base.train_ids)


def test_select_forget_class_mode():
    labels = np.array([0] * 80 + [1] * 120 + [0] * 20)
    base = Partition(np.arange(200), np.arange(200, 220))
    p = select_forget(base, ForgetSpec("class", target_class=0), labels)
    assert len(p.forget_ids) == 80
    assert not np.any(labels[p.retain_ids] == 0)
    _check_algebra(p)


def test_select_forget_errors():
    base = Partition(np.arange(10), np.arange(10, 12))
    with pytest.raises(ValueError):
        select_forget(base, ForgetSpec("class", target_class=5), np.zeros(12, int))
    with pytest.raises(ValueError):
        select_forget(base, ForgetSpec("sample", 0.2), np.zeros(12, int))
    with pytest.raises(ValueError):
        select_forget(base, ForgetSpec("shard"), np.zeros(12, int))
    done = select_forget(base, ForgetSpec("sample", 0.1), np.zeros(12, int))
    with pytest.raises(ValueError):
        select_forget(done, ForgetSpec("sample", 0.1), np.zeros(12, int))


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from(["sample", "class"]),
    st.floats(0.0, 0.10),
    st.integers(0, 3),
    st.integers(0, 2**32 - 1),
)
def test_partition_algebra_property(small_corpus, small_split, mode, ratio, target, seed):
    labels = small_corpus.keyword_labels
    p = select_forget(small_split, ForgetSpec(mode, ratio, target, seed), labels)
    _check_algebra(p)
    if mode == "class":
        np.testing.assert_array_equal(p.forget_ids, small_split.train_ids[labels[small_split.train_ids] == target])
    else:
        assert len(p.forget_ids) == round(ratio * len(small_split.train_ids))


def test_text_round_trip(small_corpus):
    text = corpus_to_text(small_corpus)
    assert text.startswith("# unlearnlab-corpus K=4 S=3 T=3 d=5\n")
    back = corpus_from_text(text)
    assert back.equals(small_corpus)


def test_text_import_rejects_bad_input(small_corpus):
    text = corpus_to_text(small_corpus)
    with pytest.raises(ValueError):
        corpus_from_text(text.split("\n", 1)[1])
    lines = text.splitlines()
    with pytest.raises(ValueError):
        corpus_from_text("\n".join(lines[:2] + [lines[3], lines[2]] + lines[4:]))
    with pytest.raises(ValueError):
        corpus_from_text("\n".join(lines[:3] + [lines[3].rsplit(",", 1)[0]]))


def test_zero_noise_corpus_is_separable():
    c = generate(GenSpec(num_keywords=6, num_speakers=4, frames=4, feature_dim=8, samples_per_class=20, noise_sigma=0.0, seed=1))
    p = split(c, 0.2, 0, "keyword")
    m = train(c, p, TrainSettings(hidden_dims=(32, 16), epochs=60, lr=0.1), seed=0)
    pred = forward(m, c.features()[p.train_ids])[0].argmax(axis=1)
    assert (pred == c.keyword_labels[p.train_ids]).mean() == 1.0
