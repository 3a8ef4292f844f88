import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LogisticRegression

from clearlab.data import (CLS_ID, PAD_ID, UNK_ID, DataError, Vocab, load_corpus, load_tsv, save_corpus,
                           split, synth_generate, tokenize, train_test)
from clearlab.noise import NoiseSpec, corrupt


def probe_accuracy(difficulty, seed=0):
    tr, te = train_test(5, 5000, 1000, difficulty=difficulty, seed=seed)
    texts = lambda ds: [" ".join(map(str, e.tokens)) for e in ds.examples]  # noqa: E731
    vec = CountVectorizer(token_pattern=r"\S+")
    clf = LogisticRegression(max_iter=2000).fit(vec.fit_transform(texts(tr)), tr.true)
    return clf.score(vec.transform(texts(te)), te.true)


def test_default_difficulty_is_learnable_but_not_trivial():
    assert 0.90 < probe_accuracy(0.5) < 0.98


def test_zero_difficulty_is_separable():
    assert probe_accuracy(0.0) > 0.99


def test_balance_and_determinism():
    ds = synth_generate(5, 503, seed=2)
    counts = np.bincount(ds.true, minlength=5)
    assert counts.max() - counts.min() <= 1
    assert ds == synth_generate(5, 503, seed=2)
    assert ds != synth_generate(5, 503, seed=3)
    assert len(set(ds.ids.tolist())) == len(ds)
    assert all(max(e.tokens) < len(ds.vocab) for e in ds.examples)
    with pytest.raises(DataError):
        synth_generate(5, 20)


def test_split_sizes_and_union():
    ds = synth_generate(4, 1000, seed=1)
    parts = split(ds, (0.8, 0.1, 0.1), seed=0)
    assert [len(p) for p in parts] == [800, 100, 100]
    ids = np.concatenate([p.ids for p in parts])
    assert sorted(ids.tolist()) == sorted(ds.ids.tolist())
    assert [p.split for p in parts] == ["train", "val", "test"]
    with pytest.raises(DataError):
        split(ds, (0.5, 0.4))
    with pytest.raises(DataError):
        split(synth_generate(4, 40), (0.99, 0.01))


def test_encode_layout():
    ds = synth_generate(3, 30, seq_len=5, seed=0)
    ids, pad = ds.encode(6)
    assert (ids[:, 0] == CLS_ID).all()
    np.testing.assert_array_equal(pad, ids != PAD_ID)


def test_tsv_loading(tmp_path):
    (tmp_path / "train.tsv").write_text("Good movie\tpos\nbad film\tneg\n")
    (tmp_path / "test.tsv").write_text("good popcorn\tpos\n")
    tr = load_tsv(tmp_path / "train.tsv")
    assert len(tr) == 2 and tr.num_classes == 2 and tr.label_names == ["pos", "neg"]
    te = load_tsv(tmp_path / "test.tsv", vocab=tr.vocab, label_index={"pos": 0, "neg": 1}, split_name="test")
    assert te.examples[0].tokens[1] == UNK_ID
    (tmp_path / "bad.tsv").write_text("fine\tpos\nno label here\n")
    with pytest.raises(DataError, match=":2:"):
        load_tsv(tmp_path / "bad.tsv")
    (tmp_path / "empty.tsv").write_text("")
    with pytest.raises(DataError, match="empty"):
        load_tsv(tmp_path / "empty.tsv")
    with pytest.raises(DataError):
        load_tsv(tmp_path / "missing.tsv")


def test_corpus_round_trip_keeps_corruption(tmp_path):
    tr, _ = train_test(5, 300, 50, seed=4)
    noisy = corrupt(tr, NoiseSpec("symmetric", 0.4, seed=1))
    save_corpus(noisy, tmp_path / "c.tsv")
    back = load_corpus(tmp_path / "c.tsv")
    assert back == noisy
    np.testing.assert_array_equal(back.corrupted, noisy.corrupted)


@given(st.text(alphabet="abc XYZ\t", max_size=40))
def test_tokenisation_is_pure(text):
    v = Vocab(tokenize(text))
    assert v.encode(text) == v.encode(text)
    assert v.decode(v.encode(text)) == " ".join(tokenize(text))
