import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medvlbert.errors import ContractError, CorruptFileError
from medvlbert.metrics import (
    EvalPair,
    bleu,
    cider_d,
    format_table,
    lcs_length,
    modified_precision,
    precision_recall_f1,
    read_pairs,
    rouge_l,
    rouge_l_pair,
    score_corpus,
    write_pairs,
)

from oracles import bleu_oracle, cider_oracle, lcs_bruteforce, random_corpus, rouge_oracle


def corpus_of(raw):
    return [EvalPair(str(i), tuple(c), tuple(tuple(r) for r in refs)) for i, (c, refs) in enumerate(raw)]


def pair(cand, *refs, id="0"):
    return EvalPair.from_text(id, cand, refs)


# -- pinned cases ----------------------------------------------------------------------

def test_identical_corpus_scores_one():
    corpus = [pair("a b c d e", "a b c d e", id="0"), pair("f g h i", "f g h i", id="1")]
    assert bleu(corpus) == [1.0, 1.0, 1.0, 1.0]
    assert rouge_l(corpus) == 1.0


def test_clipped_unigram_precision():
    p = pair("the the the the the the the", "the cat is on the mat")
    assert modified_precision(p, 1) == (2, 7)
    # brevity penalty is 1 because the candidate is longer
    assert bleu([p], max_n=1)[0] == pytest.approx(2 / 7, abs=1e-12)


def test_brevity_penalty_half_length():
    p = pair("a b c", "a b c d e f")
    assert bleu([p])[0] == pytest.approx(math.exp(1 - 2), abs=1e-12)


def test_brevity_reference_tie_goes_shorter():
    # candidate length 4, references of length 3 and 5 are equally close; 3 is chosen so no penalty
    p = pair("a b c d", "a b c", "a b c d e")
    assert bleu([p], max_n=1)[0] == 1.0


def test_zero_precision_zeroes_higher_orders():
    scores = bleu([pair("a b a b", "a c a d")])
    assert scores[0] > 0 and scores[1:] == [0.0, 0.0, 0.0]
    smoothed = bleu([pair("a b a b", "a c a d")], smoothing=True)
    assert all(s > 0 for s in smoothed)


def test_empty_candidates_score_zero(caplog):
    assert bleu([pair("", "a b")]) == [0.0] * 4
    assert "empty" in caplog.text
    assert rouge_l_pair([], [["a"]]) == 0.0


def test_empty_corpus_rejected():
    for fn in (bleu, rouge_l, cider_d):
        with pytest.raises(ContractError):
            fn([])
    with pytest.raises(ContractError):
        EvalPair("x", ("a",), ())


def test_rouge_examples():
    assert rouge_l([pair("a b c", "a b c")]) == 1.0
    assert rouge_l([pair("a b c", "d e f")]) == 0.0
    assert lcs_length("a b c d".split(), "a c d e".split()) == 3
    for beta in (0.5, 1.0, 1.2, 3.0):
        assert rouge_l_pair("a b c d".split(), ["a c d e".split()], beta) == pytest.approx(0.75, abs=1e-12)


def test_cider_candidate_equals_reference_scores_ten():
    corpus = [pair("a b c d", "a b c d", id="0"), pair("e f g", "e f g", id="1"), pair("h i", "h j", id="2")]
    mean, per = cider_d(corpus, per_pair=True)
    assert per[0] == pytest.approx(10.0, abs=1e-12)
    # three tokens have no 4-gram, and a zero-norm order contributes nothing
    assert per[1] == pytest.approx(7.5, abs=1e-12)
    assert mean == pytest.approx(np.mean(per))


def test_cider_all_shared_ngrams_scores_zero():
    corpus = [pair("a b", "a b", id="0"), pair("a b", "a b", id="1")]
    assert cider_d(corpus) == 0.0
    assert cider_d([pair("a b", "a b")]) == 0.0


def test_cider_length_penalty():
    base = [pair("x y", "x y z w v u t s r q p o", id="0"), pair("k", "k", id="1")]
    mean, per = cider_d(base, per_pair=True)
    assert 0 < per[0] < 10 * math.exp(-(10**2) / 72) * 1.0001


# -- oracle equivalence ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(60))
def test_metrics_match_oracles(seed):
    raw = random_corpus(np.random.default_rng(seed))
    corpus = corpus_of(raw)
    for got, want in zip(bleu(corpus), bleu_oracle(raw)):
        assert abs(got - want) <= 1e-6
    assert abs(rouge_l(corpus) - rouge_oracle(raw)) <= 1e-6
    assert abs(cider_d(corpus) - cider_oracle(raw)) <= 1e-6


@pytest.mark.parametrize("seed", range(60))
def test_lcs_matches_bruteforce(seed):
    rng = np.random.default_rng(1000 + seed)
    a = list(rng.integers(0, 4, size=int(rng.integers(0, 9))))
    b = list(rng.integers(0, 4, size=int(rng.integers(0, 9))))
    assert lcs_length(a, b) == lcs_bruteforce(a, b)


def test_three_pair_cider_oracle():
    raw = [("a b c d".split(), ["a b c e".split(), "a b d".split()]), ("c d e".split(), ["c d e f".split()]), ("f g".split(), ["g f g".split()])]
    assert abs(cider_d(corpus_of(raw)) - cider_oracle(raw)) <= 1e-6


# -- properties ----------------------------------------------------------------------------

seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_permutation_invariance_and_ranges(seed):
    rng = np.random.default_rng(seed)
    corpus = corpus_of(random_corpus(rng))
    shuffled = [corpus[i] for i in rng.permutation(len(corpus))]
    a, b = score_corpus(corpus), score_corpus(shuffled)
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-12)
    for k in ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L"):
        assert 0.0 <= a[k] <= 1.0
    assert 0.0 <= a["CIDEr-D"] <= 10.0 + 1e-9


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_extra_reference_never_lowers_rouge(seed):
    rng = np.random.default_rng(seed)
    corpus = corpus_of(random_corpus(rng))
    extended = [EvalPair(p.id, p.candidate, p.references + (("zz", "yy"),)) for p in corpus]
    assert rouge_l(extended) >= rouge_l(corpus)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_metrics_are_pure(seed):
    corpus = corpus_of(random_corpus(np.random.default_rng(seed)))
    assert score_corpus(corpus) == score_corpus(list(corpus))


# -- I/O and classification --------------------------------------------------------------

def test_pairs_roundtrip(tmp_path):
    path = tmp_path / "pairs.jsonl"
    write_pairs(path, [("s1", "a b c", ["a b c", "a c"]), ("s2", "d", ["d e"])])
    pairs = read_pairs(path)
    assert pairs[0] == pair("a b c", "a b c", "a c", id="s1")
    assert [p.id for p in pairs] == ["s1", "s2"]


def test_bad_pairs_file(tmp_path):
    path = tmp_path / "pairs.jsonl"
    path.write_text(json.dumps({"id": "x", "candidate": "a"}) + "\n")
    with pytest.raises(CorruptFileError):
        read_pairs(path)
    path.write_text("{not json\n")
    with pytest.raises(CorruptFileError):
        read_pairs(path)


def test_format_table_prints_raw_and_scaled():
    text = format_table({"BLEU-1": 0.5, "CIDEr-D": 2.5})
    assert "0.500000" in text and "50.00" in text and "250.00" in text


def test_precision_recall_f1():
    probs = np.array([[0.9, 0.1, 0.6], [0.2, 0.8, 0.4]])
    labels = np.array([[1, 0, 0], [0, 1, 1]])
    out = precision_recall_f1(probs, labels)
    # tp=2, fp=1, fn=1
    assert out == {"precision": pytest.approx(2 / 3), "recall": pytest.approx(2 / 3), "f1": pytest.approx(2 / 3)}
    assert precision_recall_f1(np.zeros((2, 2)), np.zeros((2, 2)))["f1"] == 1.0
    assert precision_recall_f1(np.ones((1, 2)), np.ones((1, 2)))["f1"] == 1.0
