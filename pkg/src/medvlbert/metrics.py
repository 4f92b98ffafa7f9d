"""Caption metrics: corpus BLEU-1..4, sentence ROUGE-L, CIDEr-D; plus multilabel P/R/F1."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, CorruptFileError
from .text import split_words

log = logging.getLogger(__name__)

Tokens = Sequence[str]


@dataclass(frozen=True)
class EvalPair:
    id: str
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise ContractError(f"pair {self.id!r} has no reference")

    @classmethod
    def from_text(cls, id: str, candidate: str, references: Iterable[str]) -> EvalPair:
        return cls(str(id), tuple(split_words(candidate)), tuple(tuple(split_words(r)) for r in references))


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ngram_profile(tokens: Tokens, max_n: int = 4) -> dict[int, Counter]:
    return {n: ngrams(tokens, n) for n in range(1, max_n + 1)}


# -- BLEU ------------------------------------------------------------------------

def bleu(corpus: Sequence[EvalPair], max_n: int = 4, smoothing: bool = False) -> list[float]:
    """Corpus-level BLEU-1..max_n.

    Clipped n-gram matches and candidate n-gram totals are pooled over the
    corpus; the brevity penalty uses the closest reference length per pair
    (ties toward the shorter).  Without smoothing a zero precision at order
    k zeroes BLEU-k and every higher order.
    """
    if not corpus:
        raise ContractError("bleu needs a non-empty corpus")
    correct = [0] * max_n
    guess = [0] * max_n
    cand_len = ref_len = 0
    for pair in corpus:
        c = len(pair.candidate)
        cand_len += c
        ref_len += min((len(r) for r in pair.references), key=lambda length: (abs(length - c), length))
        for n in range(1, max_n + 1):
            cand = ngrams(pair.candidate, n)
            max_ref: Counter = Counter()
            for ref in pair.references:
                max_ref |= ngrams(ref, n)
            guess[n - 1] += max(c - n + 1, 0)
            correct[n - 1] += sum(min(count, max_ref[g]) for g, count in cand.items())
    if cand_len == 0:
        log.warning("every candidate is empty; BLEU is 0")
        return [0.0] * max_n
    brevity = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    eps = 1e-9 if smoothing else 0.0
    scores = []
    log_sum = 0.0
    for k in range(max_n):
        num, den = correct[k] + eps, guess[k] + eps
        if num <= 0 or den <= 0 or math.isinf(log_sum):
            log_sum = -math.inf
            scores.append(0.0)
            continue
        log_sum += math.log(num / den)
        scores.append(brevity * math.exp(log_sum / (k + 1)))
    return scores


def modified_precision(pair: EvalPair, n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram count) for one pair."""
    cand = ngrams(pair.candidate, n)
    max_ref: Counter = Counter()
    for ref in pair.references:
        max_ref |= ngrams(ref, n)
    return sum(min(c, max_ref[g]) for g, c in cand.items()), sum(cand.values())


# -- ROUGE-L -----------------------------------------------------------------------

def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: Tokens, references: Sequence[Tokens], beta: float = 1.2) -> float:
    best = 0.0
    if not candidate:
        return 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1 + beta**2) * p * r / (r + beta**2 * p))
    return best


def rouge_l(corpus: Sequence[EvalPair], beta: float = 1.2) -> float:
    if not corpus:
        raise ContractError("rouge_l needs a non-empty corpus")
    return float(np.mean([rouge_l_pair(p.candidate, p.references, beta) for p in corpus]))


# -- CIDEr-D -------------------------------------------------------------------------

def cider_d(corpus: Sequence[EvalPair], max_n: int = 4, sigma: float = 6.0, per_pair: bool = False):
    """Mean CIDEr-D over the corpus (range [0, 10]).

    Document frequencies are counted over each pair's reference set.  A
    single-pair corpus has zero IDF everywhere and therefore scores 0.
    """
    if not corpus:
        raise ContractError("cider_d needs a non-empty corpus")
    ref_profiles = [[_flat_profile(r, max_n) for r in p.references] for p in corpus]
    df: Counter = Counter()
    for refs in ref_profiles:
        df.update({g for prof in refs for g in prof})
    log_n = math.log(float(len(corpus)))

    def tfidf(profile: Counter):
        vec: list[dict] = [{} for _ in range(max_n)]
        norm = [0.0] * max_n
        for g, tf in profile.items():
            w = tf * (log_n - math.log(max(1.0, df[g])))
            vec[len(g) - 1][g] = w
            norm[len(g) - 1] += w * w
        return vec, [math.sqrt(x) for x in norm]

    scores = []
    for pair, refs in zip(corpus, ref_profiles):
        vec_c, norm_c = tfidf(_flat_profile(pair.candidate, max_n))
        total = np.zeros(max_n)
        for ref_tokens, prof in zip(pair.references, refs):
            vec_r, norm_r = tfidf(prof)
            delta = float(len(pair.candidate) - len(ref_tokens))
            penalty = math.exp(-(delta**2) / (2 * sigma**2))
            for k in range(max_n):
                if norm_c[k] == 0 or norm_r[k] == 0:
                    continue
                dot = sum(min(w, vec_r[k].get(g, 0.0)) * vec_r[k].get(g, 0.0) for g, w in vec_c[k].items())
                total[k] += dot / (norm_c[k] * norm_r[k]) * penalty
        scores.append(10.0 * float(total.mean()) / len(pair.references))
    mean = float(np.mean(scores))
    return (mean, scores) if per_pair else mean


def _flat_profile(tokens: Tokens, max_n: int) -> Counter:
    out: Counter = Counter()
    for n in range(1, max_n + 1):
        out.update(ngrams(tokens, n))
    return out


# -- aggregate -------------------------------------------------------------------------

METRIC_NAMES = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr-D")


def score_corpus(corpus: Sequence[EvalPair]) -> dict[str, float]:
    out = dict(zip(METRIC_NAMES[:4], bleu(corpus)))
    out["ROUGE-L"] = rouge_l(corpus)
    out["CIDEr-D"] = cider_d(corpus)
    return out


def format_table(scores: dict[str, float]) -> str:
    """Raw values plus the x100 presentation used in captioning tables."""
    lines = [f"{'metric':<10}{'raw':>12}{'x100':>12}"]
    for name in METRIC_NAMES:
        if name in scores:
            lines.append(f"{name:<10}{scores[name]:>12.6f}{100 * scores[name]:>12.2f}")
    return "\n".join(lines)


def read_pairs(path: str | Path) -> list[EvalPair]:
    """One JSON object per line: {"id", "candidate", "references": [...]}."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pairs.append(EvalPair.from_text(rec["id"], rec["candidate"], rec["references"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorruptFileError(f"{path}:{lineno}: bad evaluation record ({exc})") from exc
    return pairs


def write_pairs(path: str | Path, records: Iterable[tuple[str, str, Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for id_, cand, refs in records:
            fh.write(json.dumps({"id": id_, "candidate": cand, "references": list(refs)}) + "\n")


# -- classification --------------------------------------------------------------------

def precision_recall_f1(probs, labels, threshold: float = 0.5) -> dict[str, float]:
    """Micro-averaged multilabel precision, recall and F1."""
    pred = np.asarray(probs) >= threshold
    y = np.asarray(labels).astype(bool)
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    if tp + fp + fn == 0:
        precision = recall = f1 = 1.0
    return {"precision": precision, "recall": recall, "f1": f1}
