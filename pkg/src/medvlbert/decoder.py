"""Shared autoregressive language decoder with weight-tied output projection."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encoder import TerminologyFeatures
from .errors import ContractError, DimensionError
from .layers import DecoderBlock, Embedding, LayerNorm, Module, causal_mask
from .tensor import Tensor
from .text import BOS, EOS, PAD


def _feats(term_feats: TerminologyFeatures | Tensor) -> Tensor:
    feats = term_feats.feats if isinstance(term_feats, TerminologyFeatures) else term_feats
    if feats.ndim != 3 or feats.shape[1] == 0:
        raise ContractError("decoder needs a non-empty (batch, N_m, d) terminology feature tensor")
    return feats


class LanguageDecoder(Module):
    def __init__(
        self,
        vocab_size: int,
        *,
        d_model: int,
        n_blocks: int,
        n_heads: int,
        d_ff: int,
        max_len: int,
        rng: np.random.Generator,
    ):
        self.word_embed = Embedding(vocab_size, d_model, rng)
        self.pos_embed = Embedding(max_len, d_model, rng)
        self.blocks = [DecoderBlock(d_model, n_heads, d_ff, rng) for _ in range(n_blocks)]
        self.final_norm = LayerNorm(d_model)
        self.max_len = max_len

    @property
    def vocab_size(self) -> int:
        return self.word_embed.table.shape[0]

    def embed(self, ids) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        n = ids.shape[1]
        if n > self.max_len:
            raise ContractError(f"sequence length {n} exceeds max_len {self.max_len}")
        return self.word_embed(ids) + self.pos_embed(np.arange(n))

    def forward(self, ids, term_feats: TerminologyFeatures | Tensor) -> Tensor:
        """Logits of shape (batch, seq, |V|); row i sees tokens 0..i only."""
        feats = _feats(term_feats)
        h = self.embed(ids)
        if h.shape[0] != feats.shape[0]:
            raise DimensionError(f"token batch {h.shape[0]} != terminology batch {feats.shape[0]}")
        mask = causal_mask(h.shape[1])
        for block in self.blocks:
            h = block(h, feats, mask)
        h = self.final_norm(h)
        return h @ self.word_embed.table.swapaxes(0, 1)

    __call__ = forward

    # -- decoding ------------------------------------------------------------
    def generate(
        self,
        term_feats: TerminologyFeatures | Tensor,
        mode: str = "greedy",
        max_len: int | None = None,
        beam_width: int = 4,
        length_normalize: bool = False,
    ) -> list[list[int]]:
        """Decode one sequence per batch row, starting from BOS.

        Sequences stop at EOS or when ``max_len`` tokens (BOS included) exist.
        """
        max_len = min(max_len or self.max_len, self.max_len)
        if max_len < 1:
            raise ContractError("max_len must be at least 1")
        feats = _feats(term_feats)
        with T.no_grad():
            if mode == "greedy":
                return self._greedy(feats, max_len)
            if mode == "beam":
                if beam_width < 1:
                    raise ContractError("beam width must be positive")
                return [self._beam(feats[b : b + 1], max_len, beam_width, length_normalize) for b in range(feats.shape[0])]
        raise ContractError(f"unknown decoding mode {mode!r}")

    def _greedy(self, feats: Tensor, max_len: int) -> list[list[int]]:
        batch = feats.shape[0]
        seqs = np.full((batch, 1), BOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        while seqs.shape[1] < max_len and not done.all():
            logits = self.forward(seqs, feats).data[:, -1]
            # np.argmax returns the first maximum: lowest token id wins ties
            nxt = np.where(done, PAD, logits.argmax(axis=-1))
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS
        out = []
        for row in seqs:
            ids = row.tolist()
            if EOS in ids:
                ids = ids[: ids.index(EOS) + 1]
            out.append(ids)
        return out

    def _beam(self, feats: Tensor, max_len: int, width: int, length_normalize: bool) -> list[int]:
        def score(c: tuple[float, list[int]]) -> float:
            lp, seq = c
            return lp / (len(seq) - 1) if length_normalize else lp

        alive: list[tuple[float, list[int]]] = [(0.0, [BOS])]
        finished: list[tuple[float, list[int]]] = []
        while alive and len(alive[0][1]) < max_len and len(finished) < width:
            ids = np.array([seq for _, seq in alive], dtype=np.int64)
            expanded = T.broadcast_to(feats, (len(alive),) + feats.shape[1:])
            logp = _log_softmax(self.forward(ids, expanded).data[:, -1].astype(np.float64))
            candidates = [
                (base + float(row[tok]), seq + [tok]) for (base, seq), row in zip(alive, logp) for tok in range(row.shape[0])
            ]
            # highest log-probability first; ties resolved toward lower token ids
            candidates.sort(key=lambda c: (-c[0], c[1]))
            alive = []
            for cand in candidates[:width]:
                (finished if cand[1][-1] == EOS else alive).append(cand)
            if finished and alive and not length_normalize:
                # log-probabilities only decrease, so no live hypothesis can overtake
                if max(score(c) for c in finished) >= alive[0][0]:
                    break
        pool = finished or alive
        return sorted(pool, key=lambda c: (-score(c), c[1]))[0][1]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def lm_loss(logits: Tensor, targets) -> Tensor:
    """Summed token negative log-likelihood over non-PAD targets."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape[:-1]} and targets {targets.shape} differ in length")
    return T.cross_entropy(logits, targets, ignore_index=PAD).sum()


def count_targets(targets) -> int:
    return int((np.asarray(targets) != PAD).sum())


def shift_for_teacher_forcing(batch_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inputs drop the final position, targets drop BOS."""
    return batch_ids[:, :-1], batch_ids[:, 1:]


def perplexity(
    corpus: Sequence[Sequence[int]],
    term_feats_provider: Callable[[int], TerminologyFeatures | Tensor],
    decoder: LanguageDecoder,
) -> float:
    """exp(total NLL / total non-PAD target tokens) over complete sequences."""
    if len(corpus) == 0:
        raise ContractError("perplexity needs a non-empty corpus")
    total, count = 0.0, 0
    with T.no_grad():
        for i, ids in enumerate(corpus):
            ids = np.asarray(ids, dtype=np.int64)[None]
            inputs, targets = shift_for_teacher_forcing(ids)
            logits = decoder.forward(inputs, term_feats_provider(i))
            total += float(lm_loss(logits, targets).data)
            count += count_targets(targets)
    if count == 0:
        raise ContractError("corpus has no scoreable tokens")
    return math.exp(total / count)
