"""Vocabulary and whitespace/punctuation tokenization."""

from __future__ import annotations

import hashlib
import re
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError, CorruptFileError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:['-][a-z0-9]+)*|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    """Lowercase, then split on whitespace with punctuation as separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(split_words(text))


class Vocabulary:
    """Dense id <-> token map with fixed reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ContractError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary contains duplicate tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> Vocabulary:
        """Collect tokens in sorted order so the id assignment is reproducible."""
        seen = set()
        for text in texts:
            seen.update(split_words(text))
        seen.difference_update(RESERVED)
        return cls(list(RESERVED) + sorted(seen))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if not lines or lines[-1] != "":
            raise CorruptFileError(f"{path}: vocabulary file must end with a newline")
        try:
            return cls(lines[:-1])
        except ContractError as exc:
            raise CorruptFileError(f"{path}: {exc}") from exc


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [BOS] + [vocab.id(w) for w in split_words(text)] + [EOS]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Join tokens with spaces, dropping PAD/BOS and stopping at EOS."""
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.token(i))
    return " ".join(words)


def unk_rate(token_lists: Iterable[Sequence[int]]) -> float:
    total = unk = 0
    for ids in token_lists:
        body = [i for i in ids if i not in (PAD, BOS, EOS)]
        total += len(body)
        unk += sum(1 for i in body if i == UNK)
    return unk / total if total else 0.0
