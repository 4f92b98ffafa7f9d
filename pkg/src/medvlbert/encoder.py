"""Terminology encoder: terminology tokens attended jointly with a context.

A unified sequence ``[terminologies ; context]`` is built for either the
visual grid or a textbook passage and run through a pre-norm transformer
stack.  The first ``N_m`` output rows are the updated terminology features
used for classification and as the decoder's memory.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, CorruptFileError, VersionMismatchError
from .layers import Embedding, EncoderLayer, LayerNorm, Linear, Module, Parameter, _normal
from .tensor import Tensor

SEG_TERMINOLOGY, SEG_VISUAL, SEG_TEXTUAL = 0, 1, 2
SEGMENT_NAMES = ("terminology", "visual", "textual")
BRANCHES = ("visual", "textual")


class TerminologyEmbeddings(Module):
    """The learned table M shared by both encoder branches."""

    def __init__(self, names: Sequence[str], d_term: int, rng: np.random.Generator):
        if not names:
            raise ContractError("at least one terminology is required")
        self.names = list(names)
        self.table = Parameter(_normal(rng, (len(names), d_term), 1.0))

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class VisualContext:
    """Spatial features, shape (batch, grid_height*grid_width, d_v), row-major over the grid."""

    grid: Tensor
    grid_height: int
    grid_width: int

    def __post_init__(self):
        if self.grid.ndim != 3 or self.grid.shape[1] != self.grid_height * self.grid_width:
            raise ContractError(
                f"visual context {self.grid.shape} does not match a {self.grid_height}x{self.grid_width} grid"
            )


@dataclass
class TextbookEmbeddings:
    """Token embeddings of shape (batch, N_e, d_e); ``mask`` marks real (non-pad) tokens."""

    seq: Tensor
    mask: np.ndarray | None = None
    tokens: list[list[str]] | None = None


@dataclass
class UnifiedFeatures:
    seq: Tensor
    segment_ids: np.ndarray
    boundary: int
    key_mask: np.ndarray | None = None
    labels: list[list[str]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.seq.shape[1]


@dataclass
class TerminologyFeatures:
    feats: Tensor
    names: list[str]


class TerminologyEncoder(Module):
    """One branch of the encoder (visual or textual) with its own parameters."""

    def __init__(
        self,
        branch: str,
        *,
        d_model: int,
        d_term: int,
        d_context: int,
        n_layers: int,
        n_heads: int,
        d_ff: int,
        rng: np.random.Generator,
        grid_shape: tuple[int, int] = (7, 7),
        max_context_len: int = 64,
    ):
        if branch not in BRANCHES:
            raise ContractError(f"unknown branch {branch!r}")
        self.branch = branch
        self.term_proj = Linear(d_term, d_model, rng)
        self.context_proj = Linear(d_context, d_model, rng)
        # row 0: terminology segment, row 1: this branch's context segment
        self.segment = Embedding(2, d_model, rng)
        if branch == "visual":
            self.grid_shape = tuple(grid_shape)
            self.row_pos = Embedding(grid_shape[0], d_model, rng)
            self.col_pos = Embedding(grid_shape[1], d_model, rng)
        else:
            self.max_context_len = max_context_len
            self.pos = Embedding(max_context_len, d_model, rng)
        self.layers = [EncoderLayer(d_model, n_heads, d_ff, rng) for _ in range(n_layers)]
        self.final_norm = LayerNorm(d_model)

    # -- unified sequence ----------------------------------------------------
    def build_unified(self, M: TerminologyEmbeddings, context: VisualContext | TextbookEmbeddings) -> UnifiedFeatures:
        n_m = len(M)
        if isinstance(context, VisualContext):
            if self.branch != "visual":
                raise ContractError("visual context given to the textual branch")
            ctx_seq, seg_tag = context.grid, SEG_VISUAL
            h, w = context.grid_height, context.grid_width
            if (h, w) != self.grid_shape:
                raise ContractError(f"grid {h}x{w} differs from configured {self.grid_shape}")
            rows, cols = np.divmod(np.arange(h * w), w)
            pos = self.row_pos(rows) + self.col_pos(cols)
            ctx_labels = [f"({r},{c})" for r, c in zip(rows, cols)]
            key_mask = None
        elif isinstance(context, TextbookEmbeddings):
            if self.branch != "textual":
                raise ContractError("textbook context given to the visual branch")
            ctx_seq, seg_tag = context.seq, SEG_TEXTUAL
            n_e = ctx_seq.shape[1]
            if n_e > self.max_context_len:
                raise ContractError(f"textbook passage of {n_e} tokens exceeds {self.max_context_len}")
            pos = self.pos(np.arange(n_e))
            ctx_labels = None
            key_mask = context.mask
        else:
            raise ContractError(f"unsupported context type {type(context).__name__}")
        if ctx_seq.ndim != 3 or ctx_seq.shape[1] == 0:
            raise ContractError("context must be a non-empty (batch, N_c, d_c) sequence")
        batch, n_c = ctx_seq.shape[0], ctx_seq.shape[1]

        term = self.term_proj(M.table) + self.segment.table[0]
        term = T.broadcast_to(term.reshape(1, n_m, term.shape[-1]), (batch, n_m, term.shape[-1]))
        ctx = self.context_proj(ctx_seq) + self.segment.table[1] + pos
        seq = T.concat([term, ctx], axis=1)

        segment_ids = np.array([SEG_TERMINOLOGY] * n_m + [seg_tag] * n_c, dtype=np.int64)
        if key_mask is not None:
            key_mask = np.concatenate([np.ones((batch, n_m), dtype=bool), np.asarray(key_mask, dtype=bool)], axis=1)
        labels = []
        for b in range(batch):
            if ctx_labels is not None:
                row = ctx_labels
            elif context.tokens is not None:
                row = list(context.tokens[b])[:n_c] + ["<pad>"] * max(0, n_c - len(context.tokens[b]))
            else:
                row = [f"t{i}" for i in range(n_c)]
            labels.append(list(M.names) + list(row))
        return UnifiedFeatures(seq, segment_ids, n_m, key_mask, labels)

    # -- forward -------------------------------------------------------------
    def attention_mask(self, u: UnifiedFeatures, block_cross_segment: bool = False) -> np.ndarray | None:
        """Boolean (batch|1, L, L) mask; True means attendable."""
        mask = None
        if u.key_mask is not None:
            mask = u.key_mask[:, None, :]
        if block_cross_segment:
            is_term = u.segment_ids == SEG_TERMINOLOGY
            same = is_term[:, None] == is_term[None, :]
            mask = same[None] if mask is None else mask & same[None]
        return mask

    def encode(self, u: UnifiedFeatures, block_cross_segment: bool = False) -> tuple[Tensor, TerminologyFeatures]:
        mask = self.attention_mask(u, block_cross_segment)
        h = u.seq
        for layer in self.layers:
            h = layer(h, mask)
        h = self.final_norm(h)
        names = u.labels[0][: u.boundary] if u.labels else []
        return h, TerminologyFeatures(h[:, : u.boundary], names)

    def set_recording(self, on: bool) -> None:
        for layer in self.layers:
            layer.attn.record = on
            if not on:
                layer.attn.last_weights = layer.attn.last_logits = None

    def export_attention(self, u: UnifiedFeatures, sample: int = 0) -> AttentionExport:
        """Per-layer, per-head weights of one sample from the most recent recorded forward."""
        if not self.layers or any(layer.attn.last_weights is None for layer in self.layers):
            raise ContractError("attention recording was not enabled for the last forward pass")
        n = len(u)
        if u.key_mask is not None:
            n = int(u.key_mask[sample].sum())
        weights = np.stack([layer.attn.last_weights[sample, :, :n, :n] for layer in self.layers])
        logits = np.stack([layer.attn.last_logits[sample, :, :n, :n] for layer in self.layers])
        return AttentionExport(
            self.branch, u.labels[sample][:n], u.boundary, weights.astype(np.float32), logits.astype(np.float32)
        )


# -- classification ------------------------------------------------------------

class ClassifierHead(Module):
    """Per-terminology logit ``W m̂_i + b`` shared by both branches."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.proj = Linear(d_model, 1, rng)

    def logits(self, tf: TerminologyFeatures | Tensor) -> Tensor:
        feats = tf.feats if isinstance(tf, TerminologyFeatures) else tf
        out = self.proj(feats)
        return out.reshape(out.shape[:-1])


def classify(tf: TerminologyFeatures | Tensor, head: ClassifierHead) -> Tensor:
    return T.sigmoid(head.logits(tf))


def _check_labels(y, shape) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ContractError(f"labels shape {y.shape} != {tuple(shape)}")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("classification labels must be 0 or 1")
    return y


def classification_loss(logits: Tensor, y) -> Tensor:
    """Average binary cross-entropy over terminologies (and batch), from logits."""
    y = _check_labels(y, logits.shape)
    return T.bce_with_logits(logits, y).mean()


def binary_cross_entropy(x, y, clamp: float = 1e-12) -> float:
    """Probability-space form ``-(1/N) Σ [y log x + (1-y) log(1-x)]``."""
    x = np.clip(np.asarray(x, dtype=np.float64), clamp, 1 - clamp)
    y = _check_labels(y, x.shape).astype(np.float64)
    return float(-(y * np.log(x) + (1 - y) * np.log(1 - x)).mean())


# -- attention export ----------------------------------------------------------

_ATT_MAGIC = b"AGAT"
_ATT_VERSION = 1


@dataclass
class AttentionExport:
    branch: str
    labels: list[str]
    boundary: int
    weights: np.ndarray  # (layers, heads, L, L)
    logits: np.ndarray | None = None

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[1]

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(_ATT_MAGIC)
        out.write(struct.pack("<I", _ATT_VERSION))
        _write_str(out, self.branch)
        out.write(struct.pack("<IIII", self.n_layers, self.n_heads, len(self.labels), self.boundary))
        for label in self.labels:
            _write_str(out, label)
        out.write(np.ascontiguousarray(self.weights, dtype="<f4").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> AttentionExport:
        stream = io.BytesIO(buf)
        if stream.read(4) != _ATT_MAGIC:
            raise CorruptFileError("not an attention export (bad magic)")
        (version,) = _unpack(stream, "<I")
        if version != _ATT_VERSION:
            raise VersionMismatchError(f"attention export version {version}, expected {_ATT_VERSION}")
        branch = _read_str(stream)
        n_layers, n_heads, n, boundary = _unpack(stream, "<IIII")
        labels = [_read_str(stream) for _ in range(n)]
        count = n_layers * n_heads * n * n
        raw = stream.read(4 * count)
        if len(raw) != 4 * count or stream.read(1):
            raise CorruptFileError("attention export payload has the wrong length")
        weights = np.frombuffer(raw, dtype="<f4").reshape(n_layers, n_heads, n, n).astype(np.float32)
        return cls(branch, labels, boundary, weights)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> AttentionExport:
        return cls.from_bytes(Path(path).read_bytes())

    def to_text(self, precision: int = 4) -> str:
        """Plain-text matrix dump for debugging."""
        lines = [f"branch {self.branch} layers {self.n_layers} heads {self.n_heads} boundary {self.boundary}"]
        lines.append("labels " + " | ".join(self.labels))
        for li in range(self.n_layers):
            for hi in range(self.n_heads):
                lines.append(f"# layer {li} head {hi}")
                for row in self.weights[li, hi]:
                    lines.append(" ".join(f"{v:.{precision}f}" for v in row))
        return "\n".join(lines) + "\n"

    def top_context(self, k: int = 1, layer: int = -1) -> list[tuple[str, list[tuple[str, float]]]]:
        """For each terminology, the context positions it attends to most (head-averaged)."""
        w = self.weights[layer].mean(axis=0)
        b = self.boundary
        out = []
        for i in range(b):
            ctx = w[i, b:]
            order = np.argsort(-ctx, kind="stable")[:k]
            out.append((self.labels[i], [(self.labels[b + j], float(ctx[j])) for j in order]))
        return out


def _write_str(out: io.BytesIO, s: str) -> None:
    data = s.encode("utf-8")
    out.write(struct.pack("<I", len(data)))
    out.write(data)


def _unpack(stream: io.BytesIO, fmt: str):
    size = struct.calcsize(fmt)
    raw = stream.read(size)
    if len(raw) != size:
        raise CorruptFileError("unexpected end of file")
    return struct.unpack(fmt, raw)


def _read_str(stream: io.BytesIO) -> str:
    (n,) = _unpack(stream, "<I")
    raw = stream.read(n)
    if len(raw) != n:
        raise CorruptFileError("unexpected end of file in string")
    return raw.decode("utf-8")
