"""The full model: patch embedder, two terminology encoders, shared decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .decoder import LanguageDecoder, lm_loss, shift_for_teacher_forcing
from .encoder import (
    ClassifierHead,
    TerminologyEmbeddings,
    TerminologyEncoder,
    TerminologyFeatures,
    TextbookEmbeddings,
    UnifiedFeatures,
    VisualContext,
    classification_loss,
)
from .errors import ContractError
from .layers import Embedding, Linear, Module
from .tensor import Tensor
from .text import PAD


@dataclass
class ModelConfig:
    d_model: int = 64
    d_term: int = 32
    d_visual: int = 32
    d_text: int = 32
    enc_layers: int = 2
    enc_heads: int = 8
    dec_layers: int = 2
    dec_heads: int = 8
    d_ff: int = 0  # 0 means 4 * d_model
    max_len: int = 64
    max_context_len: int = 64
    dropout: float = 0.0
    init_seed: int = 0

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


class PatchEmbedder(Module):
    """Per-cell affine map channels -> d_v standing in for a CNN backbone."""

    def __init__(self, channels: int, d_visual: int, grid: tuple[int, int], rng: np.random.Generator):
        self.grid = tuple(grid)
        self.channels = channels
        self.proj = Linear(channels, d_visual, rng)

    def __call__(self, images) -> VisualContext:
        return patch_embed(images, self)


def patch_embed(images, params: PatchEmbedder) -> VisualContext:
    """(batch, H, W, C) grid -> VisualContext with N_v = H*W rows per sample."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    h, w = params.grid
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1:] != (h, w, params.channels):
        raise ContractError(f"image shape {x.shape} does not match grid ({h}, {w}, {params.channels})")
    flat = x.reshape(x.shape[0], h * w, params.channels)
    return VisualContext(params.proj(flat), h, w)


# parameter-name prefixes that each procedure's forward path touches
SHARED_PREFIXES = ("terminology.", "classifier.", "decoder.")
PATH_PREFIXES = {
    "pretrain": SHARED_PREFIXES + ("textbook.", "textual_encoder."),
    "transfer": SHARED_PREFIXES + ("patch.", "visual_encoder."),
}


class MedicalVLBert(Module):
    def __init__(self, config: ModelConfig, terminology_names: Sequence[str], vocab_size: int, grid: Sequence[int] = (7, 7, 4)):
        self.config = config
        self.grid = tuple(grid)
        rng = np.random.default_rng(config.init_seed)
        c = config
        h, w, channels = self.grid
        self.terminology = TerminologyEmbeddings(terminology_names, c.d_term, rng)
        self.patch = PatchEmbedder(channels, c.d_visual, (h, w), rng)
        self.textbook = Embedding(vocab_size, c.d_text, rng, std=1.0)
        common = dict(d_model=c.d_model, d_term=c.d_term, n_layers=c.enc_layers, n_heads=c.enc_heads, d_ff=c.ff_width, rng=rng)
        self.visual_encoder = TerminologyEncoder("visual", d_context=c.d_visual, grid_shape=(h, w), **common)
        self.textual_encoder = TerminologyEncoder("textual", d_context=c.d_text, max_context_len=c.max_context_len, **common)
        self.classifier = ClassifierHead(c.d_model, rng)
        self.decoder = LanguageDecoder(
            vocab_size, d_model=c.d_model, n_blocks=c.dec_layers, n_heads=c.dec_heads, d_ff=c.ff_width, max_len=c.max_len, rng=rng
        )
        self.dropout_rng = np.random.default_rng(c.init_seed + 1)
        for m in self.modules():
            if hasattr(m, "dropout_p"):
                m.dropout_p = c.dropout
                m.dropout_rng = self.dropout_rng
        for name, p in self.named_parameters():
            p.name = name

    @property
    def n_terms(self) -> int:
        return len(self.terminology)

    def path_parameters(self, kind: str) -> dict[str, Tensor]:
        prefixes = PATH_PREFIXES[kind]
        return {n: p for n, p in self.named_parameters() if n.startswith(prefixes)}

    # -- encoders ------------------------------------------------------------
    def encode_images(self, images, block_cross_segment: bool = False) -> tuple[UnifiedFeatures, Tensor, TerminologyFeatures]:
        u = self.visual_encoder.build_unified(self.terminology, self.patch(images))
        out, tf = self.visual_encoder.encode(u, block_cross_segment)
        return u, out, tf

    def encode_textbook(
        self, ids: np.ndarray, tokens: list[list[str]] | None = None, block_cross_segment: bool = False
    ) -> tuple[UnifiedFeatures, Tensor, TerminologyFeatures]:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        ctx = TextbookEmbeddings(self.textbook(ids), ids != PAD, tokens)
        u = self.textual_encoder.build_unified(self.terminology, ctx)
        out, tf = self.textual_encoder.encode(u, block_cross_segment)
        return u, out, tf

    def encode(self, kind: str, batch: Batch) -> TerminologyFeatures:
        if kind == "transfer":
            return self.encode_images(batch.images)[2]
        return self.encode_textbook(batch.context_ids)[2]

    # -- losses ----------------------------------------------------------------
    def losses(self, kind: str, batch: Batch) -> tuple[Tensor, Tensor, int]:
        """(classification loss, per-sample summed LM loss averaged over the batch, target token count)."""
        tf = self.encode(kind, batch)
        l_cls = classification_loss(self.classifier.logits(tf), batch.labels)
        inputs, targets = shift_for_teacher_forcing(batch.ids)
        logits = self.decoder.forward(inputs, tf)
        l_t = lm_loss(logits, targets) * (1.0 / len(batch))
        return l_cls, l_t, int((targets != PAD).sum())


@dataclass
class Batch:
    kind: str
    sample_ids: list[int]
    labels: np.ndarray
    ids: np.ndarray  # (B, L) padded BOS..EOS
    images: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def context_ids(self) -> np.ndarray:
        return self.ids


def collate(samples: Sequence) -> Batch:
    """Stack homogeneous samples; token sequences are right-padded with PAD."""
    if not samples:
        raise ContractError("empty batch")
    kinds = {s.kind for s in samples}
    if len(kinds) != 1:
        raise ContractError(f"mixed-kind batch: {sorted(kinds)}")
    kind = kinds.pop()
    n = max(len(s.tokens) for s in samples)
    ids = np.full((len(samples), n), PAD, dtype=np.int64)
    for i, s in enumerate(samples):
        ids[i, : len(s.tokens)] = s.tokens
    labels = np.stack([np.asarray(s.labels, dtype=np.int64) for s in samples])
    images = np.stack([s.image for s in samples]).astype(T.get_default_dtype()) if kind == "transfer" else None
    return Batch(kind, [s.id for s in samples], labels, ids, images)
