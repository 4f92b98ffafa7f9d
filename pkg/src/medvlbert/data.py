"""Synthetic radiology corpora, dataset container files and their integrity checks.

The generator plants each terminology's visual signature (a set of grid
cells on one channel, amplitude set by severity) into a noisy grid and
renders a report that mentions exactly the planted terminologies.  Textbook
passages mention a terminology subset in encyclopedic prose.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .errors import ConfigError, CorruptFileError, HashMismatchError, VersionMismatchError
from .text import Vocabulary, detokenize, normalize, tokenize

SEVERITIES = ("mild", "severe")

TERMINOLOGY_POOL = (
    "ground glass opacity",
    "consolidation",
    "pleural effusion",
    "pulmonary nodule",
    "atelectasis",
    "cardiomegaly",
    "emphysema",
    "fibrous stripes",
    "pneumothorax",
    "calcification",
    "bronchiectasis",
    "lymphadenopathy",
    "interstitial thickening",
    "crazy paving pattern",
    "air bronchogram",
    "pulmonary mass",
)
REGION_NAMES = ("right upper lobe", "left upper lobe", "right lower lobe", "left lower lobe")

REPORT_TEMPLATES = (
    "there is mild {name} in the {location} .",
    "extensive {name} is seen in the {location} .",
    "a small area of {name} is noted in the {location} .",
    "marked {name} involves the {location} .",
)
TEXTBOOK_TEMPLATES = (
    "{name} commonly appears in the {location} on chest ct .",
    "{name} may indicate an active lung disease .",
)
NORMAL_TEMPLATES = ("the lungs are clear .", "no active lung disease is seen .")


@dataclass
class Terminology:
    name: str
    location: str
    channel: int
    cells: list[list[int]]
    report_templates: list[str]
    textbook_templates: list[str]

    def sentence(self, template: int) -> str:
        return self.report_templates[template].format(name=self.name, location=self.location)


@dataclass
class SyntheticGrammar:
    """Everything needed to generate a corpus, serialisable as YAML."""

    terminologies: list[Terminology]
    normal_templates: list[str]
    # severity -> weights over each terminology's report templates
    template_mix: dict[str, list[float]]
    normal_mix: list[float]
    grid: list[int] = field(default_factory=lambda: [7, 7, 4])
    amplitudes: dict[str, float] = field(default_factory=lambda: {"mild": 1.0, "severe": 2.0})
    noise_std: float = 0.1
    distractor_rate: float = 0.05
    distractor_amplitude: float = 0.4
    normal_prob: float = 0.2
    max_findings: int = 3
    max_textbook_terms: int = 2
    max_repeat: int = 50
    seed: int = 0
    name: str = "A"

    def __post_init__(self):
        self.validate()

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terminologies]

    def validate(self) -> None:
        if not self.terminologies:
            raise ConfigError("grammar needs at least one terminology")
        names = self.names
        if len(set(names)) != len(names):
            raise ConfigError("terminology names must be unique")
        h, w, c = self.grid
        for t in self.terminologies:
            if not t.cells:
                raise ConfigError(f"{t.name}: needs at least one visual pattern cell")
            if len(t.report_templates) < 2 or len(t.textbook_templates) < 1:
                raise ConfigError(f"{t.name}: needs >= 2 report templates and a textbook template")
            if not 0 <= t.channel < c or any(not (0 <= r < h and 0 <= q < w) for r, q in t.cells):
                raise ConfigError(f"{t.name}: visual pattern outside the {h}x{w}x{c} grid")
        for sev in SEVERITIES:
            mix = self.template_mix.get(sev)
            if mix is None or len(mix) != len(self.terminologies[0].report_templates) or sum(mix) <= 0:
                raise ConfigError(f"template_mix[{sev!r}] must weight every report template")
        if len(self.normal_mix) != len(self.normal_templates) or sum(self.normal_mix) <= 0:
            raise ConfigError("normal_mix must weight every normal template")
        if not 1 <= self.max_findings <= len(self.terminologies):
            raise ConfigError(f"max_findings must lie in [1, {len(self.terminologies)}]")
        if not 1 <= self.max_textbook_terms <= len(self.terminologies):
            raise ConfigError(f"max_textbook_terms must lie in [1, {len(self.terminologies)}]")
        # rendered sentences must identify a single terminology
        owners: dict[str, str] = {}
        for t in self.terminologies:
            for i in range(len(t.report_templates)):
                s = normalize(t.sentence(i))
                if owners.setdefault(s, t.name) != t.name:
                    raise ConfigError(f"sentence {s!r} is ambiguous between terminologies")

    # -- serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticGrammar:
        d = dict(d)
        d["terminologies"] = [Terminology(**t) for t in d["terminologies"]]
        return cls(**d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None, width=100)

    @classmethod
    def from_yaml(cls, text: str) -> SyntheticGrammar:
        try:
            return cls.from_dict(yaml.safe_load(text))
        except (TypeError, KeyError, yaml.YAMLError) as exc:
            raise ConfigError(f"invalid grammar file: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def distinct_reports(self) -> int:
        """Number of distinct (finding subset, severity) configurations."""
        n = len(self.terminologies)
        return 1 + sum(math.comb(n, k) * len(SEVERITIES) ** k for k in range(1, self.max_findings + 1))

    def all_sentences(self) -> Iterable[str]:
        for t in self.terminologies:
            for i in range(len(t.report_templates)):
                yield t.sentence(i)
            for tpl in t.textbook_templates:
                yield tpl.format(name=t.name, location=t.location)
        yield from self.normal_templates


def default_grammar(n_terms: int = 16, seed: int = 0, variant: str = "A", grid=(7, 7, 4)) -> SyntheticGrammar:
    """Built-in grammar; variant "B" is the small sibling with a different template mix."""
    h, w, c = grid
    if n_terms > len(TERMINOLOGY_POOL) or n_terms > len(REGION_NAMES) * c:
        raise ConfigError(f"at most {min(len(TERMINOLOGY_POOL), len(REGION_NAMES) * c)} terminologies available")
    if h < 3 or w < 3:
        raise ConfigError("grid must be at least 3x3")
    rng = np.random.default_rng(seed)
    # four disjoint quadrant regions; the centre cross is background
    qh, qw = h // 2, w // 2
    quadrants = [
        [(r, q) for r in range(r0, r0 + qh) for q in range(c0, c0 + qw)]
        for r0, c0 in ((0, 0), (0, w - qw), (h - qh, 0), (h - qh, w - qw))
    ]
    terms = []
    for i in range(n_terms):
        quad = i % len(quadrants)
        cells = quadrants[quad]
        k = max(1, math.ceil(len(cells) * 5 / 9))
        chosen = sorted(rng.choice(len(cells), size=k, replace=False).tolist())
        terms.append(
            Terminology(
                name=TERMINOLOGY_POOL[i],
                location=REGION_NAMES[quad],
                channel=(i // len(quadrants)) % c,
                cells=[list(cells[j]) for j in chosen],
                report_templates=list(REPORT_TEMPLATES),
                textbook_templates=list(TEXTBOOK_TEMPLATES),
            )
        )
    if variant == "A":
        mix = {"mild": [1.0, 0.0, 0.0, 0.0], "severe": [0.0, 1.0, 0.0, 0.0]}
        normal_mix = [1.0, 0.0]
    elif variant == "B":
        mix = {"mild": [0.0, 0.0, 1.0, 0.0], "severe": [0.0, 1.0, 0.0, 0.0]}
        normal_mix = [0.0, 1.0]
    else:
        raise ConfigError(f"unknown grammar variant {variant!r}")
    return SyntheticGrammar(
        terminologies=terms,
        normal_templates=list(NORMAL_TEMPLATES),
        template_mix=mix,
        normal_mix=normal_mix,
        grid=list(grid),
        max_findings=min(3, n_terms),
        max_textbook_terms=min(2, n_terms),
        seed=seed,
        name=variant,
    )


# -- generation ------------------------------------------------------------------

@dataclass
class RawSample:
    id: int
    kind: str  # "pretrain" | "transfer"
    labels: np.ndarray
    text: str
    image: np.ndarray | None = None
    severities: dict[int, str] = field(default_factory=dict)


def _pick(rng: np.random.Generator, weights: Sequence[float]) -> int:
    p = np.asarray(weights, dtype=np.float64)
    return int(rng.choice(len(p), p=p / p.sum()))


def plant_image(grammar: SyntheticGrammar, findings: dict[int, str], rng: np.random.Generator) -> np.ndarray:
    h, w, c = grammar.grid
    img = rng.normal(0.0, grammar.noise_std, size=(h, w, c))
    spikes = rng.random((h, w, c)) < grammar.distractor_rate
    img += spikes * grammar.distractor_amplitude
    for idx, severity in findings.items():
        t = grammar.terminologies[idx]
        for r, q in t.cells:
            img[r, q, t.channel] += grammar.amplitudes[severity]
    return img.astype(np.float32)


def render_report(grammar: SyntheticGrammar, findings: dict[int, str], rng: np.random.Generator) -> str:
    if not findings:
        return grammar.normal_templates[_pick(rng, grammar.normal_mix)]
    sentences = []
    for idx in sorted(findings):
        tpl = _pick(rng, grammar.template_mix[findings[idx]])
        sentences.append(grammar.terminologies[idx].sentence(tpl))
    return " ".join(sentences)


def _sample_findings(grammar: SyntheticGrammar, rng: np.random.Generator) -> dict[int, str]:
    if rng.random() < grammar.normal_prob:
        return {}
    k = int(rng.integers(1, grammar.max_findings + 1))
    subset = sorted(rng.choice(len(grammar.terminologies), size=k, replace=False).tolist())
    return {i: SEVERITIES[int(rng.integers(len(SEVERITIES)))] for i in subset}


def _textbook_doc(grammar: SyntheticGrammar, rng: np.random.Generator) -> tuple[list[int], str]:
    k = int(rng.integers(1, grammar.max_textbook_terms + 1))
    subset = sorted(rng.choice(len(grammar.terminologies), size=k, replace=False).tolist())
    parts = []
    for i in subset:
        t = grammar.terminologies[i]
        tb = t.textbook_templates[int(rng.integers(len(t.textbook_templates)))]
        parts.append(tb.format(name=t.name, location=t.location))
        parts.append(t.sentence(int(rng.integers(len(t.report_templates)))))
    return subset, " ".join(parts)


@dataclass
class Corpora:
    textbook: list[RawSample]
    splits: dict[str, list[RawSample]]


def generate_corpora(grammar: SyntheticGrammar, sizes: dict[str, int], seed: int) -> Corpora:
    """Textbook passages plus train/val/test image-report samples, fully seeded.

    ``sizes`` keys: textbook_docs, train, val, test.  Sample ids are unique
    across all transfer splits.
    """
    for key in ("textbook_docs", "train", "val", "test"):
        if sizes.get(key, 0) < 0:
            raise ConfigError(f"size {key} must be non-negative")
    cap = grammar.distinct_reports() * grammar.max_repeat
    for key in ("train", "val", "test"):
        if sizes.get(key, 0) > cap:
            raise ConfigError(
                f"{key} size {sizes[key]} exceeds the grammar's combinatorial capacity {cap} "
                f"({grammar.distinct_reports()} distinct reports x max_repeat {grammar.max_repeat})"
            )
    rng = np.random.default_rng(seed)
    n_m = len(grammar.terminologies)
    textbook = []
    for i in range(sizes.get("textbook_docs", 0)):
        subset, text = _textbook_doc(grammar, rng)
        labels = np.zeros(n_m, dtype=np.uint8)
        labels[subset] = 1
        textbook.append(RawSample(i, "pretrain", labels, text))
    splits: dict[str, list[RawSample]] = {}
    next_id = 0
    for split in ("train", "val", "test"):
        samples = []
        for _ in range(sizes.get(split, 0)):
            findings = _sample_findings(grammar, rng)
            image = plant_image(grammar, findings, rng)
            labels = np.zeros(n_m, dtype=np.uint8)
            labels[list(findings)] = 1
            samples.append(RawSample(next_id, "transfer", labels, render_report(grammar, findings, rng), image, findings))
            next_id += 1
        splits[split] = samples
    return Corpora(textbook, splits)


def invert_report(grammar: SyntheticGrammar, text: str) -> set[str]:
    """Terminologies named by a report, recovered by matching rendered sentences."""
    lookup = {}
    for t in grammar.terminologies:
        for i in range(len(t.report_templates)):
            lookup[normalize(t.sentence(i))] = t.name
    found = set()
    for sentence in normalize(text).split(" ."):
        sentence = (sentence.strip() + " .").strip()
        if sentence in lookup:
            found.add(lookup[sentence])
    return found


def oracle_scores(grammar: SyntheticGrammar, image: np.ndarray) -> np.ndarray:
    """Mean planted-channel intensity over each terminology's cells."""
    return np.array([np.mean([image[r, q, t.channel] for r, q in t.cells]) for t in grammar.terminologies])


def oracle_classify(grammar: SyntheticGrammar, image: np.ndarray) -> np.ndarray:
    """Nearest-template decision: present when the score is closer to a planted amplitude than to 0."""
    scores = oracle_scores(grammar, image)
    levels = np.array([0.0] + [grammar.amplitudes[s] for s in SEVERITIES])
    nearest = np.abs(scores[:, None] - levels[None, :]).argmin(axis=1)
    return (nearest > 0).astype(np.uint8)


# -- tokenised datasets -----------------------------------------------------------

@dataclass
class TrainingSample:
    """Pretraining tuple (y, T) when ``image`` is None, transfer triplet (I, y, T) otherwise."""

    id: int
    kind: str
    labels: np.ndarray
    tokens: np.ndarray
    image: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("pretrain", "transfer"):
            raise ConfigError(f"unknown sample kind {self.kind!r}")
        if (self.kind == "transfer") != (self.image is not None):
            raise ConfigError(f"sample {self.id}: transfer samples carry an image, pretraining samples do not")


@dataclass
class Dataset:
    corpus: str
    split: str
    kind: str
    samples: list[TrainingSample]
    terminology_names: list[str]
    grid: list[int] | None
    vocab_sha256: str
    grammar_seed: int
    grammar_sha256: str

    def __len__(self) -> int:
        return len(self.samples)

    def texts(self, vocab: Vocabulary) -> list[str]:
        return [detokenize(s.tokens, vocab) for s in self.samples]

    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples])


def build_vocabulary(corpora: Iterable[Corpora], extra_texts: Iterable[str] = ()) -> Vocabulary:
    """Vocabulary from textbook and training splits only."""
    texts = list(extra_texts)
    for c in corpora:
        texts += [s.text for s in c.textbook]
        texts += [s.text for s in c.splits.get("train", [])]
    return Vocabulary.build(texts)


def to_dataset(
    raw: Sequence[RawSample], vocab: Vocabulary, grammar: SyntheticGrammar, corpus: str, split: str, kind: str, max_len: int = 64
) -> Dataset:
    samples = []
    for r in raw:
        ids = tokenize(r.text, vocab)
        if len(ids) > max_len:
            raise ConfigError(f"sample {r.id} renders {len(ids)} tokens, above max_len {max_len}")
        samples.append(TrainingSample(r.id, r.kind, r.labels.copy(), np.asarray(ids, dtype=np.int64), r.image))
    return Dataset(
        corpus=corpus,
        split=split,
        kind=kind,
        samples=samples,
        terminology_names=grammar.names,
        grid=list(grammar.grid) if kind == "transfer" else None,
        vocab_sha256=vocab.digest(),
        grammar_seed=grammar.seed,
        grammar_sha256=grammar.digest(),
    )


# -- container format --------------------------------------------------------------
#
# magic "AGDS" | u32 version | u32 header length | header JSON (UTF-8)
# | u64 payload length | payload records, all little-endian.
# Record: u32 id, u8 kind, u8 has_image, u16 N_m, N_m label bytes,
#         u32 token count, u32 tokens..., then H*W*C float32 when has_image.

DATASET_MAGIC = b"AGDS"
DATASET_VERSION = 1
_KINDS = ("pretrain", "transfer")


def _encode_records(ds: Dataset) -> bytes:
    out = io.BytesIO()
    for s in ds.samples:
        has_image = s.image is not None
        out.write(struct.pack("<IBBH", s.id, _KINDS.index(s.kind), int(has_image), len(s.labels)))
        out.write(np.asarray(s.labels, dtype=np.uint8).tobytes())
        out.write(struct.pack("<I", len(s.tokens)))
        out.write(np.asarray(s.tokens, dtype="<u4").tobytes())
        if has_image:
            out.write(np.asarray(s.image, dtype="<f4").tobytes())
    return out.getvalue()


def dataset_to_bytes(ds: Dataset) -> bytes:
    payload = _encode_records(ds)
    header = {
        "corpus": ds.corpus,
        "split": ds.split,
        "kind": ds.kind,
        "n_records": len(ds.samples),
        "grid": ds.grid,
        "terminologies": ds.terminology_names,
        "vocab_sha256": ds.vocab_sha256,
        "grammar_seed": ds.grammar_seed,
        "grammar_sha256": ds.grammar_sha256,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(hb)) + hb + struct.pack("<Q", len(payload)) + payload


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < 12 or buf[:4] != DATASET_MAGIC:
        raise CorruptFileError("not a dataset container (bad magic or truncated)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {DATASET_VERSION}")
    pos = 12
    if len(buf) < pos + hlen + 8:
        raise CorruptFileError("dataset header truncated")
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"dataset header unreadable: {exc}") from exc
    pos += hlen
    (plen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    payload = buf[pos:]
    if len(payload) != plen:
        raise CorruptFileError(f"dataset payload has {len(payload)} bytes, header promises {plen}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise HashMismatchError("dataset payload hash mismatch")
    samples = _decode_records(payload, header)
    return Dataset(
        corpus=header["corpus"],
        split=header["split"],
        kind=header["kind"],
        samples=samples,
        terminology_names=header["terminologies"],
        grid=header["grid"],
        vocab_sha256=header["vocab_sha256"],
        grammar_seed=header["grammar_seed"],
        grammar_sha256=header["grammar_sha256"],
    )


def _decode_records(payload: bytes, header: dict) -> list[TrainingSample]:
    grid = header["grid"]
    image_size = int(np.prod(grid)) if grid else 0
    samples, pos = [], 0
    try:
        for _ in range(header["n_records"]):
            sid, kind, has_image, n_m = struct.unpack_from("<IBBH", payload, pos)
            pos += 8
            labels = np.frombuffer(payload, dtype=np.uint8, count=n_m, offset=pos).copy()
            pos += n_m
            (n_tok,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            tokens = np.frombuffer(payload, dtype="<u4", count=n_tok, offset=pos).astype(np.int64)
            pos += 4 * n_tok
            image = None
            if has_image:
                image = np.frombuffer(payload, dtype="<f4", count=image_size, offset=pos).reshape(grid).astype(np.float32)
                pos += 4 * image_size
            samples.append(TrainingSample(sid, _KINDS[kind], labels, tokens, image))
    except (struct.error, ValueError, IndexError) as exc:
        raise CorruptFileError(f"dataset records malformed: {exc}") from exc
    if pos != len(payload):
        raise CorruptFileError("trailing bytes after the last dataset record")
    return samples


def save_dataset(ds: Dataset, path: str | Path) -> str:
    """Write the container; returns its sha256."""
    data = dataset_to_bytes(ds)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path: str | Path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def export_text(ds: Dataset, vocab: Vocabulary, path: str | Path) -> None:
    """Human-readable sidecar: one tab-separated line per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\tkind\tlabels\ttext\n")
        for s in ds.samples:
            bits = "".join(str(int(b)) for b in s.labels)
            fh.write(f"{s.id}\t{s.kind}\t{bits}\t{detokenize(s.tokens, vocab)}\n")
