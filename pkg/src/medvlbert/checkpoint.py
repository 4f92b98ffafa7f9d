"""Binary checkpoints: parameters, ADAM moments, RNG states and provenance.

Layout (little-endian)::

    "AGCK" | u32 version | u32 header length | header JSON (UTF-8, sorted keys)
    | u64 payload length | parameter records | first-moment records | second-moment records
    | 32-byte sha256 of everything before it

A record is ``u16 name length, name, u8 ndim, u32 dims..., row-major data``
with the element type named in the header (``<f4`` unless the model runs in
64-bit mode).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, HashMismatchError, ShapeMismatchError, VersionMismatchError
from .model import MedicalVLBert, ModelConfig
from .optim import AdamState
from .training import OptimConfig, Trainer

CHECKPOINT_MAGIC = b"AGCK"
CHECKPOINT_VERSION = 1
_DTYPES = ("<f4", "<f8")


@dataclass
class Checkpoint:
    """A fully parsed checkpoint; nothing outside it is touched until ``restore``/``apply``."""

    model_config: dict
    terminology_names: list[str]
    vocab_size: int
    grid: list[int]
    optim: dict
    adam: dict  # scalars: learning_rate, betas, epsilon, lr_overrides, step_count, param_steps
    epoch: int
    global_step: int
    rng_state: dict
    dropout_rng_state: dict
    provenance: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    dtype: str = "<f4"
    params: dict[str, np.ndarray] = field(default_factory=dict)
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "model_config": self.model_config,
            "terminology_names": self.terminology_names,
            "vocab_size": self.vocab_size,
            "grid": self.grid,
            "optim": self.optim,
            "adam": self.adam,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "rng_state": self.rng_state,
            "dropout_rng_state": self.dropout_rng_state,
            "provenance": self.provenance,
            "extra": self.extra,
            "dtype": self.dtype,
            "param_names": sorted(self.params),
            "moment_names": sorted(self.first_moment),
        }

    # -- construction ------------------------------------------------------------
    @classmethod
    def from_trainer(cls, trainer: Trainer, provenance: dict | None = None, extra: dict | None = None) -> Checkpoint:
        model, state = trainer.model, trainer.state
        params = model.state_dict()
        dtype = np.dtype(next(iter(params.values())).dtype).newbyteorder("<").str if params else "<f4"
        return cls(
            model_config=model.config.to_dict(),
            terminology_names=list(model.terminology.names),
            vocab_size=model.decoder.vocab_size,
            grid=list(model.grid),
            optim=asdict(trainer.optim),
            adam={
                "learning_rate": state.learning_rate,
                "beta1": state.beta1,
                "beta2": state.beta2,
                "epsilon": state.epsilon,
                "lr_overrides": dict(state.lr_overrides),
                "step_count": state.step_count,
                "param_steps": dict(state.param_steps),
            },
            epoch=trainer.epoch,
            global_step=trainer.global_step,
            rng_state=trainer.rng.bit_generator.state,
            dropout_rng_state=model.dropout_rng.bit_generator.state,
            provenance=dict(provenance or {}),
            extra=dict(extra or {}),
            dtype=dtype,
            params=params,
            first_moment={k: v.copy() for k, v in state.first_moment.items()},
            second_moment={k: v.copy() for k, v in state.second_moment.items()},
        )

    def build_model(self) -> MedicalVLBert:
        model = MedicalVLBert(ModelConfig(**self.model_config), self.terminology_names, self.vocab_size, self.grid)
        self._check_shapes(model)
        self._apply_model(model)
        return model

    def restore(self) -> Trainer:
        """A trainer that continues exactly where the saved one stopped."""
        trainer = Trainer(self.build_model(), OptimConfig(**self.optim))
        self._apply_trainer(trainer)
        return trainer

    def apply(self, trainer: Trainer) -> None:
        """Load into an existing trainer after validating every shape."""
        self._check_shapes(trainer.model)
        self._apply_model(trainer.model)
        trainer.optim = OptimConfig(**self.optim)
        self._apply_trainer(trainer)

    def _check_shapes(self, model: MedicalVLBert) -> None:
        expected = {n: p.data.shape for n, p in model.named_parameters()}
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeMismatchError(f"parameter sets differ; missing={missing[:5]} unexpected={extra[:5]}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeMismatchError(f"{name}: checkpoint has {self.params[name].shape}, model expects {shape}")
            if name in self.first_moment and self.first_moment[name].shape != shape:
                raise ShapeMismatchError(f"{name}: optimizer moment shape {self.first_moment[name].shape} != {shape}")

    def _apply_model(self, model: MedicalVLBert) -> None:
        dtype = np.dtype(self.dtype).newbyteorder("=")
        for name, p in model.named_parameters():
            p.data = self.params[name].astype(dtype)
            p.grad = None
        model.dropout_rng.bit_generator.state = self.dropout_rng_state

    def _apply_trainer(self, trainer: Trainer) -> None:
        a = self.adam
        dtype = np.dtype(self.dtype).newbyteorder("=")
        trainer.state = AdamState(
            learning_rate=a["learning_rate"],
            beta1=a["beta1"],
            beta2=a["beta2"],
            epsilon=a["epsilon"],
            lr_overrides=dict(a["lr_overrides"]),
            step_count=a["step_count"],
            first_moment={k: v.astype(dtype) for k, v in self.first_moment.items()},
            second_moment={k: v.astype(dtype) for k, v in self.second_moment.items()},
            param_steps={k: int(v) for k, v in a["param_steps"].items()},
        )
        trainer.rng.bit_generator.state = self.rng_state
        trainer.epoch = self.epoch
        trainer.global_step = self.global_step

    # -- bytes -----------------------------------------------------------------------
    def to_bytes(self) -> bytes:
        if self.dtype not in _DTYPES:
            raise CorruptFileError(f"unsupported element type {self.dtype}")
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = io.BytesIO()
        moments = sorted(self.first_moment)
        for group, keys in ((self.params, sorted(self.params)), (self.first_moment, moments), (self.second_moment, moments)):
            for name in keys:
                _write_record(payload, name, group[name], self.dtype)
        records = payload.getvalue()
        body = b"".join(
            [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header, struct.pack("<Q", len(records)), records]
        )
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, buf: bytes) -> Checkpoint:
        if len(buf) < 12 + 32 or buf[:4] != CHECKPOINT_MAGIC:
            raise CorruptFileError("not a checkpoint file (bad magic or too short)")
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
        if 12 + hlen + 8 > len(buf):
            raise CorruptFileError("checkpoint truncated inside the header")
        try:
            header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptFileError(f"unreadable checkpoint header: {exc}") from exc
        start = 12 + hlen + 8
        (plen,) = struct.unpack_from("<Q", buf, 12 + hlen)
        if len(buf) != start + plen + 32:
            raise CorruptFileError(f"checkpoint is {len(buf)} bytes, header declares {start + plen + 32}")
        body = buf[:-32]
        if hashlib.sha256(body).digest() != buf[-32:]:
            raise HashMismatchError("checkpoint checksum mismatch; the file was modified")
        dtype = header.get("dtype")
        if dtype not in _DTYPES:
            raise CorruptFileError(f"unsupported element type {dtype!r}")
        reader = _Reader(body, start)
        try:
            params = dict(reader.record(dtype) for _ in header["param_names"])
            first = dict(reader.record(dtype) for _ in header["moment_names"])
            second = dict(reader.record(dtype) for _ in header["moment_names"])
        except (struct.error, ValueError, KeyError) as exc:
            raise CorruptFileError(f"malformed checkpoint record: {exc}") from exc
        if reader.pos != len(body):
            raise CorruptFileError(f"{len(body) - reader.pos} trailing bytes after the last record")
        if sorted(params) != header["param_names"]:
            raise CorruptFileError("parameter records do not match the header")
        if sorted(first) != header["moment_names"] or sorted(second) != header["moment_names"]:
            raise CorruptFileError("optimizer moment records do not match the header")
        return cls(
            model_config=header["model_config"],
            terminology_names=header["terminology_names"],
            vocab_size=header["vocab_size"],
            grid=header["grid"],
            optim=header["optim"],
            adam=header["adam"],
            epoch=header["epoch"],
            global_step=header["global_step"],
            rng_state=header["rng_state"],
            dropout_rng_state=header["dropout_rng_state"],
            provenance=header["provenance"],
            extra=header["extra"],
            dtype=dtype,
            params=params,
            first_moment=first,
            second_moment=second,
        )


def _write_record(out: io.BytesIO, name: str, arr: np.ndarray, dtype: str) -> None:
    raw = name.encode("utf-8")
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptFileError("checkpoint truncated inside a record")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def record(self, dtype: str) -> tuple[str, np.ndarray]:
        (n,) = struct.unpack("<H", self.take(2))
        name = self.take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", self.take(1))
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.take(size * np.dtype(dtype).itemsize), dtype=dtype).reshape(shape).copy()
        return name, data


def save_checkpoint(path: str | Path, trainer: Trainer, provenance: dict | None = None, extra: dict | None = None) -> str:
    """Write ``trainer`` to ``path``; returns the file's sha256."""
    buf = Checkpoint.from_trainer(trainer, provenance, extra).to_bytes()
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
