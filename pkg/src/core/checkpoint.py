"""
SCKP checkpoint codec.

Layout, all little-endian:
    b"SCKP" | version u32
    input_dim, model_dim, heads, encoder_layers, num_classes, feedforward_dim  (u32 each)
    version 2 only: max_length u32, layer_norm_eps f64
    parameter count u64
    per parameter: name length u32, UTF-8 name, rank u32, extents u64 * rank,
                   values f64 * prod(extents)
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from src.core.set_classifier import SetClassifierConfig, SetClassifierModel

logger = logging.getLogger(__name__)

MAGIC = b"SCKP"
FORMAT_VERSION = 1
# written only when max_length or layer_norm_eps differ from their defaults
EXTENDED_VERSION = 2
CONFIG_FIELDS = ("input_dim", "model_dim", "heads", "encoder_layers", "num_classes", "feedforward_dim")
EXTENDED_DEFAULTS = {f: SetClassifierConfig.model_fields[f].default for f in ("max_length", "layer_norm_eps")}


class CheckpointFormatError(ValueError):
    pass


def encode_checkpoint(model: SetClassifierModel) -> bytes:
    config = model.config
    extended = any(getattr(config, f) != v for f, v in EXTENDED_DEFAULTS.items())
    parts = [MAGIC, struct.pack("<I", EXTENDED_VERSION if extended else FORMAT_VERSION)]
    parts.append(struct.pack("<6I", *(getattr(config, f) for f in CONFIG_FIELDS)))
    if extended:
        parts.append(struct.pack("<Id", config.max_length, config.layer_norm_eps))
    params = model.parameters()
    parts.append(struct.pack("<Q", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def read(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointFormatError(f"Checkpoint truncated at byte {self.offset} (wanted {size} more)")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def decode_checkpoint(payload: bytes) -> Tuple[SetClassifierConfig, Dict[str, np.ndarray]]:
    reader = _Reader(payload)
    if reader.read(4) != MAGIC:
        raise CheckpointFormatError("Not a set classifier checkpoint (bad magic)")
    (version,) = reader.unpack("<I")
    if version not in (FORMAT_VERSION, EXTENDED_VERSION):
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}")
    fields = dict(zip(CONFIG_FIELDS, reader.unpack("<6I")))
    if version == EXTENDED_VERSION:
        fields["max_length"], fields["layer_norm_eps"] = reader.unpack("<Id")
    config = SetClassifierConfig(**fields)

    (count,) = reader.unpack("<Q")
    values: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.read(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(reader.read(8 * size), dtype="<f8").reshape(shape)
        if name in values:
            raise CheckpointFormatError(f"Duplicate parameter {name!r} in checkpoint")
        values[name] = array.astype(np.float64)
    if reader.offset != len(payload):
        raise CheckpointFormatError(f"{len(payload) - reader.offset} trailing bytes after checkpoint")
    return config, values


def model_from_checkpoint(payload: bytes, precision: str = "float64") -> SetClassifierModel:
    config, values = decode_checkpoint(payload)
    model = SetClassifierModel(config, precision=precision)
    params = model.named_parameters()
    if set(params) != set(values):
        missing = sorted(set(params) - set(values))
        extra = sorted(set(values) - set(params))
        raise CheckpointFormatError(f"Parameter mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if values[name].shape != p.data.shape:
            raise CheckpointFormatError(f"{name}: checkpoint shape {values[name].shape} != model shape {p.data.shape}")
        p.data = values[name].astype(model.dtype)
    return model


def save_checkpoint(model: SetClassifierModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(model)
    path.write_bytes(payload)
    logger.info(f"Wrote checkpoint {path} ({len(payload)} bytes, {len(model.parameters())} parameters)")
    return path


def load_checkpoint(path: Union[str, Path], precision: str = "float64") -> SetClassifierModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found at: {path}")
    try:
        return model_from_checkpoint(path.read_bytes(), precision)
    except CheckpointFormatError as e:
        logger.error(f"Failed to load checkpoint {path}: {str(e)}")
        raise
