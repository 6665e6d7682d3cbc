"""
On-disk formats for RoI pools and tracklets.

STRK bulk binary, little-endian:
    b"STRK" | version u32 | d_in u32 | record count u64
    per record: box f64 * 4 | category u32 | identity u64 | frame u64 | feature f64 * d_in

JSON-lines RoI records carry keys feature, box, category, identity, frame,
source. Class counts n_c live in a JSON sidecar mapping class id to count.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Union

import numpy as np

from src.core.augment import RoiPool, RoiRecord
from src.core.synthdata import FrequencyGroups, LabeledTracklet

logger = logging.getLogger(__name__)

STRK_MAGIC = b"STRK"
STRK_VERSION = 1
_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("input_dim", "<u4"), ("count", "<u8")])
ROI_KEYS = ("feature", "box", "category", "identity", "frame", "source")

PathLike = Union[str, Path]


class RoiFormatError(ValueError):
    pass


def strk_record_dtype(input_dim: int) -> np.dtype:
    return np.dtype([
        ("box", "<f8", (4,)),
        ("category", "<u4"),
        ("identity", "<u8"),
        ("frame", "<u8"),
        ("feature", "<f8", (input_dim,)),
    ])


def encode_strk(pool: RoiPool) -> bytes:
    if len(pool) and (pool.categories.min() < 0 or pool.identities.min() < 0 or pool.frames.min() < 0):
        raise RoiFormatError("STRK stores unsigned category, identity and frame values")
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = STRK_MAGIC
    header["version"] = STRK_VERSION
    header["input_dim"] = pool.input_dim
    header["count"] = len(pool)
    body = np.zeros(len(pool), dtype=strk_record_dtype(pool.input_dim))
    body["box"] = pool.boxes
    body["category"] = pool.categories
    body["identity"] = pool.identities
    body["frame"] = pool.frames
    body["feature"] = pool.features
    return header.tobytes() + body.tobytes()


def decode_strk(payload: bytes, class_counts: Optional[Mapping[int, int]] = None, num_classes: int = 0) -> RoiPool:
    if len(payload) < _HEADER.itemsize:
        raise RoiFormatError(f"STRK payload of {len(payload)} bytes is shorter than its header")
    header = np.frombuffer(payload, dtype=_HEADER, count=1)[0]
    if header["magic"] != STRK_MAGIC:
        raise RoiFormatError("Not an STRK file (bad magic)")
    if int(header["version"]) != STRK_VERSION:
        raise RoiFormatError(f"Unsupported STRK version {int(header['version'])}")
    input_dim, count = int(header["input_dim"]), int(header["count"])
    record = strk_record_dtype(input_dim)
    expected = _HEADER.itemsize + count * record.itemsize
    if len(payload) != expected:
        raise RoiFormatError(f"STRK payload is {len(payload)} bytes, header implies {expected}")
    body = np.frombuffer(payload, dtype=record, count=count, offset=_HEADER.itemsize)
    return RoiPool(
        features=body["feature"].astype(np.float64).reshape(count, input_dim),
        boxes=body["box"].astype(np.float64),
        categories=body["category"].astype(np.int64),
        identities=body["identity"].astype(np.int64),
        frames=body["frame"].astype(np.int64),
        sources=[""] * count,
        class_counts=dict(class_counts or {}),
        num_classes=num_classes,
    )


def write_strk(pool: RoiPool, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_strk(pool))
    logger.info(f"Wrote {len(pool)} RoI records to {path}")
    return path


def read_strk(path: PathLike, class_counts: Optional[Mapping[int, int]] = None, num_classes: int = 0) -> RoiPool:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"RoI pool not found at: {path}")
    try:
        return decode_strk(path.read_bytes(), class_counts, num_classes)
    except RoiFormatError as e:
        logger.error(f"Failed to read {path}: {str(e)}")
        raise


def sidecar_path(pool_path: PathLike) -> Path:
    """train.strk -> train.counts.json"""
    return Path(pool_path).with_suffix(".counts.json")


def write_class_counts(counts: Mapping[int, int], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({str(c): int(n) for c, n in sorted(counts.items())}, indent=2), encoding="utf-8")
    return path


def read_class_counts(path: PathLike) -> Dict[int, int]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Class-count sidecar not found at: {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise RoiFormatError(f"{path}: class counts must be a JSON object")
    counts = {}
    for key, value in raw.items():
        try:
            c = int(key)
        except ValueError as e:
            raise RoiFormatError(f"{path}: class id {key!r} is not an integer") from e
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise RoiFormatError(f"{path}: count for class {key} must be a non-negative integer, got {value!r}")
        counts[c] = value
    return counts


def read_jsonl(path: PathLike) -> Iterator[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"JSON-lines file not found at: {path}")
    with path.open(encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise RoiFormatError(f"{path}:{number}: {e.msg}") from e


def write_jsonl(rows: Iterable[Mapping[str, Any]], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, separators=(",", ":")) + "\n")
    return path


def roi_record_from_json(row: Mapping[str, Any]) -> RoiRecord:
    missing = [k for k in ROI_KEYS if k not in row]
    if missing:
        raise RoiFormatError(f"RoI record is missing keys {missing}")
    box = row["box"]
    if len(box) != 4:
        raise RoiFormatError(f"Box must have 4 coordinates, got {len(box)}")
    return RoiRecord(
        feature=np.asarray(row["feature"], dtype=np.float64),
        box=tuple(float(v) for v in box),
        category=int(row["category"]),
        identity=int(row["identity"]),
        frame=int(row["frame"]),
        source=str(row["source"]),
    )


def roi_record_to_json(record: RoiRecord) -> Dict[str, Any]:
    return {
        "feature": np.asarray(record.feature, dtype=np.float64).tolist(),
        "box": [float(v) for v in record.box],
        "category": int(record.category),
        "identity": int(record.identity),
        "frame": int(record.frame),
        "source": record.source,
    }


def read_roi_jsonl(path: PathLike) -> List[RoiRecord]:
    records = []
    for number, row in enumerate(read_jsonl(path), start=1):
        try:
            records.append(roi_record_from_json(row))
        except (RoiFormatError, ValueError, TypeError) as e:
            raise RoiFormatError(f"{path}: record {number}: {str(e)}") from e
    return records


def write_roi_jsonl(pool: RoiPool, path: PathLike) -> Path:
    return write_jsonl((roi_record_to_json(pool.record(i)) for i in range(len(pool))), path)


def load_pool(path: PathLike, counts_path: Optional[PathLike] = None, num_classes: int = 0) -> RoiPool:
    """Read an STRK or JSON-lines pool plus its class-count sidecar."""
    path = Path(path)
    counts = read_class_counts(counts_path or sidecar_path(path))
    if path.suffix == ".strk":
        pool = read_strk(path, counts, num_classes)
    else:
        records = read_roi_jsonl(path)
        widths = {np.asarray(r.feature).shape for r in records}
        if len(widths) > 1:
            raise RoiFormatError(f"{path}: records have mixed feature shapes {sorted(widths)}")
        pool = RoiPool.from_records(records, counts, num_classes)
    logger.info(f"Loaded pool {path}: {len(pool)} records, {pool.num_classes} classes")
    return pool


def save_pool(pool: RoiPool, path: PathLike) -> Path:
    path = Path(path)
    if path.suffix == ".strk":
        write_strk(pool, path)
    else:
        write_roi_jsonl(pool, path)
    write_class_counts(pool.class_counts, sidecar_path(path))
    return path


def write_test_tracklets(tracklets: Iterable[LabeledTracklet], path: PathLike) -> Path:
    return write_jsonl((t.to_json() for t in tracklets), path)


def read_test_tracklets(path: PathLike) -> List[LabeledTracklet]:
    tracklets = []
    for number, row in enumerate(read_jsonl(path), start=1):
        try:
            views = np.asarray(row["views"], dtype=np.float64)
            label, identity = int(row["label"]), int(row.get("identity", number - 1))
        except (KeyError, TypeError, ValueError) as e:
            raise RoiFormatError(f"{path}: tracklet {number}: {str(e)}") from e
        if views.ndim != 2 or views.shape[0] == 0:
            raise RoiFormatError(f"{path}: tracklet {number}: views must be a non-empty [L, d_in] array")
        tracklets.append(LabeledTracklet(views=views, label=label, identity=identity))
    return tracklets


def read_manifest_groups(path: PathLike) -> FrequencyGroups:
    """Frequency groups recorded in a dataset manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found at: {path}")
    groups = json.loads(path.read_text(encoding="utf-8")).get("groups")
    if not isinstance(groups, dict):
        raise RoiFormatError(f"{path}: manifest has no frequency groups")
    return FrequencyGroups(**{name: frozenset(int(c) for c in groups.get(name, [])) for name in ("rare", "common", "frequent")})
