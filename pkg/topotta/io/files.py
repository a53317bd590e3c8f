"""
File formats used by the command line.

Tensor blob layout (checkpoints and probability maps share it)::

    offset  size  content
    0       8     magic b"TOPOTTA\\n"
    8       4     format version, uint32 little-endian (currently 1)
    12      4     header length L in bytes, uint32 little-endian
    16      L     UTF-8 YAML header: kind, meta, seed and a tensor
                  directory of {name, group, shape, offset}
    16+L    ...   payload: float64 little-endian arrays, row-major, at the
                  directory offsets (relative to the payload start)

Images and masks are 8-bit binary PGM (P5) files read and written with
Pillow. Structured logs are line-delimited JSON.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import yaml
from PIL import Image

from topotta.errors import DataIOError, InvalidArgumentError, InvalidStateError

logger = logging.getLogger(__name__)

MAGIC = b"TOPOTTA\n"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_LE_FLOAT = np.dtype("<f8")


@dataclass
class TensorBlob:
    """Named arrays plus a free-form header.

    Attributes:
        kind (str): What the blob holds, e.g. "checkpoint" or "probability-map".
        meta (dict): Kind-specific metadata.
        groups (Dict[str, Dict[str, np.ndarray]]): Arrays by group and name.
        seed (int): Seed the content was produced with, when known.
    """

    kind: str
    meta: Dict[str, Any] = field(default_factory=dict)
    groups: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    seed: Optional[int] = None


def encode_blob(blob: TensorBlob) -> bytes:
    directory, payload, offset = [], [], 0
    for group, arrays in blob.groups.items():
        for name, array in arrays.items():
            data = np.ascontiguousarray(array, dtype=_LE_FLOAT)
            directory.append(
                {"name": name, "group": group, "shape": list(data.shape), "offset": offset}
            )
            payload.append(data.tobytes(order="C"))
            offset += data.nbytes
    header = yaml.safe_dump(
        {
            "kind": blob.kind,
            "meta": blob.meta,
            "seed": blob.seed,
            "tensors": directory,
        },
        sort_keys=True,
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(payload)


def decode_blob(raw: bytes) -> TensorBlob:
    if len(raw) < _PREFIX.size:
        raise InvalidStateError("tensor blob is truncated")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidStateError("not a tensor blob (bad magic)")
    if version != FORMAT_VERSION:
        raise InvalidStateError(f"unsupported tensor blob version {version}")
    start = _PREFIX.size
    header = yaml.safe_load(raw[start:start + header_len].decode("utf-8"))
    payload = memoryview(raw)[start + header_len:]
    groups: Dict[str, Dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * _LE_FLOAT.itemsize
        if end > len(payload):
            raise InvalidStateError(f"tensor {entry['name']} runs past the end of the blob")
        array = np.frombuffer(payload[entry["offset"]:end], dtype=_LE_FLOAT).astype(np.float64)
        groups.setdefault(entry["group"], {})[entry["name"]] = array.reshape(entry["shape"])
    return TensorBlob(
        kind=header["kind"], meta=header.get("meta") or {}, groups=groups, seed=header.get("seed")
    )


def write_blob(path, blob: TensorBlob):
    try:
        with open(path, "wb") as f:
            f.write(encode_blob(blob))
    except OSError as e:
        raise DataIOError(f"cannot write tensor blob ({e.strerror})", path)
    logger.debug("wrote %s blob to %s", blob.kind, path)


def read_blob(path) -> TensorBlob:
    if not os.path.isfile(path):
        raise DataIOError("tensor blob not found", path)
    with open(path, "rb") as f:
        return decode_blob(f.read())


def write_probability_map(path, prob: np.ndarray, source: str = ""):
    write_blob(path, TensorBlob(kind="probability-map", meta={"source": source}, groups={"map": {"prob": prob}}))


def read_probability_map(path) -> np.ndarray:
    blob = read_blob(path)
    if blob.kind != "probability-map":
        raise InvalidStateError(f"{path} holds a {blob.kind}, not a probability map")
    return blob.groups["map"]["prob"]


# images

def read_pgm(path) -> np.ndarray:
    """Read an 8-bit grayscale image as float64 values in [0, 1]."""
    if not os.path.isfile(path):
        raise DataIOError("image not found", path)
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("L"), dtype=np.float64) / 255.0
    except OSError as e:
        raise DataIOError(f"cannot decode image ({e})", path)


def write_pgm(path, values: np.ndarray):
    """Write values in [0, 1] as an 8-bit binary PGM."""
    if values.ndim != 2:
        raise InvalidArgumentError(f"PGM output must be 2-D, got shape {values.shape}")
    pixels = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as e:
        raise DataIOError(f"cannot write image ({e})", path)


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 0.5


def write_mask(path, mask: np.ndarray):
    write_pgm(path, mask.astype(np.float64))


def list_images(directory) -> List[str]:
    """Sorted ``*.pgm`` file names of a directory."""
    if not os.path.isdir(directory):
        raise DataIOError("directory not found", directory)
    return sorted(name for name in os.listdir(directory) if name.lower().endswith(".pgm"))


def read_pairs(directory) -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
    """Yield (name, image, label) from ``images/`` and ``labels/`` subdirectories."""
    images_dir = os.path.join(directory, "images")
    labels_dir = os.path.join(directory, "labels")
    for name in list_images(images_dir):
        label_path = os.path.join(labels_dir, name)
        if not os.path.isfile(label_path):
            raise DataIOError("label missing for image", label_path)
        yield name, read_pgm(os.path.join(images_dir, name)), read_mask(label_path)


def read_stream(directory) -> Iterator[Tuple[str, np.ndarray, Optional[np.ndarray]]]:
    """Yield (name, image, label or None) in file-name order.

    Images come from ``images/`` when that subdirectory exists, otherwise
    from ``directory`` itself; labels are optional.
    """
    images_dir = os.path.join(directory, "images")
    if not os.path.isdir(images_dir):
        images_dir = directory
    labels_dir = os.path.join(directory, "labels")
    for name in list_images(images_dir):
        label_path = os.path.join(labels_dir, name)
        label = read_mask(label_path) if os.path.isfile(label_path) else None
        yield name, read_pgm(os.path.join(images_dir, name)), label


def write_pair(directory, name: str, image: np.ndarray, label: np.ndarray):
    for sub in ("images", "labels"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    write_pgm(os.path.join(directory, "images", name), image)
    write_mask(os.path.join(directory, "labels", name), label)


class JsonLinesWriter:
    """Append one JSON object per line to a log file."""

    def __init__(self, path):
        self.path = path
        try:
            self._file = open(path, "w")
        except OSError as e:
            raise DataIOError(f"cannot open log ({e.strerror})", path)

    def write(self, record: Dict[str, Any]):
        self._file.write(json.dumps(record, sort_keys=True) + "\n")
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
