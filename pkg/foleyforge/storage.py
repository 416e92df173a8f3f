import contextlib
import hashlib
import json
import os
import struct

import numpy as np

from .config import config_hash
from .errors import ContractViolation, IngestionError
from .settings import CHECKPOINT_VERSION

CHECKPOINT_MAGIC = b"FORGECKP"
ARRAY_DTYPE = np.dtype("<f4")


@contextlib.contextmanager
def atomic_write(path, mode="w"):
    """Open a file for writing and commit it atomically.

    All writes go to a shadow copy, which replaces `path` only when the block
    completes without error. Readers never see a half written file.
    """
    shadow_path = f"{path}~"
    try:
        with open(shadow_path, mode) as f:
            yield f
    except BaseException:
        with contextlib.suppress(OSError):
            os.remove(shadow_path)
        raise
    os.replace(shadow_path, path)


def write_json(path, data):
    try:
        with atomic_write(path) as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise IngestionError(f"Cannot write '{path}': {e.strerror}")


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise IngestionError(f"Cannot read '{path}': {e.strerror}")
    except ValueError as e:
        raise IngestionError(f"Cannot parse '{path}': {e}")


def file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


##########
# Arrays #
##########
def save_array(path, array):
    """Store an array as little-endian float32 NPY file (header + row-major body)."""
    array = np.ascontiguousarray(array, dtype=ARRAY_DTYPE)
    try:
        with atomic_write(path, "wb") as f:
            np.save(f, array, allow_pickle=False)
    except OSError as e:
        raise IngestionError(f"Cannot write array '{path}': {e.strerror}")


def load_array(path):
    try:
        array = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise IngestionError(f"Cannot read array '{path}': {e}")
    if array.dtype != ARRAY_DTYPE:
        raise IngestionError(f"Unexpected dtype in '{path}': {array.dtype}")
    return array


###############
# Checkpoints #
###############
def save_checkpoint(path, section, tensors, config, meta=None):
    """Write a versioned parameter snapshot.

    Layout: magic, little-endian u32 header length, JSON header, flat float32
    blob. The header maps every parameter name to its offset (in values) and
    shape inside the blob.
    """
    table = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        value = np.ascontiguousarray(_to_numpy(tensors[name]), dtype=ARRAY_DTYPE)
        table[name] = {"offset": offset, "shape": list(value.shape)}
        blobs.append(value.tobytes())
        offset += value.size

    header = {
        "format_version": CHECKPOINT_VERSION,
        "section": section,
        "config": config,
        "config_hash": config_hash(config),
        "meta": meta or {},
        "tensors": table,
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with atomic_write(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(raw_header)))
            f.write(raw_header)
            for blob in blobs:
                f.write(blob)
    except OSError as e:
        raise IngestionError(f"Cannot write checkpoint '{path}': {e.strerror}")
    return header


def load_checkpoint(path, section=None):
    """Read a checkpoint written by `save_checkpoint`.

    Returns `(header, tensors)` with tensors as float32 numpy arrays.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IngestionError(f"Cannot read checkpoint '{path}': {e.strerror}")

    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise IngestionError(f"Not a checkpoint file: {path}")
    start = len(CHECKPOINT_MAGIC)
    (length,) = struct.unpack("<I", raw[start : start + 4])
    header = json.loads(raw[start + 4 : start + 4 + length].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise IngestionError(
            f"Unsupported checkpoint version in '{path}': "
            f"{header.get('format_version')}"
        )
    if section is not None and header["section"] != section:
        raise ContractViolation(
            f"Checkpoint '{path}' holds a '{header['section']}' section, "
            f"'{section}' expected"
        )

    body = np.frombuffer(raw, dtype=ARRAY_DTYPE, offset=start + 4 + length)
    tensors = {}
    for name, entry in header["tensors"].items():
        size = int(np.prod(entry["shape"], dtype=np.int64))
        values = body[entry["offset"] : entry["offset"] + size]
        tensors[name] = values.reshape(entry["shape"]).copy()
    return header, tensors


def _to_numpy(value):
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.asarray(value)
