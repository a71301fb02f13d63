"""Binary container for speech feature sequences.

Layout, all little-endian:

    magic "W2FT" | version u32 | frame count u64 | feature dim u32 |
    source tag length u32 | source tag UTF-8 | f32 payload (frames x dim)

The source tag records where the features came from (synthetic generator
or an SSL checkpoint id + layer).
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"W2FT"
VERSION = 1


class FeatureFileError(ValueError):
    pass


def save_features(path, array, source_tag=""):
    array = np.ascontiguousarray(array, dtype="<f4")
    if array.ndim != 2:
        raise FeatureFileError(f"features must be (frames, dim), got shape {array.shape}")
    tag = source_tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", array.shape[0]))
        fh.write(struct.pack("<I", array.shape[1]))
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(array.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FeatureFileError(f"truncated feature file: wanted {n} bytes for {what}, got {len(buf)}")
    return buf


def load_features(path):
    """Read (array, source_tag); exact inverse of save_features."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise FeatureFileError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise FeatureFileError(f"unsupported feature file version {version}")
        (frames,) = struct.unpack("<Q", _read_exact(fh, 8, "frame count"))
        (dim,) = struct.unpack("<I", _read_exact(fh, 4, "feature dim"))
        (taglen,) = struct.unpack("<I", _read_exact(fh, 4, "tag length"))
        tag = _read_exact(fh, taglen, "source tag").decode("utf-8")
        want = frames * dim * 4
        payload = fh.read(want + 1)
        if len(payload) != want:
            raise FeatureFileError(
                f"payload size mismatch: expected {want} bytes, got {len(payload)}")
        array = np.frombuffer(payload, dtype="<f4").reshape(frames, dim)
    return array.astype(np.float32), tag


def inspect_features(path):
    """Header summary without materializing the payload copy."""
    array, tag = load_features(path)
    return {"frames": int(array.shape[0]), "dim": int(array.shape[1]),
            "source": tag}
