"""BEMB file writer.

Byte layout: magic "BEMB", format version u32 (1), flag u8 frame_level,
utterance count u32, then per utterance sorted by id: id length u32,
UTF-8 id, n_frames u32, dim u32, little-endian 32-bit floats row-major.
"""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"BEMB"
FORMAT_VERSION = 1


def encode_bemb(sequences: dict, frame_level: bool = True) -> bytes:
    """Serialize {utterance_id: (n_frames, dim) array} to BEMB bytes."""
    if not sequences:
        raise ValueError("nothing to write: no utterances")
    dims = set()
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("B", 1 if frame_level else 0),
        struct.pack("<I", len(sequences)),
    ]
    for utt_id in sorted(sequences):
        arr = np.asarray(sequences[utt_id], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(
                f"utterance {utt_id!r} must be a non-empty n_frames x dim array"
            )
        if not frame_level and arr.shape[0] != 1:
            raise ValueError(
                f"utterance-level file requires one frame, got {arr.shape[0]}"
            )
        dims.add(arr.shape[1])
        raw = utt_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if len(dims) != 1:
        raise ValueError(f"mixed embedding dims in one file: {sorted(dims)}")
    return b"".join(parts)


def write_bemb(path, sequences: dict, frame_level: bool = True) -> None:
    """Atomic write: serialize to a temp file, then rename into place."""
    target = Path(path)
    blob = encode_bemb(sequences, frame_level)
    fd, tmp_name = tempfile.mkstemp(
        prefix=target.name + ".", dir=target.parent or Path(".")
    )
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        # mkstemp creates 0600 files; give the result normal permissions
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp_name, 0o666 & ~umask)
        os.replace(tmp_name, target)
    except BaseException:
        os.unlink(tmp_name)
        raise
