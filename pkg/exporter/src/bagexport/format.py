"""Writers for the `.bagemb` container and dataset manifest.

Implements the consumer-side contract documented in the primary package's
docs/formats.md; deliberately independent code so the exporter talks to
the pipeline only through bytes on disk.  All integers little-endian;
embeddings are float32 row-major.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BAGE"
VERSION = 1
FLAG_LABEL = 1
FLAG_CAPTION = 2


def write_bagemb(path, patient_id: str, embeddings: np.ndarray,
                 label: int | None = None, caption: str | None = None) -> None:
    """Atomic write (temp file + rename) of one patient's bag."""
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise ValueError(f"embeddings must be a non-empty 2-D array, got {emb.shape}")
    if not np.isfinite(emb).all():
        raise ValueError("embeddings contain non-finite values")
    flags = 0
    label_byte = 0
    if label is not None:
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
        flags |= FLAG_LABEL
        label_byte = label
    caption_bytes = b""
    if caption is not None:
        flags |= FLAG_CAPTION
        caption_bytes = caption.encode("utf-8")
    pid = patient_id.encode("utf-8")

    blob = bytearray()
    blob += struct.pack("<4sHHIIBI", MAGIC, VERSION, flags,
                        emb.shape[0], emb.shape[1], label_byte,
                        len(caption_bytes))
    blob += caption_bytes
    blob += struct.pack("<H", len(pid))
    blob += pid
    blob += emb.tobytes(order="C")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    os.replace(tmp, path)


def write_manifest(path, d_v: int, entries: list[dict]) -> None:
    doc = {"format": "graphmil-manifest", "version": 1, "d_v": d_v,
           "bags": entries}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
