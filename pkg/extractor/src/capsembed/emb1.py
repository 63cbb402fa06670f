"""EMB1 container writer.

Little-endian layout: magic "EMB1" | u32 version=1 | u32 record count |
u32 dim=768 | per record { u16 id length | id bytes (UTF-8) | u8 label |
dim f32 visual | dim f32 text | dim f32 frequency }.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

EMBED_DIM = 768
MAGIC = b"EMB1"
VERSION = 1


@dataclass
class Record:
    id: str
    label: int
    visual: np.ndarray
    text: np.ndarray
    freq: np.ndarray

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"record {self.id!r}: label must be 0 or 1")
        for name in ("visual", "text", "freq"):
            vec = np.asarray(getattr(self, name), dtype=np.float32)
            if vec.shape != (EMBED_DIM,):
                raise ValueError(
                    f"record {self.id!r}: {name} must have {EMBED_DIM} values, "
                    f"got shape {vec.shape}"
                )
            setattr(self, name, vec)


def write_emb1(records: list[Record], path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, len(records), EMBED_DIM))
        for rec in records:
            ident = rec.id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<B", rec.label))
            fh.write(rec.visual.astype("<f4").tobytes())
            fh.write(rec.text.astype("<f4").tobytes())
            fh.write(rec.freq.astype("<f4").tobytes())
