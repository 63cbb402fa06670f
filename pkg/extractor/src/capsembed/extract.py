"""Manifest-driven extraction: images in, EMB1 out."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .emb1 import Record, write_emb1
from .encoders import SeededBackend, make_backend
from .freq import frequency_embedding

log = logging.getLogger("capsembed")


@dataclass
class ManifestEntry:
    path: Path
    label: int
    caption: str | None = None


@dataclass
class ExtractionManifest:
    entries: list[ManifestEntry]

    def __len__(self):
        return len(self.entries)


@dataclass
class ExtractionSummary:
    written: int
    skipped: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.skipped


def read_manifest(path) -> ExtractionManifest:
    """CSV manifest: path,label[,caption]; an optional header row whose
    first cell is 'path' is ignored."""
    entries: list[ManifestEntry] = []
    base = Path(path).parent
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and row[0].strip().lower() == "path":
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: expected path,label[,caption]")
            raw_path, raw_label = row[0].strip(), row[1].strip()
            if raw_label not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1, got {raw_label!r}")
            caption = row[2].strip() if len(row) > 2 and row[2].strip() else None
            img_path = Path(raw_path)
            if not img_path.is_absolute():
                img_path = base / img_path
            entries.append(ManifestEntry(img_path, int(raw_label), caption))
    return ExtractionManifest(entries)


def _load_pixels(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        converted = img.convert("L") if img.mode in ("1", "L", "I", "F") else img.convert("RGB")
        arr = np.asarray(converted, dtype=np.float64) / 255.0
    return arr


def extract(manifest: ExtractionManifest, out_path, backend=None) -> ExtractionSummary:
    """Embed every manifest image and write the EMB1 file.

    Unreadable images are skipped (logged, reflected in the summary);
    records are written in manifest order.
    """
    backend = backend or SeededBackend()
    records: list[Record] = []
    skipped: list[str] = []
    for entry in manifest.entries:
        ident = entry.path.stem
        try:
            pixels = _load_pixels(entry.path)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", entry.path, exc)
            skipped.append(str(entry.path))
            continue
        caption = entry.caption if entry.caption is not None else backend.caption(pixels)
        records.append(
            Record(
                id=ident,
                label=entry.label,
                visual=backend.embed_image(pixels).astype(np.float32),
                text=backend.embed_text(caption).astype(np.float32),
                freq=frequency_embedding(pixels).astype(np.float32),
            )
        )
    write_emb1(records, out_path)
    return ExtractionSummary(written=len(records), skipped=skipped)


__all__ = [
    "ExtractionManifest",
    "ExtractionSummary",
    "ManifestEntry",
    "extract",
    "make_backend",
    "read_manifest",
]
