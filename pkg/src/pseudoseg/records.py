"""Pseudo-label records and the manifest CSV that carries them between stages.

Manifest columns are ``id,mask_path,score`` (``round`` optional). Relative
mask paths are resolved against the manifest's directory, so pseudo labels
from any other source can enter the second stage in the same format.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError
from .maskgen import binarize_mask_image, read_grayscale, write_mask_png


@dataclass
class PseudoLabelRecord:
    image_id: str
    mask: np.ndarray  # binary {0, 1}
    score: float  # mean discriminator patch score; lower looks more real
    round: int = 0


def write_manifest(records, out_dir, mask_subdir="pseudo_labels", name="manifest.csv") -> Path:
    out = Path(out_dir)
    (out / mask_subdir).mkdir(parents=True, exist_ok=True)
    manifest = out / name
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "mask_path", "score", "round"])
        for r in records:
            rel = Path(mask_subdir) / f"{r.image_id}.png"
            write_mask_png(r.mask, out / rel)
            writer.writerow([r.image_id, rel.as_posix(), repr(float(r.score)), r.round])
    return manifest


def read_manifest(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} does not exist")
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "mask_path", "score"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            mask_path = Path(row["mask_path"])
            if not mask_path.is_absolute():
                mask_path = path.parent / mask_path
            if not mask_path.is_file():
                raise DataError(f"pseudo label {mask_path} listed in {path} does not exist")
            mask = binarize_mask_image(read_grayscale(mask_path))
            records.append(PseudoLabelRecord(row["id"], mask, float(row["score"]), int(row.get("round") or 0)))
    if not records:
        raise DataError(f"manifest {path} is empty")
    return records
