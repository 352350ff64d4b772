"""Dataset manifests: a split tag plus image/mask (and optional FOV) paths.

Format, one record per line, paths relative to the manifest's directory::

    split train
    img_000.ppm mask_000.pgm
    img_001.ppm mask_001.pgm fov_001.pgm

Reading a manifest validates that every referenced file exists, decodes,
and that image and mask (and FOV) spatial dimensions agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .pnm import read_pnm

__all__ = ["ManifestRecord", "Manifest", "read_manifest", "write_manifest", "load_dataset"]

_SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    mask: Path
    fov: Path | None = None


@dataclass(frozen=True)
class Manifest:
    split: str
    records: tuple[ManifestRecord, ...]


def read_manifest(path) -> Manifest:
    path = Path(path)
    base = path.parent
    lines = [
        line.strip()
        for line in path.read_text().splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]
    if not lines or not lines[0].startswith("split"):
        raise ManifestError(f"{path}: first line must be 'split train|test'")
    split_parts = lines[0].split()
    if len(split_parts) != 2 or split_parts[1] not in _SPLITS:
        raise ManifestError(f"{path}: bad split line {lines[0]!r}")
    split = split_parts[1]

    records: list[ManifestRecord] = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ManifestError(
                f"{path}:{lineno}: expected 'image mask [fov]', got {line!r}"
            )
        rec = ManifestRecord(
            image=base / parts[0],
            mask=base / parts[1],
            fov=base / parts[2] if len(parts) == 3 else None,
        )
        for p in (rec.image, rec.mask, rec.fov):
            if p is not None and not p.is_file():
                raise ManifestError(f"{path}:{lineno}: missing file {p}")
        img = read_pnm(rec.image)
        mask = read_pnm(rec.mask)
        if mask.ndim != 2:
            raise ManifestError(f"{path}:{lineno}: mask {rec.mask} must be a graymap")
        if img.shape[:2] != mask.shape:
            raise ManifestError(
                f"{path}:{lineno}: image {img.shape[:2]} vs mask {mask.shape} size mismatch"
            )
        if rec.fov is not None and read_pnm(rec.fov).shape != mask.shape:
            raise ManifestError(f"{path}:{lineno}: fov size does not match mask")
        records.append(rec)
    if not records:
        raise ManifestError(f"{path}: manifest lists no records")
    return Manifest(split, tuple(records))


def write_manifest(path, split: str, entries) -> None:
    """Write relative-path records; entries are (image, mask) or (image, mask, fov)."""
    if split not in _SPLITS:
        raise ManifestError(f"bad split {split!r}")
    lines = [f"split {split}"]
    for entry in entries:
        lines.append(" ".join(str(p) for p in entry))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(manifest: Manifest) -> list[tuple[np.ndarray, np.ndarray]]:
    """Load (image, mask) arrays; images (H, W, 3), masks (H, W, 1) binary."""
    dataset = []
    for rec in manifest.records:
        img = read_pnm(rec.image)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        mask = (read_pnm(rec.mask) > 0.5).astype(np.float64)[:, :, None]
        dataset.append((img, mask))
    return dataset
