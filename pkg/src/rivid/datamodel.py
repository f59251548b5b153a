"""Core types, CSV manifests and image ingestion."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

MANIFEST_HEADER = ("input_path", "hr_path", "person_id", "resolution")
SPLITS = ("train", "query", "gallery")
RESOLUTION_TOL = 1e-6
MIN_HEIGHT, MIN_WIDTH = 8, 4


class ManifestError(ValueError):
    pass


class ImageError(ValueError):
    pass


def check_image(pixels: np.ndarray) -> np.ndarray:
    """Validate an H x W x 3 float array in [0, 1] and return it as float64."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"expected H x W x 3 array, got shape {arr.shape}")
    if arr.shape[0] < MIN_HEIGHT or arr.shape[1] < MIN_WIDTH:
        raise ImageError(f"image {arr.shape[0]}x{arr.shape[1]} below minimum {MIN_HEIGHT}x{MIN_WIDTH}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ImageError("pixel values must lie in [0, 1]")
    return arr


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG as an RGB float64 array scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageError(f"not a readable image: {path}") from exc
    return rgb / 255.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(pixels) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write an [0, 1] float image as 8-bit PNG (lossless; no timestamps)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")


def image_width(path: str | Path) -> int:
    with Image.open(path) as im:
        return im.size[0]


@dataclass(frozen=True)
class ManifestEntry:
    input_path: str
    hr_path: str
    person_id: int
    resolution: float
    mask_path: str | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    width_max: int
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.width_max <= 0:
            raise ManifestError("width_max must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def person_ids(self) -> list[int]:
        return [e.person_id for e in self.entries]

    def identity_table(self) -> dict[int, int]:
        """Map raw person ids to a dense 0..C-1 index (sorted by raw id)."""
        return {pid: k for k, pid in enumerate(sorted(set(self.person_ids)))}

    def validate(self) -> "Manifest":
        """Recompute every resolution from the stored image widths.

        Returns a new manifest whose resolutions are the recomputed values.
        """
        out = []
        for e in self.entries:
            if e.person_id < 0:
                raise ManifestError(f"negative person_id {e.person_id}")
            w = image_width(self.resolve(e.input_path))
            if w > self.width_max:
                raise ManifestError(f"{e.input_path}: width {w} exceeds width_max {self.width_max}")
            r = w / self.width_max
            if abs(r - e.resolution) > RESOLUTION_TOL:
                raise ManifestError(
                    f"{e.input_path}: stored resolution {e.resolution} but width ratio {w}/{self.width_max} = {r}"
                )
            out.append(replace(e, resolution=r))
        return replace(self, entries=out)

    def to_csv(self) -> str:
        """Serialize, paths relative to ``root``. Byte-stable for identical content."""
        buf = io.StringIO()
        buf.write(f"# width_max={self.width_max}\n# split={self.split}\n")
        has_mask = any(e.mask_path for e in self.entries)
        header = list(MANIFEST_HEADER) + (["mask_path"] if has_mask else [])
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for e in self.entries:
            row = [e.input_path, e.hr_path, str(e.person_id), repr(float(e.resolution))]
            if has_mask:
                row.append(e.mask_path or "")
            writer.writerow(row)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")


def _parse_meta(lines: Iterable[str]) -> dict[str, str]:
    meta = {}
    for line in lines:
        body = line[1:].strip()
        if "=" in body:
            k, v = body.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def load_manifest(path: str | Path, validate: bool = True) -> Manifest:
    """Read a manifest CSV; ``#`` lines are comments (``# key=value`` carries metadata).

    Without a ``width_max`` comment the maximum input width in the file is used.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    meta = _parse_meta(ln for ln in lines if ln.startswith("#"))
    body = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    if not body:
        raise ManifestError(f"{path}: no header row")
    reader = csv.reader(body)
    header = next(reader)
    if tuple(header[:4]) != MANIFEST_HEADER or header[4:] not in ([], ["mask_path"]):
        raise ManifestError(f"{path}: bad header {header}")
    entries = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            pid = int(row[2])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: person_id {row[2]!r} is not an integer") from None
        if pid < 0:
            raise ManifestError(f"{path}:{lineno}: person_id must be non-negative")
        try:
            r = float(row[3])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: resolution {row[3]!r} is not a number") from None
        if not 0.0 < r <= 1.0:
            raise ManifestError(f"{path}:{lineno}: resolution {r} outside (0, 1]")
        mask = row[4] if len(row) > 4 and row[4] else None
        entries.append(ManifestEntry(row[0], row[1], pid, r, mask))
    split = meta.get("split") or (path.stem if path.stem in SPLITS else "train")
    root = path.parent
    if "width_max" in meta:
        width_max = int(meta["width_max"])
    else:
        if not entries:
            raise ManifestError(f"{path}: empty manifest without width_max")
        width_max = max(image_width(root / e.input_path) for e in entries)
    m = Manifest(entries, width_max, split, root)
    return m.validate() if validate else m


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    hr_target: np.ndarray
    person_id: int
    resolution: float
    source_path: str
    mask_path: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.resolution <= 1.0:
            raise ValueError(f"resolution {self.resolution} outside (0, 1]")
        if self.person_id < 0:
            raise ValueError("person_id must be non-negative")


def load_samples(manifest: Manifest, ids: dict[int, int] | None = None) -> list[LabeledSample]:
    """Materialize samples; ``ids`` remaps raw person ids (e.g. to dense labels)."""
    out = []
    for e in manifest.entries:
        pid = e.person_id if ids is None else ids[e.person_id]
        out.append(
            LabeledSample(
                image=check_image(load_image(manifest.resolve(e.input_path))),
                hr_target=check_image(load_image(manifest.resolve(e.hr_path))),
                person_id=pid,
                resolution=e.resolution,
                source_path=e.input_path,
                mask_path=str(manifest.resolve(e.mask_path)) if e.mask_path else None,
            )
        )
    return out


def stack_embeddings(vectors: Sequence[np.ndarray]) -> np.ndarray:
    arr = np.asarray(np.stack([np.asarray(v, dtype=np.float64).ravel() for v in vectors]))
    if not np.all(np.isfinite(arr)):
        raise ValueError("embeddings must be finite")
    return arr
