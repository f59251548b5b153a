"""Resolution arithmetic, resampling kernels and benchmark degradation protocols.

Downscaling is exact area (box) averaging and upscaling is bilinear with
half-pixel centres. Both are written as separable resampling matrices so the
results are bit-stable across platforms and independent of any imaging library.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .datamodel import (
    MIN_WIDTH,
    Manifest,
    ManifestEntry,
    ManifestError,
    load_image,
    save_image,
)

DEFAULT_MLR_RATIOS = (Fraction(1, 2), Fraction(1, 3), Fraction(1, 4))
RESOLUTION_GRID = tuple(k / 8 for k in range(1, 9))


def resolution_of(width: int, width_max: int) -> float:
    if width <= 0 or width_max <= 0:
        raise ValueError("widths must be positive")
    if width > width_max:
        raise ValueError(f"width {width} exceeds width_max {width_max}")
    return width / width_max


def scaled_size(n: int, ratio: float) -> int:
    """round(ratio * n) with halves rounded up."""
    return int(math.floor(n * float(ratio) + 0.5 + 1e-9))


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) box-filter weights; each output cell averages the input span it covers."""
    if not 0 < n_out <= n_in:
        raise ValueError(f"area resampling needs 0 < n_out <= n_in, got {n_in}->{n_out}")
    scale = n_in / n_out
    W = np.zeros((n_out, n_in))
    for j in range(n_out):
        lo, hi = j * scale, (j + 1) * scale
        for i in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            W[j, i] = max(0.0, min(hi, i + 1) - max(lo, i))
    return W / W.sum(axis=1, keepdims=True)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights with half-pixel alignment and edge clamping."""
    if not 0 < n_in <= n_out:
        raise ValueError(f"bilinear upsampling needs 0 < n_in <= n_out, got {n_in}->{n_out}")
    W = np.zeros((n_out, n_in))
    for j in range(n_out):
        src = min(max((j + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        W[j, i0] += 1.0 - t
        W[j, i1] += t
    return W


def _axis_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_out == n_in:
        return np.eye(n_in)
    return area_matrix(n_in, n_out) if n_out < n_in else bilinear_matrix(n_in, n_out)


def resize_to(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize each axis independently: area when shrinking, bilinear when enlarging."""
    h, w = image.shape[:2]
    H, W = size
    if (H, W) == (h, w):
        return np.array(image, dtype=np.float64, copy=True)
    out = np.einsum("yi,ijc,xj->yxc", _axis_matrix(h, H), image, _axis_matrix(w, W), optimize=True)
    return np.clip(out, 0.0, 1.0)


def downsample(image: np.ndarray, ratio: float) -> np.ndarray:
    if not 0.0 < float(ratio) <= 1.0:
        raise ValueError(f"ratio {ratio} outside (0, 1]")
    if float(ratio) == 1.0:
        return np.array(image, dtype=np.float64, copy=True)
    h, w = image.shape[:2]
    H, W = scaled_size(h, ratio), scaled_size(w, ratio)
    if W < MIN_WIDTH or H < 1:
        raise ValueError(f"downsampled size {H}x{W} too small")
    return resize_to(image, (H, W))


def upsample_to(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[:2]
    if size[0] < h or size[1] < w:
        raise ValueError(f"target {size} smaller than source {(h, w)}")
    return resize_to(image, size)


@dataclass(frozen=True)
class DegradeProtocol:
    """MLR draws a ratio per image from ``mlr_ratios``; VR draws a target width from [lo, hi)."""

    kind: str = "MLR"
    mlr_ratios: tuple[Fraction, ...] = DEFAULT_MLR_RATIOS
    vr_width_range: tuple[int, int] = (8, 32)
    seed: int = 0

    def __post_init__(self) -> None:
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind not in ("MLR", "VR"):
            raise ValueError(f"unknown protocol {self.kind!r}")
        ratios = tuple(sorted({Fraction(r).limit_denominator(1000) for r in self.mlr_ratios}))
        object.__setattr__(self, "mlr_ratios", ratios)
        if kind == "MLR" and (not ratios or any(not 0 < r <= 1 for r in ratios)):
            raise ValueError("MLR ratios must lie in (0, 1]")
        lo, hi = self.vr_width_range
        if kind == "VR" and not 4 <= lo < hi:
            raise ValueError("VR width range must satisfy 4 <= lo < hi")

    def image_rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, index])

    def draw_ratio(self, index: int, width: int) -> float:
        rng = self.image_rng(index)
        if self.kind == "MLR":
            return float(self.mlr_ratios[int(rng.integers(len(self.mlr_ratios)))])
        lo, hi = self.vr_width_range
        target = int(rng.integers(lo, hi))
        if target > width:
            raise ValueError(f"VR target width {target} exceeds source width {width}")
        return target / width


def _rebase(path: Path, new_root: Path) -> str:
    return Path(os.path.relpath(path.resolve(), new_root.resolve())).as_posix()


def apply_protocol(manifest: Manifest, protocol: DegradeProtocol, out_dir: str | Path, workers: int = 1) -> Manifest:
    """Degrade every entry of ``manifest``, writing PNGs under ``out_dir/images``.

    The per-image random stream depends only on (seed, entry index). Entries
    drawn at ratio 1 keep their original input file.
    """
    if not manifest.entries:
        raise ManifestError("cannot degrade an empty manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(k: int) -> ManifestEntry:
        e = manifest.entries[k]
        src = manifest.resolve(e.input_path)
        img = load_image(src)
        ratio = protocol.draw_ratio(k, img.shape[1])
        if ratio == 1.0:
            input_rel = _rebase(src, out_dir)
            width = img.shape[1]
        else:
            small = downsample(img, ratio)
            input_rel = f"images/{manifest.split}_{k:05d}.png"
            save_image(small, out_dir / input_rel)
            width = small.shape[1]
        return ManifestEntry(
            input_path=input_rel,
            hr_path=_rebase(manifest.resolve(e.hr_path), out_dir),
            person_id=e.person_id,
            resolution=resolution_of(width, manifest.width_max),
            mask_path=_rebase(manifest.resolve(e.mask_path), out_dir) if e.mask_path else None,
        )

    with ThreadPoolExecutor(max_workers=workers) as pool:
        entries = list(pool.map(work, range(len(manifest.entries))))
    return Manifest(entries, manifest.width_max, manifest.split, out_dir)


def parse_ratios(text: str) -> tuple[Fraction, ...]:
    """'1/2,1/3,1/4' -> fractions."""
    return tuple(Fraction(tok.strip()) for tok in text.split(",") if tok.strip())
