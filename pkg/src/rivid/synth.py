"""Seeded renderer of synthetic pedestrian crops.

Every identity owns a coarse appearance (shirt and trouser colours) and a fine
one (thin shirt stripes, a hair band). Box downsampling blends the fine cues
away, so identification gets harder as resolution drops while colour remains.
Background clutter, illumination and placement are drawn per image. The
background is rendered out of focus (soft-edged) behind a sharp person.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import Manifest, ManifestEntry, save_image

SHIRT_COLORS = np.array([
    [0.80, 0.15, 0.15], [0.15, 0.55, 0.20], [0.15, 0.25, 0.75], [0.85, 0.75, 0.15],
    [0.60, 0.20, 0.65], [0.90, 0.50, 0.10], [0.20, 0.65, 0.70], [0.90, 0.90, 0.88],
    [0.45, 0.30, 0.15], [0.55, 0.55, 0.55],
])
PANTS_COLORS = np.array([
    [0.10, 0.10, 0.12], [0.20, 0.25, 0.50], [0.50, 0.40, 0.25], [0.35, 0.35, 0.35],
    [0.70, 0.70, 0.65], [0.30, 0.15, 0.10], [0.15, 0.35, 0.20], [0.55, 0.15, 0.20],
])
STRIPE_COLORS = np.array([[0.05, 0.05, 0.05], [0.95, 0.95, 0.95], [0.95, 0.85, 0.10], [0.10, 0.45, 0.95]])
HAIR_COLORS = np.array([[0.95, 0.10, 0.10], [0.10, 0.85, 0.20], [0.95, 0.95, 0.95], [0.10, 0.40, 0.95]])
SKIN = np.array([0.85, 0.68, 0.55])
STRIPE_PERIODS = (2, 3, 4)
MIN_SIZE = (32, 16)


@dataclass(frozen=True)
class Identity:
    shirt: int
    pants: int
    stripe_period: int
    stripe_vertical: bool
    stripe_color: int
    hair: int
    torso_frac: float
    leg_frac: float

    @property
    def coarse(self) -> tuple[int, int]:
        return (self.shirt, self.pants)

    @property
    def fine(self) -> tuple[int, bool, int, int]:
        return (self.stripe_period, self.stripe_vertical, self.stripe_color, self.hair)


@dataclass(frozen=True)
class Nuisance:
    background: tuple[float, float, float]
    illumination: float
    jitter_x: float
    scale: float
    clutter: tuple[tuple[int, int, int, int, float, float, float], ...]
    noise_seed: int


@dataclass
class SynthSpec:
    n_identities: int = 32
    images_per_identity: int = 20
    canonical_size: tuple[int, int] = (128, 64)
    seed: int = 0
    clutter: int = 6
    noise_std: float = 0.03
    illumination: tuple[float, float] = (0.75, 1.15)
    jitter_frac: float = 0.08
    background_blur: float = 0.04  # Gaussian sigma as a fraction of the width; 0 keeps hard edges

    def __post_init__(self) -> None:
        self.canonical_size = tuple(int(v) for v in self.canonical_size)
        self.illumination = tuple(float(v) for v in self.illumination)
        if self.n_identities < 2:
            raise ValueError("need at least two identities")
        if self.images_per_identity < 2:
            raise ValueError("need at least two images per identity for a query/gallery split")
        n_coarse = len(SHIRT_COLORS) * len(PANTS_COLORS)
        if self.n_identities > n_coarse:
            raise ValueError(f"at most {n_coarse} identities have pairwise-distinct colours")
        h, w = self.canonical_size
        if h < MIN_SIZE[0] or w < MIN_SIZE[1]:
            raise ValueError(f"canonical size {h}x{w} too small to draw stripes; minimum {MIN_SIZE}")
        if self.background_blur < 0:
            raise ValueError("background_blur must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["canonical_size"] = list(self.canonical_size)
        d["illumination"] = list(self.illumination)
        return d


def sample_identities(spec: SynthSpec) -> list[Identity]:
    """Draw identities with pairwise-distinct coarse and fine attribute tuples."""
    rng = np.random.default_rng([spec.seed, 0x1D])
    coarse = list(itertools.product(range(len(SHIRT_COLORS)), range(len(PANTS_COLORS))))
    fine = list(itertools.product(STRIPE_PERIODS, (False, True), range(len(STRIPE_COLORS)), range(len(HAIR_COLORS))))
    ci = rng.permutation(len(coarse))[: spec.n_identities]
    fi = rng.permutation(len(fine))[: spec.n_identities]
    people = []
    for c, f in zip(ci, fi):
        shirt, pants = coarse[c]
        period, vertical, stripe, hair = fine[f]
        people.append(Identity(
            shirt=int(shirt), pants=int(pants), stripe_period=int(period), stripe_vertical=bool(vertical),
            stripe_color=int(stripe), hair=int(hair),
            torso_frac=float(rng.uniform(0.45, 0.6)), leg_frac=float(rng.uniform(0.16, 0.22)),
        ))
    return people


def sample_nuisance(spec: SynthSpec, image_index: int) -> Nuisance:
    rng = np.random.default_rng([spec.seed, 0x2E, image_index])
    h, w = spec.canonical_size
    clutter = []
    for _ in range(spec.clutter):
        y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
        y1, x1 = y0 + int(rng.integers(h // 16, h // 3)), x0 + int(rng.integers(w // 8, w // 2))
        clutter.append((y0, x0, y1, x1, *map(float, rng.uniform(0.1, 0.9, 3))))
    return Nuisance(
        background=tuple(map(float, rng.uniform(0.25, 0.75, 3))),
        illumination=float(rng.uniform(*spec.illumination)),
        jitter_x=float(rng.uniform(-spec.jitter_frac, spec.jitter_frac) * w),
        scale=float(rng.uniform(0.9, 1.0)),
        clutter=tuple(clutter),
        noise_seed=int(rng.integers(2**31)),
    )


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of an H x W x C array with edge replication."""
    if sigma <= 0:
        return img
    radius = max(1, int(np.ceil(3 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        out = sum(t * np.take(padded, range(i, i + n), axis=axis) for i, t in enumerate(taps))
    return out


def render(
    person: Identity, nuis: Nuisance, size: tuple[int, int], noise_std: float, background_blur: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (image H x W x 3 in [0, 1], binary foreground mask H x W)."""
    h, w = size
    img = np.empty((h, w, 3))
    img[:] = nuis.background
    for y0, x0, y1, x1, r, g, b in nuis.clutter:
        img[y0:y1, x0:x1] = (r, g, b)
    img = blur(img, background_blur * w)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = (w - 1) / 2 + nuis.jitter_x
    top = h * (1 - nuis.scale * 0.94)
    span = h * nuis.scale * 0.94

    def band(a: float, b: float) -> np.ndarray:
        return (yy >= top + a * span) & (yy < top + b * span)

    head_r = 0.08 * span
    head_cy = top + head_r
    head = ((xx - cx) / (0.8 * head_r)) ** 2 + ((yy - head_cy) / head_r) ** 2 <= 1.0
    hair = head & (yy < head_cy - 0.35 * head_r)
    torso_half = person.torso_frac * w / 2
    torso = band(0.18, 0.55) & (np.abs(xx - cx) <= torso_half)
    leg_half = person.leg_frac * w / 2
    gap = 0.04 * w
    legs = band(0.55, 1.0) & (np.abs(xx - cx) >= gap) & (np.abs(xx - cx) <= gap + 2 * leg_half)

    # stripes are anchored to the person so they move with the jitter
    ox, oy = int(np.floor(cx)), int(np.floor(top))
    coord = (xx.astype(int) - ox) if person.stripe_vertical else (yy.astype(int) - oy)
    stripes = torso & (coord % person.stripe_period == 0)

    img[head] = SKIN
    img[hair] = HAIR_COLORS[person.hair]
    img[torso] = SHIRT_COLORS[person.shirt]
    img[stripes] = STRIPE_COLORS[person.stripe_color]
    img[legs] = PANTS_COLORS[person.pants]

    img *= nuis.illumination
    noise = np.random.default_rng(nuis.noise_seed).normal(0.0, noise_std, size=img.shape)
    img = np.clip(img + noise, 0.0, 1.0)
    return img, head | torso | legs


@dataclass
class Corpus:
    train: Manifest
    query: Manifest
    gallery: Manifest
    identities: list[Identity] = field(default_factory=list)

    @property
    def manifests(self) -> dict[str, Manifest]:
        return {"train": self.train, "query": self.query, "gallery": self.gallery}


def synth_corpus(spec: SynthSpec, out_dir: str | Path, workers: int = 1) -> Corpus:
    """Render the corpus to ``out_dir`` and write train/query/gallery manifests.

    The first half of the identities form the training split; each test
    identity contributes its first half of images to the query split and the
    rest to the gallery. Output does not depend on ``workers``.
    """
    out_dir = Path(out_dir)
    people = sample_identities(spec)
    h, w = spec.canonical_size
    n_train = spec.n_identities // 2
    m = spec.images_per_identity

    def work(idx: int) -> tuple[str, ManifestEntry]:
        pid, k = divmod(idx, m)
        img, mask = render(people[pid], sample_nuisance(spec, idx), (h, w), spec.noise_std, spec.background_blur)
        rel = f"images/hr/id{pid:03d}_{k:03d}.png"
        mrel = f"masks/id{pid:03d}_{k:03d}.png"
        save_image(img, out_dir / rel)
        (out_dir / mrel).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out_dir / mrel, format="PNG")
        split = "train" if pid < n_train else ("query" if k < m // 2 else "gallery")
        return split, ManifestEntry(rel, rel, pid, 1.0, mrel)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        done = list(pool.map(work, range(spec.n_identities * m)))
    rows: dict[str, list[ManifestEntry]] = {"train": [], "query": [], "gallery": []}
    for split, entry in done:
        rows[split].append(entry)
    manifests = {s: Manifest(rows[s], w, s, out_dir) for s in rows}
    for s, man in manifests.items():
        man.save(out_dir / f"{s}.csv")
    return Corpus(manifests["train"], manifests["query"], manifests["gallery"], people)
