"""Retrieval metrics and the cross-resolution distance-ratio diagnostic."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import LabeledSample, load_manifest, load_samples
from .degrade import RESOLUTION_GRID, downsample, scaled_size
from .trainer import Checkpoint, ReidModel, TrainConfig, input_tensor


def pairwise_sqdist(queries, gallery) -> np.ndarray:
    """n_query x n_gallery squared Euclidean distances, summed from explicit differences."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if q.size == 0 or g.size == 0:
        raise ValueError("empty query or gallery set")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {g.shape[1]}")
    out = np.empty((q.shape[0], g.shape[0]))
    step = max(1, 2**22 // max(1, g.size))
    for i in range(0, q.shape[0], step):
        diff = q[i : i + step, None, :] - g[None, :, :]
        out[i : i + step] = np.einsum("qgd,qgd->qg", diff, diff)
    return out


@dataclass(frozen=True)
class CmcCurve:
    ranks: tuple[int, ...]
    accuracy: tuple[float, ...]

    def __getitem__(self, k: int) -> float:
        return self.accuracy[self.ranks.index(k)]

    def as_dict(self) -> dict[str, float]:
        return {f"rank{k}": a for k, a in zip(self.ranks, self.accuracy)}


def first_match_positions(
    dist: np.ndarray,
    query_ids: Sequence[int],
    gallery_ids: Sequence[int],
    query_cams: Sequence[int] | None = None,
    gallery_cams: Sequence[int] | None = None,
) -> np.ndarray:
    """0-based sorted position of each query's first correct gallery entry.

    Ties in distance are broken by gallery index. With camera ids given,
    same-identity same-camera gallery entries are dropped from the ranking.
    """
    dist = np.asarray(dist, dtype=np.float64)
    qid, gid = np.asarray(query_ids), np.asarray(gallery_ids)
    if dist.shape != (len(qid), len(gid)):
        raise ValueError(f"distance matrix {dist.shape} does not match {len(qid)} queries x {len(gid)} gallery")
    missing = set(qid.tolist()) - set(gid.tolist())
    if missing:
        raise ValueError(f"query identities absent from gallery: {sorted(missing)[:5]}")
    pos = np.empty(len(qid), dtype=np.int64)
    for i in range(len(qid)):
        order = np.argsort(dist[i], kind="stable")
        matches = gid[order] == qid[i]
        if query_cams is not None:
            junk = matches & (np.asarray(gallery_cams)[order] == query_cams[i])
            keep = ~junk
            matches = matches[keep]
            if not matches.any():
                raise ValueError(f"query {i} has no cross-camera match")
        pos[i] = int(np.argmax(matches))
    return pos


def cmc(
    dist: np.ndarray,
    query_ids: Sequence[int],
    gallery_ids: Sequence[int],
    ranks: Sequence[int] = (1, 5),
    query_cams: Sequence[int] | None = None,
    gallery_cams: Sequence[int] | None = None,
) -> CmcCurve:
    ranks = tuple(sorted(int(k) for k in ranks))
    if not ranks or ranks[0] < 1:
        raise ValueError("ranks must be positive")
    pos = first_match_positions(dist, query_ids, gallery_ids, query_cams, gallery_cams)
    return CmcCurve(ranks, tuple(float(np.mean(pos < k)) for k in ranks))


@dataclass(frozen=True)
class ObjectiveResult:
    O: float
    D_sim: float
    D_dif: float

    @property
    def defined(self) -> bool:
        return not math.isnan(self.O)


def objective(feats_r1, ids_r1, feats_r2, ids_r2, exclude_self: bool = False) -> ObjectiveResult:
    """D_sim / D_dif over ordered (sample at r1, sample at r2) pairs.

    ``exclude_self`` drops the pairs (i, i), for the case where both feature
    sets are the same samples at the same resolution. D_dif == 0 yields an
    undefined (NaN) ratio instead of a number.
    """
    id1, id2 = np.asarray(ids_r1), np.asarray(ids_r2)
    if len(set(id1.tolist()) | set(id2.tolist())) < 2:
        raise ValueError("need at least two identities")
    d = pairwise_sqdist(feats_r1, feats_r2)
    same = id1[:, None] == id2[None, :]
    if exclude_self:
        if d.shape[0] != d.shape[1]:
            raise ValueError("self-pair exclusion needs aligned sample sets")
        same = same & ~np.eye(len(id1), dtype=bool)
    d_sim = float(d[same].sum())
    d_dif = float(d[id1[:, None] != id2[None, :]].sum())
    return ObjectiveResult(d_sim / d_dif if d_dif > 0 else math.nan, d_sim, d_dif)


@dataclass
class ObjectiveGrid:
    mode: str
    r1: list[float]
    r2: list[float]
    results: list[ObjectiveResult]
    n_samples: int
    n_identities: int

    @property
    def O(self) -> np.ndarray:
        return np.array([res.O for res in self.results])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# mode={self.mode} n_samples={self.n_samples} n_identities={self.n_identities}\n")
        buf.write("r1,r2,D_sim,D_dif,O\n")
        for a, b, res in zip(self.r1, self.r2, self.results):
            o = repr(res.O) if res.defined else "undefined"
            buf.write(f"{a!r},{b!r},{res.D_sim!r},{res.D_dif!r},{o}\n")
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def mean_abs_slope(r: Sequence[float], values: Sequence[float]) -> float:
    """Mean |dO/dr| over consecutive grid points."""
    r, v = np.asarray(r, dtype=np.float64), np.asarray(values, dtype=np.float64)
    return float(np.mean(np.abs(np.diff(v) / np.diff(r))))


def degrade_to(sample: LabeledSample, r: float, width_max: int) -> LabeledSample:
    """Re-render a sample from its HR original at dataset resolution ``r``."""
    hr = sample.hr_target
    width = scaled_size(width_max, r)
    small = downsample(hr, width / hr.shape[1])
    return LabeledSample(small, hr, sample.person_id, width / width_max, sample.source_path, sample.mask_path)


def embed_samples(model: ReidModel, samples: list[LabeledSample], config: TrainConfig) -> np.ndarray:
    return model.embed(input_tensor(samples, config.canonical_size))


def objective_curves(
    model: ReidModel,
    samples: list[LabeledSample],
    config: TrainConfig,
    width_max: int,
    mode: str = "a",
    grid: Sequence[float] = RESOLUTION_GRID,
) -> ObjectiveGrid:
    """Mode ``a``: r1 = r2 sweeping the grid. Mode ``b``: r2 = 1, r1 sweeping."""
    if mode not in ("a", "b"):
        raise ValueError(f"mode must be 'a' or 'b', got {mode!r}")
    ids = [s.person_id for s in samples]
    cache: dict[float, np.ndarray] = {}

    def feats(r: float) -> np.ndarray:
        if r not in cache:
            cache[r] = embed_samples(model, [degrade_to(s, r, width_max) for s in samples], config)
        return cache[r]

    r1s = list(grid)
    r2s = list(grid) if mode == "a" else [1.0] * len(r1s)
    results = [objective(feats(a), ids, feats(b), ids, exclude_self=(a == b)) for a, b in zip(r1s, r2s)]
    return ObjectiveGrid(mode, r1s, r2s, results, len(samples), len(set(ids)))


def load_split(data_dir: str | Path, split: str) -> tuple[list[LabeledSample], int]:
    man = load_manifest(Path(data_dir) / f"{split}.csv")
    return load_samples(man), man.width_max


def evaluate(model: ReidModel, config: TrainConfig, data_dir: str | Path, ranks=(1, 5)) -> dict:
    """Rank-k retrieval of query.csv against gallery.csv in ``data_dir``."""
    query, _ = load_split(data_dir, "query")
    gallery, _ = load_split(data_dir, "gallery")
    return evaluate_samples(model, config, query, gallery, ranks)


def evaluate_samples(model: ReidModel, config: TrainConfig, query, gallery, ranks=(1, 5)) -> dict:
    fq = embed_samples(model, query, config)
    fg = embed_samples(model, gallery, config)
    curve = cmc(pairwise_sqdist(fq, fg), [s.person_id for s in query], [s.person_id for s in gallery], ranks)
    return {**curve.as_dict(), "n_query": len(query), "n_gallery": len(gallery)}


def load_model(path: str | Path) -> tuple[ReidModel, TrainConfig, Checkpoint]:
    ckpt = Checkpoint.load(path)
    if ckpt.rife_config is None:
        raise ValueError("checkpoint has no feature extractor; run stage 2 first")
    return ckpt.build_model(), TrainConfig.from_dict(ckpt.train_config), ckpt
