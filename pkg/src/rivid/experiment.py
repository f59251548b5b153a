"""Desk-scale comparison of a bilinear single-stream baseline against FFSR+RIFE."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .datamodel import load_samples
from .degrade import RESOLUTION_GRID, DegradeProtocol, apply_protocol
from .evalkit import degrade_to, evaluate_samples, mean_abs_slope, objective_curves
from .ffsr import ffsr_loss
from .synth import SynthSpec, synth_corpus
from .trainer import Checkpoint, TrainConfig, input_tensor, prepare, run_stage

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    n_identities: int = 32
    images_per_identity: int = 20
    canonical_size: tuple[int, int] = (64, 32)
    epochs_per_stage: int = 20
    batch_size: int = 16
    ffsr_channels: int = 16
    rife_widths: tuple[int, ...] = (16, 32, 64, 128)
    embedding_dim: int = 256
    seeds: tuple[int, ...] = (0, 1, 2)

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        return TrainConfig(
            canonical_size=self.canonical_size, epochs_per_stage=self.epochs_per_stage,
            batch_size=self.batch_size, ffsr_channels=self.ffsr_channels, rife_widths=self.rife_widths,
            embedding_dim=self.embedding_dim, seed=seed, **overrides,
        )


@dataclass
class SeedResult:
    seed: int
    rank1_baseline: float
    rank1_full: float
    rank5_baseline: float
    rank5_full: float
    slope_baseline: float
    slope_full: float
    curve_baseline: list[float]
    curve_full: list[float]
    w_high_lowres: list[float]
    w_high_highres: list[float]
    seconds: float
    logs: dict = field(default_factory=dict)


def build_data(toy: ToyConfig, seed: int, workdir: Path):
    """Render the corpus and degrade every split to resolutions drawn from the 1/8 grid."""
    spec = SynthSpec(toy.n_identities, toy.images_per_identity, toy.canonical_size, seed=seed)
    corpus = synth_corpus(spec, workdir / "hr")
    ratios = tuple(Fraction(k, 8) for k in range(1, 9))
    degraded = {}
    for i, (name, man) in enumerate(corpus.manifests.items()):
        proto = DegradeProtocol("MLR", ratios, seed=seed * 10 + i)
        degraded[name] = apply_protocol(man, proto, workdir / "data")
        degraded[name].save(workdir / "data" / f"{name}.csv")
    return corpus, degraded


def train_full(toy: ToyConfig, seed: int, train_batch, ids, mask: str = "gaussian"):
    logs = {}
    ckpt = None
    for stage in ("ffsr_pretrain", "rife_train", "joint"):
        ckpt, logs[stage] = run_stage(toy.train_config(seed, stage=stage, mask=mask), train_batch, ckpt, ids)
    return ckpt, logs


def train_baseline(toy: ToyConfig, seed: int, train_batch, ids):
    """Single stream, bilinear input, same RIFE schedule as stages 2 and 3."""
    logs = {}
    ckpt = None
    for stage in ("rife_train", "joint"):
        cfg = toy.train_config(seed, stage=stage, use_ffsr=False, dual=False)
        ckpt, logs[stage] = run_stage(cfg, train_batch, ckpt, ids)
    return ckpt, logs


def run_seed(toy: ToyConfig, seed: int, workdir: str | Path) -> SeedResult:
    t0 = time.time()
    workdir = Path(workdir)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    corpus, data = build_data(toy, seed, workdir)
    ids = data["train"].identity_table()
    train_batch = prepare(load_samples(data["train"], ids), toy.train_config(seed))
    query, gallery = load_samples(data["query"]), load_samples(data["gallery"])
    test_hr = load_samples(corpus.query) + load_samples(corpus.gallery)
    width_max = corpus.query.width_max

    results = {}
    for name, trainer in (("baseline", train_baseline), ("full", train_full)):
        ckpt, logs = trainer(toy, seed, train_batch, ids)
        model = ckpt.build_model()
        cfg = TrainConfig.from_dict(ckpt.train_config)
        metrics = evaluate_samples(model, cfg, query, gallery)
        grid = objective_curves(model, test_hr, cfg, width_max, mode="b")
        results[name] = (ckpt, logs, metrics, grid, model, cfg)
        log.info("seed %d %s: %s", seed, name, metrics)

    _, _, _, _, model, cfg = results["full"]
    w = {}
    for r in (RESOLUTION_GRID[0], 1.0):
        x = input_tensor([degrade_to(s, r, width_max) for s in test_hr], cfg.canonical_size)
        w[r] = model.fusion_weights(x).mean(axis=0)[:, 1].tolist()

    mb, mf = results["baseline"][2], results["full"][2]
    gb, gf = results["baseline"][3], results["full"][3]
    return SeedResult(
        seed=seed,
        rank1_baseline=mb["rank1"], rank1_full=mf["rank1"],
        rank5_baseline=mb["rank5"], rank5_full=mf["rank5"],
        slope_baseline=mean_abs_slope(gb.r1, gb.O), slope_full=mean_abs_slope(gf.r1, gf.O),
        curve_baseline=gb.O.tolist(), curve_full=gf.O.tolist(),
        w_high_lowres=w[RESOLUTION_GRID[0]], w_high_highres=w[1.0],
        seconds=time.time() - t0,
        logs={k: {s: [r.mean_total for r in recs] for s, recs in v[1].items()} for k, v in results.items()},
    )


def foreground_mse(toy: ToyConfig, seed: int, workdir: str | Path, masks=("gaussian", "ones")) -> dict[str, float]:
    """Stage-1 FFSR trained per mask kind; MSE inside the true silhouette on held-out pairs."""
    workdir = Path(workdir)
    corpus, data = build_data(toy, seed, workdir)
    train = load_samples(data["train"])
    test = load_samples(data["query"]) + load_samples(data["gallery"])
    held = prepare(test, toy.train_config(seed, mask="external"))
    fg = held.masks  # external = the renderer's silhouette

    def fg_mse(restored):
        return float((((restored - held.targets) ** 2) * fg).sum() / (fg.sum() * 3))

    out = {"identity": fg_mse(held.inputs)}
    for kind in masks:
        cfg = toy.train_config(seed, stage="ffsr_pretrain", mask=kind)
        ckpt, _ = run_stage(cfg, prepare(train, cfg), None, {})
        restored = ckpt.build_model().ffsr.restore(held.inputs)
        out[kind] = fg_mse(restored)
        out[kind + "_all"] = float(ffsr_loss(restored, held.targets, torch.ones_like(fg)))
    return out


def summarize(results: list[SeedResult]) -> dict:
    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in results]))

    return {
        "rank1_baseline": mean("rank1_baseline"), "rank1_full": mean("rank1_full"),
        "slope_baseline": mean("slope_baseline"), "slope_full": mean("slope_full"),
        "w_high_lowres": np.mean([r.w_high_lowres for r in results], axis=0).tolist(),
        "w_high_highres": np.mean([r.w_high_highres for r in results], axis=0).tolist(),
    }
