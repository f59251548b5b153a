"""Three-stage training of the restoration front-end and the feature extractor.

Stage 1 fits FFSR with the masked reconstruction loss, stage 2 fits RIFE on
frozen-FFSR outputs, stage 3 optimizes both with the joint objective
``ffsr + alpha * (xent + beta * sum_t rw_t)``.
"""
from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .datamodel import LabeledSample, Manifest, ManifestError, load_samples
from .degrade import resize_to
from .ffsr import FFSR, FfsrConfig, ffsr_loss
from .masks import make_mask
from .rife import RIFE, RifeConfig, WeightHead, rife_loss

log = logging.getLogger(__name__)

STAGES = ("ffsr_pretrain", "rife_train", "joint")
STAGE_ALIASES = {"1": "ffsr_pretrain", "2": "rife_train", "3": "joint"}
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "stage", "mean_total", "mean_ffsr", "mean_xent", "mean_rw", "lr")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.1
    stage: str = "ffsr_pretrain"
    epochs_per_stage: int = 20
    batch_size: int = 16
    initial_lr: float | None = None  # None: 0.01 for stages 1-2, 0.001 for stage 3
    lr_drop: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    canonical_size: tuple[int, int] = (128, 64)
    seed: int = 0
    hflip: bool = False
    mask: str = "gaussian"
    sigma_frac: float = 0.5
    use_ffsr: bool = True
    dual: bool = True
    ffsr_channels: int = 32
    rife_widths: tuple[int, ...] = (16, 32, 64, 128)
    rife_units: int = 2
    embedding_dim: int = 256
    from_scratch: bool = False

    def __post_init__(self) -> None:
        self.stage = STAGE_ALIASES.get(str(self.stage), str(self.stage))
        self.canonical_size = tuple(int(v) for v in self.canonical_size)
        self.rife_widths = tuple(int(v) for v in self.rife_widths)
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.epochs_per_stage < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_stage and batch_size must be >= 1")
        if self.mask not in ("gaussian", "ones", "external"):
            raise ValueError(f"unknown mask kind {self.mask!r}")
        h, w = self.canonical_size
        if h % 4 or w % 4 or h < 8 or w < 4:
            raise ValueError(f"canonical size {h}x{w} must be >= 8x4 and divisible by 4")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["canonical_size"] = list(self.canonical_size)
        d["rife_widths"] = list(self.rife_widths)
        return d

    @property
    def stage_index(self) -> int:
        return STAGES.index(self.stage) + 1

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-indexed ``epoch``: dropped after half the epochs."""
        base = self.initial_lr
        if base is None:
            base = 0.001 if self.stage == "joint" else 0.01
        half = max(1, self.epochs_per_stage // 2)
        return base * (self.lr_drop if epoch > half else 1.0)

    def ffsr_config(self) -> FfsrConfig:
        return FfsrConfig(base_channels=self.ffsr_channels)

    def rife_config(self, n_classes: int) -> RifeConfig:
        return RifeConfig(
            n_blocks=len(self.rife_widths), widths=self.rife_widths, units_per_block=self.rife_units,
            embedding_dim=self.embedding_dim, n_classes=n_classes, beta=self.beta, dual=self.dual,
        )


def preprocess(sample: LabeledSample, canonical_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Resize the degraded input and the HR target to the canonical size.

    The resolution is the one recorded from the pre-resize width; resizing
    never changes it.
    """
    size = tuple(canonical_size)
    if size[0] < 8 or size[1] < 4:
        raise ValueError(f"degenerate canonical size {size}")
    return resize_to(sample.image, size), resize_to(sample.hr_target, size), sample.resolution, sample.person_id


class Batch(NamedTuple):
    inputs: torch.Tensor
    targets: torch.Tensor
    masks: torch.Tensor
    resolution: torch.Tensor
    labels: torch.Tensor

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(*(t[idx] for t in self))

    def hflip(self) -> "Batch":
        return Batch(self.inputs.flip(-1), self.targets.flip(-1), self.masks.flip(-1), self.resolution, self.labels)


def to_chw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))


def prepare(samples: list[LabeledSample], config: TrainConfig, dtype=torch.float32) -> Batch:
    """Preprocess every sample into one in-memory batch (inputs, targets, masks, r, labels)."""
    if not samples:
        raise ManifestError("no samples")
    h, w = config.canonical_size
    xs, ys, ms, rs, ls = [], [], [], [], []
    for s in samples:
        x, y, r, pid = preprocess(s, config.canonical_size)
        xs.append(to_chw(x))
        ys.append(to_chw(y))
        ms.append(torch.from_numpy(np.array(make_mask(config.mask, h, w, config.sigma_frac, s.mask_path))))
        rs.append(r)
        ls.append(pid)
    return Batch(
        torch.stack(xs).to(dtype), torch.stack(ys).to(dtype), torch.stack(ms).unsqueeze(1).to(dtype),
        torch.tensor(rs, dtype=dtype), torch.tensor(ls, dtype=torch.long),
    )


def input_tensor(samples: list[LabeledSample], canonical_size: tuple[int, int], dtype=torch.float32) -> torch.Tensor:
    """Canonical-size network inputs only (no targets or masks)."""
    return torch.stack([to_chw(preprocess(s, canonical_size)[0]) for s in samples]).to(dtype)


def prepare_manifest(manifest: Manifest, config: TrainConfig, ids: dict[int, int] | None = None) -> Batch:
    return prepare(load_samples(manifest, ids), config)


class ReidModel(nn.Module):
    """FFSR (optional) chained into RIFE (optional until stage 2)."""

    def __init__(self, ffsr: FFSR | None, rife: RIFE | None):
        super().__init__()
        self.ffsr = ffsr
        self.rife = rife

    def restore(self, x: torch.Tensor) -> torch.Tensor:
        return x if self.ffsr is None else self.ffsr.restore(x)

    @torch.no_grad()
    def embed(self, x: torch.Tensor, batch_size: int = 64) -> np.ndarray:
        """Inference embeddings (clamped restoration, BN in eval mode) as float64."""
        self.eval()
        out = [self.rife(self.restore(x[i : i + batch_size])).embedding for i in range(0, len(x), batch_size)]
        return torch.cat(out).double().numpy()

    @torch.no_grad()
    def fusion_weights(self, x: torch.Tensor, batch_size: int = 64) -> np.ndarray:
        """N x T x 2 array of predicted (w_low, w_high) per dual-stream block."""
        self.eval()
        chunks = []
        for i in range(0, len(x), batch_size):
            bw = self.rife(self.restore(x[i : i + batch_size])).block_weights
            chunks.append(torch.stack([torch.stack(p, dim=1) for p in bw], dim=1))
        return torch.cat(chunks).double().numpy()


class LossTerms(NamedTuple):
    total: torch.Tensor
    ffsr: torch.Tensor
    xent: torch.Tensor
    rw: torch.Tensor
    rife: torch.Tensor


def total_loss(model: ReidModel, batch: Batch, alpha: float = 1.0, beta: float = 0.1) -> LossTerms:
    """Joint objective on a batch: ffsr + alpha * rife, RIFE fed the unclamped restoration."""
    if model.ffsr is not None:
        restored = model.ffsr(batch.inputs)
        l_ffsr = ffsr_loss(restored, batch.targets, batch.masks)
    else:
        restored = batch.inputs
        l_ffsr = torch.zeros((), dtype=batch.inputs.dtype)
    rl = rife_loss(model.rife(restored), batch.labels, batch.resolution, beta)
    return LossTerms(l_ffsr + alpha * rl.total, l_ffsr, rl.xent, rl.rw, rl.total)


def param_groups(module: nn.Module, weight_decay: float) -> list[dict]:
    """Decay conv and FC parameters; leave BN parameters and weight-head biases undecayed."""
    head_biases = {id(m.bias) for h in module.modules() if isinstance(h, WeightHead) for m in (h.fc1, h.fc2)}
    decay, no_decay = [], []
    for mod in module.modules():
        for p in mod.parameters(recurse=False):
            if not p.requires_grad:
                continue
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)) and id(p) not in head_biases:
                decay.append(p)
            else:
                no_decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


@dataclass
class Checkpoint:
    train_config: dict
    ffsr_config: dict | None = None
    rife_config: dict | None = None
    ffsr_state: dict | None = None
    rife_state: dict | None = None
    identity_map: list[list[int]] = field(default_factory=list)
    stages: list[str] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model: ReidModel, config: TrainConfig, identity_map: dict[int, int], stages: list[str]) -> "Checkpoint":
        def state(m):
            return None if m is None else {k: v.detach().clone() for k, v in m.state_dict().items()}

        return cls(
            train_config=config.to_dict(),
            ffsr_config=None if model.ffsr is None else model.ffsr.config.to_dict(),
            rife_config=None if model.rife is None else model.rife.config.to_dict(),
            ffsr_state=state(model.ffsr),
            rife_state=state(model.rife),
            identity_map=[[int(k), int(v)] for k, v in sorted(identity_map.items())],
            stages=list(stages),
        )

    def build_model(self) -> ReidModel:
        ffsr = rife = None
        if self.ffsr_config is not None:
            ffsr = FFSR(FfsrConfig(**self.ffsr_config))
            ffsr.load_state_dict(self.ffsr_state)
        if self.rife_config is not None:
            rife = RIFE(RifeConfig(**self.rife_config))
            rife.load_state_dict(self.rife_state)
        return ReidModel(ffsr, rife)

    @property
    def ids(self) -> dict[int, int]:
        return {k: v for k, v in self.identity_map}

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(asdict(self), buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        d = torch.load(path, map_location="cpu", weights_only=True)
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        return cls(**d)

    def parameter_count(self) -> dict[str, int]:
        model = self.build_model()
        return {
            "ffsr": 0 if model.ffsr is None else sum(p.numel() for p in model.ffsr.parameters()),
            "rife": 0 if model.rife is None else sum(p.numel() for p in model.rife.parameters()),
        }


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    mean_total: float
    mean_ffsr: float | None
    mean_xent: float | None
    mean_rw: float | None
    lr: float

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [str(self.epoch), self.stage, fmt(self.mean_total), fmt(self.mean_ffsr),
                fmt(self.mean_xent), fmt(self.mean_rw), repr(float(self.lr))]


def write_loss_log(records: list[EpochRecord], path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for rec in records:
        writer.writerow(rec.row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


class StageError(RuntimeError):
    pass


def _check_prerequisites(config: TrainConfig, init: Checkpoint | None) -> None:
    done = set(init.stages) if init else set()
    if config.stage == "ffsr_pretrain" and not config.use_ffsr:
        raise StageError("stage 1 trains FFSR; use_ffsr is false")
    if config.stage == "rife_train" and config.use_ffsr and "ffsr_pretrain" not in done and not config.from_scratch:
        raise StageError("stage 2 needs a stage-1 FFSR checkpoint (or from_scratch=true)")
    if config.stage == "joint":
        needed = {"rife_train"} | ({"ffsr_pretrain"} if config.use_ffsr and not config.from_scratch else set())
        if not needed <= done:
            raise StageError(f"stage 3 needs a checkpoint with stages {sorted(needed)}, have {sorted(done)}")


def _initial_model(config: TrainConfig, init: Checkpoint | None, n_classes: int) -> ReidModel:
    model = init.build_model() if init is not None else ReidModel(None, None)
    if config.use_ffsr and model.ffsr is None:
        model.ffsr = FFSR(config.ffsr_config())
    if not config.use_ffsr:
        model.ffsr = None
    if config.stage != "ffsr_pretrain" and model.rife is None:
        model.rife = RIFE(config.rife_config(n_classes))
    if model.rife is not None and model.rife.config.n_classes != n_classes and config.stage != "ffsr_pretrain":
        raise StageError(f"checkpoint has {model.rife.config.n_classes} classes, data has {n_classes}")
    return model


def run_stage(
    config: TrainConfig,
    train: Manifest | Batch,
    init: Checkpoint | None = None,
    identity_map: dict[int, int] | None = None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Run one training stage and return the resulting checkpoint and per-epoch log.

    ``train`` is a training manifest or an already prepared batch (then
    ``identity_map`` must be given). Randomness flows only from ``config.seed``.
    """
    _check_prerequisites(config, init)
    if isinstance(train, Manifest):
        if not train.entries:
            raise ManifestError("empty training manifest")
        identity_map = init.ids if init and init.identity_map else train.identity_table()
        data = prepare_manifest(train, config, identity_map)
    else:
        data = train
        identity_map = identity_map if identity_map is not None else {i: i for i in range(int(data.labels.max()) + 1)}
    if data.n == 0:
        raise ManifestError("empty training data")
    n_classes = len(identity_map)

    torch.manual_seed(config.seed * 1000 + config.stage_index)
    model = _initial_model(config, init, n_classes)
    stage = config.stage

    if stage == "ffsr_pretrain":
        trainable = model.ffsr
    elif stage == "rife_train":
        trainable = model.rife
        if model.ffsr is not None:
            for p in model.ffsr.parameters():
                p.requires_grad_(False)
            # frozen and deterministic: restore once instead of every epoch
            with torch.no_grad():
                model.ffsr.eval()
                data = data._replace(inputs=torch.cat([model.ffsr(data.inputs[i : i + 64]) for i in range(0, data.n, 64)]))
    else:
        trainable = model

    optimizer = torch.optim.SGD(param_groups(trainable, config.weight_decay), lr=config.lr_at(1), momentum=config.momentum)
    records = []
    n = data.n
    for epoch in range(1, config.epochs_per_stage + 1):
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        trainable.train()
        rng = np.random.default_rng([config.seed, config.stage_index, epoch])
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if config.hflip else np.zeros(n, dtype=bool)
        sums = {"total": 0.0, "ffsr": 0.0, "xent": 0.0, "rw": 0.0}
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2 and stage != "ffsr_pretrain":
                continue  # batch norm needs more than one sample
            batch = data.take(torch.from_numpy(idx))
            if flips[idx].any():
                f = torch.from_numpy(flips[idx])
                flipped = batch.hflip()
                batch = Batch(*(torch.where(f.view(-1, *[1] * (a.ndim - 1)), b, a) for a, b in zip(batch, flipped)))
            optimizer.zero_grad()
            if stage == "ffsr_pretrain":
                loss = ffsr_loss(model.ffsr(batch.inputs), batch.targets, batch.masks)
                terms = {"total": loss, "ffsr": loss}
            elif stage == "rife_train":
                rl = rife_loss(model.rife(batch.inputs), batch.labels, batch.resolution, config.beta)
                loss = rl.total
                terms = {"total": loss, "xent": rl.xent, "rw": rl.rw}
            else:
                lt = total_loss(model, batch, config.alpha, config.beta)
                loss = lt.total
                terms = {"total": loss, "ffsr": lt.ffsr, "xent": lt.xent, "rw": lt.rw}
            loss.backward()
            optimizer.step()
            for k, v in terms.items():
                sums[k] += float(v.detach()) * len(idx)
        used = n if stage == "ffsr_pretrain" else n - (1 if n % config.batch_size == 1 else 0)
        means = {k: v / used for k, v in sums.items()}
        rec = EpochRecord(
            epoch, stage, means["total"],
            means["ffsr"] if stage != "rife_train" and model.ffsr is not None else None,
            None if stage == "ffsr_pretrain" else means["xent"],
            None if stage == "ffsr_pretrain" or not config.dual else means["rw"],
            lr,
        )
        records.append(rec)
        log.info("stage=%s epoch=%d total=%.5f lr=%g", stage, epoch, rec.mean_total, lr)

    if model.ffsr is not None:
        for p in model.ffsr.parameters():
            p.requires_grad_(True)
    stages = (list(init.stages) if init else []) + [stage]
    return Checkpoint.from_model(model, config, identity_map, stages), records
