"""Training loop: batching sites, view generation, optimisation, EMA
teacher updates, schedules, metrics, and checkpointing, plus deterministic
embedding extraction for a trained model.

One invocation trains one channel model (fluorescent or brightfield); the
dual-model setup is two runs differing only in ``channel_set``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from . import autograd as ag
from . import dataio, encoder, objective
from ._kernels import bilinear_gather
from .autograd import Tensor
from .dataio import DatasetManifest, EmbeddingTable
from .encoder import EncoderConfig, ModelParams
from .errors import ManifestError, TrainingDiverged, ValidationError
from .objective import CenterState, LossWeights, ViewTokens
from .seeding import TAG_EPOCH, TAG_VIEW, rng_for

CHANNEL_COUNTS = {dataio.FLUORESCENT: 5, dataio.BRIGHTFIELD: 3}


def lr_schedule(step: int, *, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValidationError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def ema_momentum_schedule(step: int, total_steps: int, start: float, end: float) -> float:
    """Cosine ramp of the teacher momentum from ``start`` to ``end``."""
    if total_steps <= 0:
        return end
    progress = min(max(step / total_steps, 0.0), 1.0)
    return end - (end - start) * 0.5 * (1.0 + np.cos(np.pi * progress))


def teacher_temp_schedule(step: int, warmup_steps: int, start: float, end: float) -> float:
    """Linear teacher-temperature ramp over the warmup, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return end
    return start + (end - start) * step / warmup_steps


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    local_agg_weight: float = 1.0
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    center_momentum: float = 0.9


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 5e-4
    warmup_epochs: int = 3
    weight_decay: float = 0.04
    ema_momentum: tuple[float, float] = (0.992, 0.999)
    seed: int = 0
    channel_set: str = dataio.FLUORESCENT
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    out_dir: str = "run"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (spreading term needs pairs)")
        if self.warmup_epochs > self.epochs:
            raise ValidationError("warmup_epochs must be <= epochs")
        if self.warmup_epochs < 0 or self.base_lr < 0 or self.weight_decay < 0:
            raise ValidationError("negative schedule values")
        lo, hi = self.ema_momentum
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValidationError("ema_momentum must satisfy 0 <= start <= end <= 1")
        if self.channel_set not in CHANNEL_COUNTS:
            raise ValidationError(f"channel_set must be one of {tuple(CHANNEL_COUNTS)}")
        if self.encoder.in_channels != CHANNEL_COUNTS[self.channel_set]:
            raise ValidationError(
                f"encoder.in_channels={self.encoder.in_channels} does not match "
                f"channel_set {self.channel_set!r}"
            )
        if self.augment.out_size != (self.encoder.image_size, self.encoder.image_size):
            raise ValidationError("augment.out_size must match encoder.image_size")
        if self.augment.patch_size != self.encoder.patch_size:
            raise ValidationError("augment.patch_size must match encoder.patch_size")
        self.encoder.validate()


def _dataclass_from_dict(cls, data: dict, path: str):
    """Flat dict -> dataclass with unknown-key checking (nested configs are
    converted by the caller before this runs)."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValidationError(f"unknown config keys at {path}: {sorted(unknown)}")
    return cls(**{name: data[name] for name in names if name in data})


def train_config_from_dict(data: dict) -> TrainConfig:
    """Build a TrainConfig from a plain (JSON) dict, filling derived fields.

    ``encoder.in_channels`` defaults from ``channel_set`` when omitted.
    """
    data = dict(data)
    nested = {
        "encoder": EncoderConfig,
        "loss": LossConfig,
    }
    kwargs: dict = {}
    channel_set = data.get("channel_set", dataio.FLUORESCENT)
    for name, cls in nested.items():
        if name in data:
            sub = dict(data.pop(name))
            if name == "encoder" and "in_channels" not in sub:
                sub["in_channels"] = CHANNEL_COUNTS.get(channel_set, 5)
            kwargs[name] = _dataclass_from_dict(cls, sub, name)
    if "augment" in data:
        sub = dict(data.pop("augment"))
        for inner, icls in (
            ("elastic", aug.ElasticConfig),
            ("jitter", aug.ColorJitterConfig),
            ("noise", aug.NoiseConfig),
        ):
            if inner in sub:
                sub[inner] = _dataclass_from_dict(icls, dict(sub[inner]), f"augment.{inner}")
        for tup in ("out_size", "crop_scale", "mask_ratio"):
            if tup in sub:
                sub[tup] = tuple(sub[tup])
        kwargs["augment"] = _dataclass_from_dict(aug.AugmentConfig, sub, "augment")
    if "ema_momentum" in data:
        data["ema_momentum"] = tuple(data["ema_momentum"])
    base = _dataclass_from_dict(TrainConfig, data, "train")
    cfg = dataclasses.replace(base, **kwargs)
    if "encoder" not in kwargs:
        cfg = dataclasses.replace(
            cfg,
            encoder=dataclasses.replace(
                cfg.encoder, in_channels=CHANNEL_COUNTS.get(channel_set, 5)
            ),
        )
    return cfg


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimiser.

    Weight decay applies only to tensors with 2+ dimensions (weights), not
    biases, norm scales or tokens, following common transformer practice.
    """

    def __init__(self, names, betas=(0.9, 0.999), eps=1e-8):
        self.names = list(names)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float,
        weight_decay: float,
    ) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if weight_decay > 0 and p.ndim >= 2:
                update += weight_decay * p
            p -= lr * update


@dataclass
class TrainState:
    student: ModelParams
    teacher: ModelParams
    center: CenterState
    optimizer: AdamW
    step: int = 0
    epoch: int = 0


def _num_workers() -> int:
    try:
        return max(0, int(os.environ.get("SSLPROF_NUM_WORKERS", "0")))
    except ValueError:
        return 0


class _ImageCache:
    def __init__(self, root: Path):
        self.root = root
        self._cache: dict[str, np.ndarray] = {}

    def pixels(self, rel_path: str) -> np.ndarray:
        arr = self._cache.get(rel_path)
        if arr is None:
            arr = dataio.read_image(self.root / rel_path).pixels
            self._cache[rel_path] = arr
        return arr


def _build_example(cache, wells, rec, kinds, cfg: TrainConfig, step: int, slot: int):
    rng = rng_for(cfg.seed, TAG_VIEW, step, slot)
    siblings = wells[rec.well_key()]
    anchor_pos = next(i for i, r in enumerate(siblings) if r.site_index == rec.site_index)
    sib_rec = siblings[aug.sample_sibling_index(len(siblings), anchor_pos, rng)]
    site_img = dataio.CellImage(pixels=cache.pixels(rec.image_path), channel_kinds=kinds)
    sib_img = dataio.CellImage(pixels=cache.pixels(sib_rec.image_path), channel_kinds=kinds)
    views = aug.make_views(
        site_img,
        sib_img,
        cfg.augment,
        rng,
        site_key=(rec.plate_id, rec.well_position, rec.site_index),
        sibling_key=(sib_rec.plate_id, sib_rec.well_position, sib_rec.site_index),
    )
    return views.v1.pixels, views.v2.pixels, views.v1_masked_tokens.ravel()


def train(manifest: DatasetManifest, cfg: TrainConfig, on_step=None) -> Path:
    """Run the full training loop; returns the last checkpoint path.

    Writes ``metrics.jsonl`` (one JSON object per optimisation step) and
    one checkpoint per epoch under ``cfg.out_dir``. Fully deterministic in
    (manifest, cfg): reruns produce byte-identical outputs.
    """
    cfg.validate()
    wells = dataio.group_sites(manifest, cfg.channel_set)
    if not wells:
        raise ManifestError([f"no records with channel_set {cfg.channel_set!r}"])
    for key, recs in wells.items():
        if len(recs) < 2:
            raise ManifestError([f"well {key} has {len(recs)} site(s); need >= 2"])
    records = [rec for recs in wells.values() for rec in recs]
    records.sort(key=lambda r: r.key())

    steps_per_epoch = len(records) // cfg.batch_size
    if steps_per_epoch < 1:
        raise ValidationError(
            f"batch_size {cfg.batch_size} exceeds the {len(records)} available sites"
        )
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs

    kinds = (cfg.channel_set,) * CHANNEL_COUNTS[cfg.channel_set]
    cache = _ImageCache(manifest.root)
    student = encoder.init_params(cfg.encoder, cfg.seed)
    teacher = student.copy()
    center = CenterState.zeros(cfg.encoder.n_prototypes)
    opt = AdamW(sorted(student.tensors))
    state = TrainState(student=student, teacher=teacher, center=center, optimizer=opt)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = _num_workers()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    b = cfg.batch_size
    n_patches = cfg.encoder.n_patches
    ckpt_path = out_dir / "checkpoint.cpck"
    try:
        with open(out_dir / "metrics.jsonl", "w") as metrics_file:
            for epoch in range(cfg.epochs):
                state.epoch = epoch
                order = rng_for(cfg.seed, TAG_EPOCH, epoch).permutation(len(records))
                for step_in_epoch in range(steps_per_epoch):
                    step = epoch * steps_per_epoch + step_in_epoch
                    batch_recs = [
                        records[i]
                        for i in order[step_in_epoch * b : (step_in_epoch + 1) * b]
                    ]
                    jobs = [
                        (cache, wells, rec, kinds, cfg, step, slot)
                        for slot, rec in enumerate(batch_recs)
                    ]
                    if pool is not None:
                        built = list(pool.map(lambda a: _build_example(*a), jobs))
                    else:
                        built = [_build_example(*a) for a in jobs]
                    v1 = np.stack([e[0] for e in built])
                    v2 = np.stack([e[1] for e in built])
                    mask = np.stack([e[2] for e in built])

                    lr = lr_schedule(
                        step,
                        base_lr=cfg.base_lr,
                        warmup_steps=warmup_steps,
                        total_steps=total_steps,
                    )
                    momentum = ema_momentum_schedule(
                        step, total_steps, cfg.ema_momentum[0], cfg.ema_momentum[1]
                    )
                    tau_t = teacher_temp_schedule(
                        step, warmup_steps, cfg.loss.tau_t_start, cfg.loss.tau_t_end
                    )
                    weights = LossWeights(
                        lambda1=cfg.loss.lambda1,
                        lambda2=cfg.loss.lambda2,
                        tau_s=cfg.loss.tau_s,
                        tau_t=tau_t,
                        center_momentum=cfg.loss.center_momentum,
                        local_agg_weight=cfg.loss.local_agg_weight,
                    )

                    try:
                        wrapped, components, teacher_out = _train_step(
                            state, cfg, v1, v2, mask, n_patches, weights
                        )
                    except ValidationError as exc:
                        if "non-finite" in str(exc):
                            raise TrainingDiverged(
                                f"non-finite activations at step {step}: {exc}"
                            ) from exc
                        raise
                    if not np.isfinite(components["total"]):
                        raise TrainingDiverged(
                            f"non-finite loss at step {step}: {components}"
                        )

                    grads = {
                        name: t.grad for name, t in wrapped.items() if t.grad is not None
                    }
                    opt.step(state.student.tensors, grads, lr, cfg.weight_decay)
                    encoder.ema_update(state.teacher, state.student, momentum)
                    masked_logits = teacher_out.patch_logits  # masked rows only
                    state.center = objective.update_center(
                        state.center,
                        teacher_out.cls_logits,
                        masked_logits if masked_logits.size else None,
                        weights.center_momentum,
                    )
                    state.step = step + 1

                    line = {
                        "step": step,
                        "epoch": epoch,
                        "lr": float(lr),
                        "ema_momentum": float(momentum),
                        "total": components["total"],
                        "dino": components["dino"],
                        "local_agg": components["local_agg"],
                        "ibot": components["ibot"],
                        "koleo": components["koleo"],
                    }
                    metrics_file.write(json.dumps(line, sort_keys=True) + "\n")
                    metrics_file.flush()
                    if on_step is not None:
                        on_step(state, components)

                ckpt_path = out_dir / f"checkpoint_epoch_{epoch + 1:03d}.cpck"
                _save_state(ckpt_path, state, cfg)
    finally:
        if pool is not None:
            pool.shutdown()
    return ckpt_path


def _train_step(state, cfg, v1, v2, mask, n_patches, weights):
    """One forward/backward; returns wrapped params, loss components, teacher out."""
    b = v1.shape[0]
    wrapped = {k: Tensor(v, requires_grad=True) for k, v in state.student.tensors.items()}

    images = np.concatenate([v1, v2, v1], axis=0)
    full_mask = np.zeros((3 * b, n_patches), dtype=bool)
    full_mask[:b] = mask
    cls_all, patches_all = encoder.forward_backbone(
        wrapped, cfg.encoder, images, full_mask
    )
    cls_logits_pair = encoder.instance_head(
        wrapped, ag.getitem(cls_all, (slice(0, 2 * b),))
    )
    # The patch head runs on masked positions only; the loss accepts the
    # pre-gathered rows (identical value to gathering after the head).
    b_idx, n_idx = np.nonzero(mask)
    student_masked = ViewTokens(
        cls_logits=ag.getitem(cls_logits_pair, (slice(0, b),)),
        patch_logits=encoder.patch_head(wrapped, ag.getitem(patches_all, (b_idx, n_idx))),
    )
    student_v2 = ViewTokens(
        cls_embed=ag.getitem(cls_all, (slice(b, 2 * b),)),
        cls_logits=ag.getitem(cls_logits_pair, (slice(b, 2 * b),)),
    )
    student_v1 = ViewTokens(cls_embed=ag.getitem(cls_all, (slice(2 * b, 3 * b),)))

    t_cls, t_patches = encoder.forward_backbone(
        state.teacher.tensors, cfg.encoder, v1, None
    )
    teacher_out = ViewTokens(
        cls_embed=t_cls.data,
        cls_logits=encoder.instance_head(state.teacher.tensors, t_cls).data,
        patch_logits=encoder.patch_head(
            state.teacher.tensors, Tensor(t_patches.data[b_idx, n_idx])
        ).data,
    )

    total, components = objective.total_loss(
        student_masked, student_v1, student_v2, teacher_out, mask, weights, state.center
    )
    total.backward()
    return wrapped, components, teacher_out


def _save_state(path: Path, state: TrainState, cfg: TrainConfig) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in state.student.tensors.items():
        tensors[f"student.{name}"] = arr
    for name, arr in state.teacher.tensors.items():
        tensors[f"teacher.{name}"] = arr
    tensors["center.instance"] = state.center.instance
    tensors["center.patch"] = state.center.patch
    encoder.save_checkpoint(
        path,
        tensors,
        cfg.encoder,
        step=state.step,
        extra={"channel_set": cfg.channel_set, "epoch": state.epoch + 1},
    )


@dataclass
class SiteEmbeddings:
    """Per-site CLS and mean-patch embeddings, kept as separate tables."""

    cls: EmbeddingTable
    patch_mean: EmbeddingTable


def center_crop_resize(pixels: np.ndarray, out_size: int) -> np.ndarray:
    """Deterministic inference preprocessing; identity for matching sizes."""
    h, w, _ = pixels.shape
    if h == w == out_size:
        return pixels
    side = min(h, w)
    r0 = (h - side) // 2
    c0 = (w - side) // 2
    rows = np.linspace(r0, r0 + side - 1, out_size)[:, None] * np.ones((1, out_size))
    cols = np.ones((out_size, 1)) * np.linspace(c0, c0 + side - 1, out_size)[None, :]
    return bilinear_gather(pixels, rows, cols).astype(np.float32)


def embed_dataset(
    checkpoint: str | Path | encoder.Checkpoint,
    manifest: DatasetManifest,
    channel_set: str | None = None,
    batch_size: int = 64,
) -> SiteEmbeddings:
    """Teacher-weight inference over every site; no augmentation.

    Returns one row per (plate, well, site), sorted by key, with the CLS
    token and the patch-token mean held in separate tables.
    """
    ckpt = (
        checkpoint
        if isinstance(checkpoint, encoder.Checkpoint)
        else encoder.load_checkpoint(checkpoint)
    )
    if channel_set is None:
        channel_set = ckpt.extra.get("channel_set")
        if channel_set is None:
            raise ValidationError("channel_set not in checkpoint; pass it explicitly")
    teacher = ckpt.model("teacher")
    cfg = teacher.config
    if cfg.in_channels != CHANNEL_COUNTS.get(channel_set):
        raise ValidationError(
            f"checkpoint expects {cfg.in_channels} channels; "
            f"channel_set {channel_set!r} provides {CHANNEL_COUNTS.get(channel_set)}"
        )

    records = sorted(
        (r for r in manifest.records if r.channel_set == channel_set),
        key=lambda r: r.key(),
    )
    if not records:
        raise ValidationError(f"manifest has no {channel_set!r} records")

    keys = []
    cls_rows = []
    patch_rows = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = np.stack(
            [
                center_crop_resize(
                    dataio.read_image(manifest.root / r.image_path).pixels,
                    cfg.image_size,
                )
                for r in chunk
            ]
        )
        cls, patches = encoder.forward_backbone(teacher.tensors, cfg, images, None)
        cls_rows.append(cls.data.astype(np.float32))
        patch_rows.append(
            patches.data.mean(axis=1, dtype=np.float64).astype(np.float32)
        )
        keys.extend((r.plate_id, r.well_position, r.site_index) for r in chunk)

    cls_table = EmbeddingTable(keys=list(keys), vectors=np.concatenate(cls_rows), level="site")
    patch_table = EmbeddingTable(
        keys=list(keys), vectors=np.concatenate(patch_rows), level="site"
    )
    cls_table.validate()
    patch_table.validate()
    return SiteEmbeddings(cls=cls_table, patch_mean=patch_table)
