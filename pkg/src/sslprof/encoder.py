"""Small vision-transformer backbone with instance- and patch-level
projection heads, parameter handling, EMA teacher updates, and the
checkpoint format.

The forward pass has no dropout or stochastic depth: encoding is fully
deterministic, which keeps gradient checks and byte-level reproducibility
simple at this scale.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dataio import BRIGHTFIELD, FLUORESCENT, CellImage
from .errors import FormatError, ValidationError
from .seeding import TAG_INIT, rng_for

CHECKPOINT_MAGIC = b"CPCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 48
    patch_size: int = 8
    in_channels: int = 5
    embed_dim: int = 64
    depth: int = 3
    n_heads: int = 2
    ffn_type: str = "swiglu"  # "swiglu" | "mlp"
    n_prototypes: int = 512
    head_hidden_dim: int = 192
    head_bottleneck_dim: int = 48

    def validate(self) -> None:
        if self.image_size < 16:
            raise ValidationError("image_size must be >= 16")
        if self.image_size % self.patch_size != 0:
            raise ValidationError("image_size must be divisible by patch_size")
        if self.embed_dim % self.n_heads != 0:
            raise ValidationError("embed_dim must be divisible by n_heads")
        if self.ffn_type not in ("swiglu", "mlp"):
            raise ValidationError(f"unknown ffn_type {self.ffn_type!r}")
        for name in (
            "image_size",
            "patch_size",
            "in_channels",
            "embed_dim",
            "depth",
            "n_heads",
            "n_prototypes",
            "head_hidden_dim",
            "head_bottleneck_dim",
        ):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def ffn_hidden(self) -> int:
        if self.ffn_type == "swiglu":
            return max(8, int(round(self.embed_dim * 8 / 3 / 8)) * 8)
        return 4 * self.embed_dim


@dataclass
class ModelParams:
    """Named learnable tensors plus the config they belong to."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )


@dataclass(frozen=True)
class TokenOutputs:
    cls: np.ndarray  # (embed_dim,)
    patches: np.ndarray  # (n_patches, embed_dim)
    cls_logits: np.ndarray  # (n_prototypes,)
    patch_logits: np.ndarray  # (n_patches, n_prototypes)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_params(cfg: EncoderConfig, seed: int) -> ModelParams:
    """Deterministic initialization: truncated-normal weights, zero biases."""
    cfg.validate()
    rng = rng_for(seed, TAG_INIT)
    d = cfg.embed_dim
    t: dict[str, np.ndarray] = {}

    def w(name, shape):
        t[name] = _trunc_normal(rng, shape)

    def b(name, size):
        t[name] = np.zeros(size, dtype=np.float32)

    w("patch_embed.w", (cfg.patch_size * cfg.patch_size * cfg.in_channels, d))
    b("patch_embed.b", d)
    w("cls_token", (1, 1, d))
    w("pos_embed", (1, cfg.n_patches + 1, d))
    w("mask_token", (d,))

    for i in range(cfg.depth):
        p = f"blocks.{i}"
        t[f"{p}.ln1.g"] = np.ones(d, dtype=np.float32)
        b(f"{p}.ln1.b", d)
        w(f"{p}.attn.qkv.w", (d, 3 * d))
        b(f"{p}.attn.qkv.b", 3 * d)
        w(f"{p}.attn.proj.w", (d, d))
        b(f"{p}.attn.proj.b", d)
        t[f"{p}.ln2.g"] = np.ones(d, dtype=np.float32)
        b(f"{p}.ln2.b", d)
        hidden = cfg.ffn_hidden
        if cfg.ffn_type == "swiglu":
            w(f"{p}.ffn.w1.w", (d, hidden))
            b(f"{p}.ffn.w1.b", hidden)
            w(f"{p}.ffn.w2.w", (d, hidden))
            b(f"{p}.ffn.w2.b", hidden)
            w(f"{p}.ffn.w3.w", (hidden, d))
            b(f"{p}.ffn.w3.b", d)
        else:
            w(f"{p}.ffn.fc1.w", (d, hidden))
            b(f"{p}.ffn.fc1.b", hidden)
            w(f"{p}.ffn.fc2.w", (hidden, d))
            b(f"{p}.ffn.fc2.b", d)

    t["norm.g"] = np.ones(d, dtype=np.float32)
    b("norm.b", d)

    for head in ("head_inst", "head_patch"):
        w(f"{head}.fc1.w", (d, cfg.head_hidden_dim))
        b(f"{head}.fc1.b", cfg.head_hidden_dim)
        w(f"{head}.fc2.w", (cfg.head_hidden_dim, cfg.head_bottleneck_dim))
        b(f"{head}.fc2.b", cfg.head_bottleneck_dim)
        w(f"{head}.proto.w", (cfg.head_bottleneck_dim, cfg.n_prototypes))

    return ModelParams(config=cfg, tensors=t)


def _wrap(tensors: dict[str, np.ndarray] | dict[str, Tensor]):
    return {k: ag.as_tensor(v) for k, v in tensors.items()}


def _extract_patches(images: Tensor, cfg: EncoderConfig) -> Tensor:
    b = images.shape[0]
    g, p, c = cfg.grid, cfg.patch_size, cfg.in_channels
    x = ag.reshape(images, (b, g, p, g, p, c))
    x = ag.transpose(x, (0, 1, 3, 2, 4, 5))
    return ag.reshape(x, (b, g * g, p * p * c))


def forward_backbone(
    tensors,
    cfg: EncoderConfig,
    images: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """ViT forward over a batch; returns (cls (B, D), patches (B, N, D)).

    ``images`` is (B, H, W, C). When ``mask`` (B, N) is given, masked patch
    embeddings are replaced by the learned mask token before the blocks.
    """
    t = _wrap(tensors)
    b = images.shape[0]
    if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ValidationError(
            f"image batch shape {images.shape[1:]} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.in_channels})"
        )
    d, n, h = cfg.embed_dim, cfg.n_patches, cfg.n_heads
    hd = d // h

    x = _extract_patches(Tensor(images), cfg)
    x = ag.add(ag.matmul(x, t["patch_embed.w"]), t["patch_embed.b"])

    if mask is not None and mask.any():
        if mask.shape != (b, n):
            raise ValidationError(f"mask shape {mask.shape}, expected {(b, n)}")
        m = mask.astype(images.dtype)[:, :, None]
        x = ag.add(ag.mul(x, 1.0 - m), ag.mul(t["mask_token"], m))

    cls = ag.add(Tensor(np.zeros((b, 1, d), dtype=images.dtype)), t["cls_token"])
    x = ag.concat([cls, x], axis=1)
    x = ag.add(x, t["pos_embed"])

    scale = 1.0 / math.sqrt(hd)
    tokens = n + 1

    def split_heads(z):
        return ag.transpose(ag.reshape(z, (b, tokens, h, hd)), (0, 2, 1, 3))

    for i in range(cfg.depth):
        p = f"blocks.{i}"
        y = ag.layernorm(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"])
        # Project q/k/v through slices of the fused weight; keeps the
        # parameter layout while avoiding a (B, T, 3D) intermediate.
        qkv_w, qkv_b = t[f"{p}.attn.qkv.w"], t[f"{p}.attn.qkv.b"]
        q, k, v = (
            split_heads(
                ag.add(
                    ag.matmul(y, ag.getitem(qkv_w, (slice(None), slice(j * d, (j + 1) * d)))),
                    ag.getitem(qkv_b, (slice(j * d, (j + 1) * d),)),
                )
            )
            for j in range(3)
        )
        att = ag.softmax(ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), scale))
        out = ag.matmul(att, v)  # (B, h, T, hd)
        out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, tokens, d))
        out = ag.add(ag.matmul(out, t[f"{p}.attn.proj.w"]), t[f"{p}.attn.proj.b"])
        x = ag.add(x, out)

        y = ag.layernorm(x, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
        if cfg.ffn_type == "swiglu":
            gate = ag.silu(ag.add(ag.matmul(y, t[f"{p}.ffn.w1.w"]), t[f"{p}.ffn.w1.b"]))
            lin = ag.add(ag.matmul(y, t[f"{p}.ffn.w2.w"]), t[f"{p}.ffn.w2.b"])
            y = ag.add(ag.matmul(ag.mul(gate, lin), t[f"{p}.ffn.w3.w"]), t[f"{p}.ffn.w3.b"])
        else:
            y = ag.gelu(ag.add(ag.matmul(y, t[f"{p}.ffn.fc1.w"]), t[f"{p}.ffn.fc1.b"]))
            y = ag.add(ag.matmul(y, t[f"{p}.ffn.fc2.w"]), t[f"{p}.ffn.fc2.b"])
        x = ag.add(x, y)

    x = ag.layernorm(x, t["norm.g"], t["norm.b"])
    cls_out = ag.getitem(x, (slice(None), 0))
    patches_out = ag.getitem(x, (slice(None), slice(1, None)))
    return cls_out, patches_out


def projection_head(tensors, name: str, x: Tensor) -> Tensor:
    """MLP to a bottleneck, L2-normalised, projected onto prototypes."""
    t = _wrap(tensors)
    y = ag.gelu(ag.add(ag.matmul(x, t[f"{name}.fc1.w"]), t[f"{name}.fc1.b"]))
    y = ag.add(ag.matmul(y, t[f"{name}.fc2.w"]), t[f"{name}.fc2.b"])
    y = ag.l2_normalize(y)
    return ag.matmul(y, t[f"{name}.proto.w"])


def instance_head(tensors, cls: Tensor) -> Tensor:
    return projection_head(tensors, "head_inst", cls)


def patch_head(tensors, patches: Tensor) -> Tensor:
    return projection_head(tensors, "head_patch", patches)


def encode_batch(
    params: ModelParams,
    images: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inference forward: (cls, patches, cls_logits, patch_logits) as arrays."""
    cls, patches = forward_backbone(params.tensors, params.config, images, mask)
    cls_logits = instance_head(params.tensors, cls)
    patch_logits = patch_head(params.tensors, patches)
    return cls.data, patches.data, cls_logits.data, patch_logits.data


def encode(
    params: ModelParams, image: CellImage, mask: np.ndarray | None = None
) -> TokenOutputs:
    """Encode a single image into CLS/patch tokens and prototype logits."""
    image.validate()
    cfg = params.config
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(1, -1)
        if mask.shape[1] != cfg.n_patches:
            raise ValidationError(
                f"mask has {mask.shape[1]} entries for {cfg.n_patches} patches"
            )
    cls, patches, cls_logits, patch_logits = encode_batch(
        params, image.pixels[None], mask
    )
    return TokenOutputs(
        cls=cls[0], patches=patches[0], cls_logits=cls_logits[0], patch_logits=patch_logits[0]
    )


def ema_update(teacher: ModelParams, student: ModelParams, momentum: float) -> ModelParams:
    """teacher <- momentum * teacher + (1 - momentum) * student, in place."""
    if teacher.tensors.keys() != student.tensors.keys():
        raise ValidationError("teacher/student parameter names differ")
    if not 0.0 <= momentum <= 1.0:
        raise ValidationError("momentum must be in [0, 1]")
    for name, tv in teacher.tensors.items():
        sv = student.tensors[name]
        if tv.shape != sv.shape:
            raise ValidationError(f"shape mismatch for {name}")
        tv *= momentum
        tv += (1.0 - momentum) * sv
    return teacher


def split_channels(image: CellImage) -> tuple[CellImage, CellImage]:
    """Split an 8-channel image into its fluorescent and brightfield parts."""
    image.validate()
    kinds = image.channel_kinds
    if len(kinds) != 8 or kinds[:5] != (FLUORESCENT,) * 5 or kinds[5:] != (BRIGHTFIELD,) * 3:
        raise ValidationError(
            f"expected 5 fluorescent followed by 3 brightfield channels, got {kinds}"
        )
    fluor = CellImage(
        pixels=np.ascontiguousarray(image.pixels[:, :, :5]), channel_kinds=kinds[:5]
    )
    bright = CellImage(
        pixels=np.ascontiguousarray(image.pixels[:, :, 5:]), channel_kinds=kinds[5:]
    )
    return fluor, bright


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    encoder_config: EncoderConfig
    step: int
    extra: dict

    def model(self, prefix: str) -> ModelParams:
        sel = {
            k[len(prefix) + 1 :]: v
            for k, v in self.tensors.items()
            if k.startswith(prefix + ".")
        }
        if not sel:
            raise FormatError(f"checkpoint has no tensors under {prefix!r}")
        return ModelParams(config=self.encoder_config, tensors=sel)


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    encoder_config: EncoderConfig,
    step: int,
    extra: dict | None = None,
) -> None:
    """Named float32 tensors plus a JSON sidecar with config and step."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))
    sidecar = {
        "encoder_config": asdict(encoder_config),
        "step": int(step),
        "extra": extra or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", raw[offset : offset + 4])
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack("<I", raw[offset : offset + 4])
        offset += 4
        shape = struct.unpack(f"<{ndim}I", raw[offset : offset + 4 * ndim])
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
        offset += size * 4
        tensors[name] = arr.reshape(shape).copy()
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")

    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise FormatError(f"{path}: missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    cfg = EncoderConfig(**sidecar["encoder_config"])
    return Checkpoint(
        tensors=tensors,
        encoder_config=cfg,
        step=int(sidecar["step"]),
        extra=sidecar.get("extra", {}),
    )
