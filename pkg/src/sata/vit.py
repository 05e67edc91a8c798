"""Small ViT backbone: patch embedding, class token, pre-norm blocks, linear head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, MhsaParams, mhsa_forward
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DataError
from .suppression import SataConfig

CHECKPOINT_FORMAT = "sata-vit-checkpoint"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    """Model geometry. ``attention`` is derived from ``embed_dim``/``num_heads`` when omitted."""

    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 192
    depth: int = 9
    num_heads: int = 12
    mlp_ratio: float = 2.0
    num_classes: int = 100
    attention: AttentionConfig | None = None
    sata: SataConfig | None = field(default_factory=SataConfig)
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.depth < 0 or self.num_classes < 1 or self.embed_dim < 1:
            raise ConfigError("depth must be >= 0 and embed_dim, num_classes >= 1")
        if self.attention is None:
            object.__setattr__(self, "attention", AttentionConfig.for_embed_dim(self.embed_dim, self.num_heads))
        elif self.attention.embed_dim != self.embed_dim or self.attention.num_heads != self.num_heads:
            raise ConfigError(
                f"attention config ({self.attention.num_heads} x {self.attention.head_dim}) "
                f"does not match embed_dim {self.embed_dim} / num_heads {self.num_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        d = dict(d)
        att = d.pop("attention", None)
        sata = d.pop("sata", None)
        return cls(
            **d,
            attention=AttentionConfig(**att) if att else None,
            sata=SataConfig(**sata) if sata else None,
        )


@dataclass
class Block:
    norm1_gain: Tensor
    norm1_bias: Tensor
    attn: MhsaParams
    norm2_gain: Tensor
    norm2_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        out = {"norm1.gain": self.norm1_gain, "norm1.bias": self.norm1_bias}
        out.update({f"attn.{k}": v for k, v in self.attn.tensors().items()})
        out.update({
            "norm2.gain": self.norm2_gain,
            "norm2.bias": self.norm2_bias,
            "mlp.fc1.weight": self.fc1_weight,
            "mlp.fc1.bias": self.fc1_bias,
            "mlp.fc2.weight": self.fc2_weight,
            "mlp.fc2.bias": self.fc2_bias,
        })
        return out


def _param(x) -> Tensor:
    return Tensor(x, requires_grad=True)


@dataclass
class ModelState:
    cfg: ViTConfig
    patch_weight: Tensor
    patch_bias: Tensor
    pos_embed: Tensor
    cls_token: Tensor
    blocks: list[Block]
    norm_gain: Tensor
    norm_bias: Tensor
    head_weight: Tensor
    head_bias: Tensor

    @classmethod
    def initialize(cls, cfg: ViTConfig, seed: int = 0) -> "ModelState":
        rng = np.random.default_rng(seed)
        std = cfg.init_std
        d, h = cfg.embed_dim, cfg.hidden_dim
        blocks = []
        patch_weight = _param(rng.normal(0.0, std, (cfg.patch_dim, d)))
        pos_embed = _param(rng.normal(0.0, std, (cfg.num_tokens, d)))
        cls_token = _param(rng.normal(0.0, std, (d,)))
        for _ in range(cfg.depth):
            attn = MhsaParams.initialize(d, cfg.attention, rng, std=std, sata=cfg.sata)
            blocks.append(Block(
                norm1_gain=_param(np.ones(d)),
                norm1_bias=_param(np.zeros(d)),
                attn=attn,
                norm2_gain=_param(np.ones(d)),
                norm2_bias=_param(np.zeros(d)),
                fc1_weight=_param(rng.normal(0.0, std, (d, h))),
                fc1_bias=_param(np.zeros(h)),
                fc2_weight=_param(rng.normal(0.0, std, (h, d))),
                fc2_bias=_param(np.zeros(d)),
            ))
        return cls(
            cfg=cfg,
            patch_weight=patch_weight,
            patch_bias=_param(np.zeros(d)),
            pos_embed=pos_embed,
            cls_token=cls_token,
            blocks=blocks,
            norm_gain=_param(np.ones(d)),
            norm_bias=_param(np.zeros(d)),
            head_weight=_param(rng.normal(0.0, std, (d, cfg.num_classes))),
            head_bias=_param(np.zeros(cfg.num_classes)),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out = {
            "patch_embed.weight": self.patch_weight,
            "patch_embed.bias": self.patch_bias,
            "pos_embed": self.pos_embed,
            "cls_token": self.cls_token,
        }
        for i, block in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in block.tensors().items()})
        out.update({
            "norm.gain": self.norm_gain,
            "norm.bias": self.norm_bias,
            "head.weight": self.head_weight,
            "head.bias": self.head_bias,
        })
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def scales(self) -> list[Tensor]:
        return [b.attn.sata_scale for b in self.blocks if b.attn.sata_scale is not None]

    def s_values(self) -> list[float]:
        return [float(s.data) for s in self.scales()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, batch, trace: list | None = None) -> Tensor:
        return vit_forward(batch, self, self.cfg, trace=trace)

    # -- checkpoint ------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": self.cfg.to_dict()}
        arrays = {name: t.data for name, t in self.named_parameters().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ModelState":
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as archive:
                meta = json.loads(str(archive["__meta__"]))
                arrays = {k: archive[k] for k in archive.files if k != "__meta__"}
        except (OSError, KeyError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT}")
        try:
            cfg = ViTConfig.from_dict(meta["config"])
        except (TypeError, ConfigError) as exc:
            raise CheckpointError(f"bad config in {path}: {exc}") from None
        state = cls.initialize(cfg, seed=0)
        state.load_arrays(arrays)
        return state

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {t.shape}")
            t.data[...] = arrays[name]

    def copy(self) -> "ModelState":
        other = ModelState.initialize(self.cfg, seed=0)
        other.load_arrays({k: v.data for k, v in self.named_parameters().items()})
        return other


def _patchify(images: Tensor, cfg: ViTConfig) -> Tensor:
    b = images.shape[0]
    p, g, c = cfg.patch_size, cfg.grid, cfg.in_channels
    x = images.reshape(b, c, g, p, g, p)
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))  # B, gy, gx, C, p, p
    return x.reshape(b, g * g, c * p * p)


def patch_embed(image, state: ModelState, cfg: ViTConfig | None = None) -> Tensor:
    """Tokens for one image (C x H x W) or a batch (B x C x H x W): class token first, then patches."""
    cfg = cfg or state.cfg
    image = ad.as_tensor(image)
    single = image.ndim == 3
    if single:
        image = image.reshape((1,) + image.shape)
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if image.ndim != 4 or image.shape[1:] != expected:
        raise DataError(f"expected images of shape {expected}, got {image.shape[1:] if image.ndim == 4 else image.shape}")
    b = image.shape[0]
    patches = _patchify(image, cfg)
    tokens = ad.linear(patches, state.patch_weight, state.patch_bias)
    cls = ad.add(state.cls_token.reshape(1, 1, cfg.embed_dim), np.zeros((b, 1, cfg.embed_dim)))
    z = ad.concat([cls, tokens], axis=1) + state.pos_embed
    return z[0] if single else z


def _mlp(x: Tensor, block: Block) -> Tensor:
    h = ad.gelu(ad.linear(x, block.fc1_weight, block.fc1_bias))
    return ad.linear(h, block.fc2_weight, block.fc2_bias)


def vit_forward(batch, state: ModelState, cfg: ViTConfig | None = None, trace: list | None = None) -> Tensor:
    """Logits (B x num_classes) for a batch of images."""
    cfg = cfg or state.cfg
    z = patch_embed(batch, state, cfg)
    if z.ndim == 2:
        z = z.reshape((1,) + z.shape)
    for block in state.blocks:
        h = ad.layer_norm(z, block.norm1_gain, block.norm1_bias, LN_EPS)
        z = z + mhsa_forward(h, block.attn, cfg.attention, cfg.sata, trace=trace)
        h = ad.layer_norm(z, block.norm2_gain, block.norm2_bias, LN_EPS)
        z = z + _mlp(h, block)
    z = ad.layer_norm(z, state.norm_gain, state.norm_bias, LN_EPS)
    cls = z[:, 0, :]
    return ad.linear(cls, state.head_weight, state.head_bias)


def param_count(cfg: ViTConfig) -> int:
    """Exact number of learnable scalars for ``cfg``."""
    d, h = cfg.embed_dim, cfg.hidden_dim
    inner = cfg.attention.embed_dim
    total = cfg.patch_dim * d + d  # patch projection
    total += cfg.num_tokens * d + d  # positional embedding, class token
    per_block = 2 * d  # norm1
    per_block += d * 3 * inner + inner * d + d  # qkv (no bias), output projection
    per_block += 2 * d  # norm2
    per_block += d * h + h + h * d + d  # mlp
    if cfg.attention.lsa_learnable_temperature:
        per_block += 1
    if cfg.sata is not None and cfg.sata.learnable_s:
        per_block += 1
    total += cfg.depth * per_block
    total += 2 * d  # final norm
    total += d * cfg.num_classes + cfg.num_classes
    return total


def default_config(**overrides) -> ViTConfig:
    """Desk-default ViT (depth 9, D 192, 12 heads, MLP ratio 2) for 32x32 / patch 4 inputs."""
    return ViTConfig(**overrides)
