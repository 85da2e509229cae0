"""Full vision-language model: encoders, projections, attention stack, checkpoints."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn

from .attention import AttentionFeatures, AttentionStack, flatten_patch_grid
from .corpus import CLS_ID, PAD_ID, CorpusMeta
from .encoders import DTYPE, ImageEncoder, TextEncoder, images_to_tensor, uniform_init_

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for corrupt or version-incompatible checkpoint files."""


@dataclass
class ModelConfig:
    """Shapes and wiring switches for the full model."""

    vocab_size: int
    image_size: int = 64
    patch_size: int = 8
    patch_channels: int = 16
    patch_hidden: int = 32
    token_dim: int = 32
    joint_dim: int = 32
    num_heads: int = 4
    num_blocks: int = 3
    max_report_len: int = 24
    cross_residual: str = "raw"
    triplet_feature: str = "cross"

    @classmethod
    def for_meta(cls, meta: CorpusMeta, **overrides) -> "ModelConfig":
        kwargs = dict(
            vocab_size=len(meta.vocab),
            image_size=meta.layout.image_size[0],
            max_report_len=meta.max_report_len,
        )
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class PairFeatures:
    """Batched forward-pass outputs for paired (image, report) inputs."""

    patch_grid: torch.Tensor       # (B, channels, grid, grid)
    projected_patches: torch.Tensor  # (B, joint_dim, grid, grid)
    global_image: torch.Tensor     # (B, joint_dim)
    token_states: torch.Tensor     # (B, L, token_dim)
    global_text: torch.Tensor      # (B, joint_dim) projected [CLS]
    attn: AttentionFeatures        # cls_weights already zeroed on [PAD], renormalized


class VisionLanguageModel(nn.Module):
    """Paired image/text encoders with joint projections and the attention stack."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.triplet_feature not in ("cross", "self"):
            raise ValueError(f"unknown triplet_feature '{config.triplet_feature}'")
        self.config = config
        self.image_encoder = ImageEncoder(config.image_size, config.patch_size,
                                          config.patch_hidden, config.patch_channels)
        self.text_encoder = TextEncoder(config.vocab_size, config.max_report_len,
                                        config.token_dim)
        self.patch_proj = nn.Linear(config.patch_channels, config.joint_dim,
                                    bias=False, dtype=DTYPE)
        self.cls_proj = nn.Linear(config.token_dim, config.joint_dim,
                                  bias=False, dtype=DTYPE)
        self.attention = AttentionStack(config.token_dim, config.patch_channels,
                                        config.joint_dim, config.num_heads,
                                        config.num_blocks, config.cross_residual)

    def init_weights(self, seed: int) -> "VisionLanguageModel":
        """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init of every parameter."""
        generator = torch.Generator().manual_seed(seed)
        self.image_encoder.reset_parameters(generator)
        self.text_encoder.reset_parameters(generator)
        uniform_init_(self.patch_proj.weight, self.patch_proj.in_features, generator)
        uniform_init_(self.cls_proj.weight, self.cls_proj.in_features, generator)
        self.attention.reset_parameters(generator)
        return self

    def encoder_parameters(self):
        """Image/text encoders plus the pre-attention projection heads."""
        yield from self.image_encoder.parameters()
        yield from self.text_encoder.parameters()
        yield from self.patch_proj.parameters()
        yield from self.cls_proj.parameters()

    def attention_parameters(self):
        yield from self.attention.parameters()

    def forward(self, images: torch.Tensor, token_ids: torch.Tensor) -> PairFeatures:
        """images (B, 1, H, W), token_ids (B, L) -> all pair representations."""
        f_p = self.image_encoder(images)
        b, c, gh, gw = f_p.shape
        patches = flatten_patch_grid(f_p)
        f_p_hat = self.patch_proj(patches).reshape(b, gh, gw, -1).permute(0, 3, 1, 2)
        f_g_hat = f_p_hat.mean(dim=(2, 3))
        t = self.text_encoder(token_ids)
        t_c_hat = self.cls_proj(t[:, 0])
        attn = self.attention(t, patches)
        w = mask_pad_weights(attn.cls_weights, token_ids)
        attn = AttentionFeatures(
            self_attended=attn.self_attended,
            cross_attended=attn.cross_attended,
            self_joint=attn.self_joint,
            cross_joint=attn.cross_joint,
            cls_weights=w,
        )
        return PairFeatures(patch_grid=f_p, projected_patches=f_p_hat,
                            global_image=f_g_hat, token_states=t,
                            global_text=t_c_hat, attn=attn)

    def forward_samples(self, samples: Sequence, pad_to: int | None = None) -> PairFeatures:
        """Convenience wrapper over corpus samples; reports padded to a common length."""
        images = images_to_tensor([s.image for s in samples])
        tokens = pad_reports([s.report for s in samples], pad_to or self.config.max_report_len)
        return self(images, tokens)


def mask_pad_weights(weights: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
    """Zero the [CLS] weighting on [PAD] positions and renormalize rows to sum 1."""
    mask = (token_ids[..., 1:] != PAD_ID).to(weights.dtype)
    w = weights * mask
    return w / w.sum(dim=-1, keepdim=True)


def pad_reports(reports: Sequence[Sequence[int]], length: int) -> torch.Tensor:
    """Stack variable-length reports into (B, length) with [PAD] fill."""
    longest = max(len(r) for r in reports)
    if longest > length:
        raise ValueError(f"report of length {longest} exceeds pad length {length}")
    out = torch.full((len(reports), length), PAD_ID, dtype=torch.int64)
    for i, r in enumerate(reports):
        if not r or r[0] != CLS_ID:
            raise ValueError("report must start with [CLS]")
        out[i, :len(r)] = torch.as_tensor(list(r), dtype=torch.int64)
    return out


def build_model(meta: CorpusMeta, seed: int, **overrides) -> VisionLanguageModel:
    return VisionLanguageModel(ModelConfig.for_meta(meta, **overrides)).init_weights(seed)


def save_checkpoint(model: VisionLanguageModel, path) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state": model.state_dict(),
    }, path)


def load_checkpoint(path) -> VisionLanguageModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint '{path}': {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"corrupt checkpoint '{path}': missing header")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['format_version']} != supported {CHECKPOINT_VERSION}")
    model = VisionLanguageModel(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    return model
