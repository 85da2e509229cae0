"""Toy differentiable image and text encoders with joint-space projection heads.

The image encoder maps a grayscale image to a grid of patch embeddings through a
strictly patch-local two-layer stack (each patch sees only its own pixels before
projection). The text encoder embeds token ids with learned positional offsets
and a position-wise mixing layer. Projections are bias-free linear maps into the
shared joint space; the global image embedding is the spatial mean of the
projected patch grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64


def uniform_init_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


@dataclass
class ImageFeatures:
    """Per-sample image representations: raw patch grid, projected grid, pooled global."""

    patch_grid: torch.Tensor       # (channels, grid_h, grid_w)
    projected_patches: torch.Tensor  # (joint_dim, grid_h, grid_w)
    pooled: torch.Tensor           # (joint_dim,) spatial mean of projected_patches


@dataclass
class TokenFeatures:
    """Per-sample text representations; row 0 is the [CLS] token."""

    tokens: torch.Tensor        # (seq_len, token_dim)
    cls: torch.Tensor           # (token_dim,), identically tokens[0]
    projected_cls: torch.Tensor  # (joint_dim,)


class ImageEncoder(nn.Module):
    """Non-overlapping patch embedding: patchify conv, tanh, then 1x1 mixing conv."""

    def __init__(self, image_size: int, patch_size: int, hidden_dim: int, out_dim: int):
        super().__init__()
        if image_size % patch_size != 0:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.patchify = nn.Conv2d(1, hidden_dim, kernel_size=patch_size,
                                  stride=patch_size, dtype=DTYPE)
        self.mix = nn.Conv2d(hidden_dim, out_dim, kernel_size=1, dtype=DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan1 = self.patch_size * self.patch_size
        uniform_init_(self.patchify.weight, fan1, generator)
        uniform_init_(self.patchify.bias, fan1, generator)
        fan2 = self.patchify.out_channels
        uniform_init_(self.mix.weight, fan2, generator)
        uniform_init_(self.mix.bias, fan2, generator)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(batch, 1, H, W) -> (batch, channels, grid, grid)."""
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape[-2:])}")
        return self.mix(torch.tanh(self.patchify(images)))


class TextEncoder(nn.Module):
    """Token embeddings plus positional offsets and one mixing layer.

    Each output row combines its own embedded token (with positional offset)
    and a position-free bag-of-tokens summary of the whole sequence. The
    summary term makes the leading [CLS] row a function of the report content
    while keeping token swaps local: exchanging two tokens leaves the bag
    unchanged, so only the swapped rows move.
    """

    def __init__(self, vocab_size: int, max_len: int, token_dim: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embedding = nn.Parameter(torch.empty(vocab_size, token_dim, dtype=DTYPE))
        self.positional = nn.Parameter(torch.empty(max_len, token_dim, dtype=DTYPE))
        self.mix = nn.Linear(token_dim, token_dim, dtype=DTYPE)
        self.context = nn.Linear(token_dim, token_dim, bias=False, dtype=DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        dim = self.embedding.shape[1]
        uniform_init_(self.embedding, dim, generator)
        uniform_init_(self.positional, dim, generator)
        uniform_init_(self.mix.weight, dim, generator)
        uniform_init_(self.mix.bias, dim, generator)
        uniform_init_(self.context.weight, dim, generator)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(batch, seq_len) int64 -> (batch, seq_len, token_dim)."""
        if token_ids.numel() == 0:
            raise ValueError("empty token sequence")
        if token_ids.min() < 0 or token_ids.max() >= self.vocab_size:
            bad = int(token_ids.min()) if token_ids.min() < 0 else int(token_ids.max())
            raise ValueError(f"token id {bad} outside vocabulary of size {self.vocab_size}")
        seq_len = token_ids.shape[-1]
        if seq_len > self.max_len:
            raise ValueError(f"sequence length {seq_len} exceeds max length {self.max_len}")
        embedded = self.embedding[token_ids]
        h = embedded + self.positional[:seq_len]
        bag = embedded.mean(dim=-2, keepdim=True)
        return torch.tanh(self.mix(h) + self.context(bag))


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W) array -> (1, 1, H, W) float64 tensor."""
    return torch.as_tensor(np.asarray(image), dtype=DTYPE).unsqueeze(0).unsqueeze(0)


def images_to_tensor(images) -> torch.Tensor:
    """List of (H, W) arrays -> (batch, 1, H, W) float64 tensor."""
    return torch.stack([torch.as_tensor(np.asarray(im), dtype=DTYPE) for im in images]).unsqueeze(1)


def encode_image(model, image) -> ImageFeatures:
    """Full per-sample image pipeline: patch grid, projection, pooled global embedding."""
    images = image_to_tensor(image) if not torch.is_tensor(image) else image.reshape(
        1, 1, *image.shape[-2:]).to(DTYPE)
    f_p = model.image_encoder(images)[0]
    f_p_hat = project_patches(model, f_p)
    return ImageFeatures(patch_grid=f_p, projected_patches=f_p_hat,
                         pooled=f_p_hat.mean(dim=(1, 2)))


def project_patches(model, patch_grid: torch.Tensor) -> torch.Tensor:
    """(channels, h, w) -> (joint_dim, h, w) through the bias-free patch projector."""
    c, h, w = patch_grid.shape
    flat = patch_grid.permute(1, 2, 0).reshape(h * w, c)
    return model.patch_proj(flat).reshape(h, w, -1).permute(2, 0, 1)


def encode_text(model, report) -> TokenFeatures:
    """Per-sample text pipeline: token rows, [CLS] row, projected [CLS]."""
    ids = torch.as_tensor(report, dtype=torch.int64).reshape(1, -1)
    if ids.shape[1] < 2:
        raise ValueError("report must contain [CLS] plus at least one token")
    t = model.text_encoder(ids)[0]
    cls = t[0]
    return TokenFeatures(tokens=t, cls=cls, projected_cls=model.cls_proj(cls))


def project(model, features):
    """Recompute joint-space projections for ImageFeatures or TokenFeatures."""
    if isinstance(features, ImageFeatures):
        f_p_hat = project_patches(model, features.patch_grid)
        return ImageFeatures(patch_grid=features.patch_grid, projected_patches=f_p_hat,
                             pooled=f_p_hat.mean(dim=(1, 2)))
    if isinstance(features, TokenFeatures):
        return TokenFeatures(tokens=features.tokens, cls=features.cls,
                             projected_cls=model.cls_proj(features.cls))
    raise TypeError(f"cannot project {type(features).__name__}")
