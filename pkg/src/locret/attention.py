"""Cascaded self- and cross-modal attention over token sequences and patch grids.

Each block self-attends the token sequence (residual added), then cross-attends
the result against image patch features. The cross residual adds the raw
self-attention output by default; ``cross_residual="residual"`` switches the
base to the residual-added token sequence. Blocks are stacked ``num_blocks``
times, each consuming the previous block's cross-attended tokens. The [CLS]
attention row of the final block's self-attention, head-averaged and
renormalized over non-[CLS] positions, is exposed as the token weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import torch
from torch import nn

from .encoders import DTYPE, uniform_init_

CrossResidual = Literal["raw", "residual"]


@dataclass
class AttentionFeatures:
    """Final-block outputs for a batch of (token sequence, patch grid) pairs."""

    self_attended: torch.Tensor   # (batch, seq_len, token_dim), residual-added
    cross_attended: torch.Tensor  # (batch, seq_len, token_dim), residual-added
    self_joint: torch.Tensor      # (batch, seq_len, joint_dim)
    cross_joint: torch.Tensor     # (batch, seq_len, joint_dim)
    cls_weights: torch.Tensor     # (batch, seq_len - 1), nonnegative, rows sum to 1


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head projections and an output mix.

    All maps are bias-free so zero weights give exactly zero outputs. Returns
    both the mixed output and the per-head attention weights.
    """

    def __init__(self, query_dim: int, key_dim: int, num_heads: int, head_dim: int,
                 out_dim: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = head_dim
        inner = num_heads * head_dim
        self.w_query = nn.Linear(query_dim, inner, bias=False, dtype=DTYPE)
        self.w_key = nn.Linear(key_dim, inner, bias=False, dtype=DTYPE)
        self.w_value = nn.Linear(key_dim, inner, bias=False, dtype=DTYPE)
        self.w_out = nn.Linear(inner, out_dim, bias=False, dtype=DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        uniform_init_(self.w_query.weight, self.w_query.in_features, generator)
        uniform_init_(self.w_key.weight, self.w_key.in_features, generator)
        uniform_init_(self.w_value.weight, self.w_value.in_features, generator)
        uniform_init_(self.w_out.weight, self.w_out.in_features, generator)

    def forward(self, queries: torch.Tensor,
                keys_values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(.., Lq, dq) x (.., Lk, dk) -> output (.., Lq, out_dim), attn (.., H, Lq, Lk)."""
        squeeze = queries.dim() == 2
        if squeeze:
            queries = queries.unsqueeze(0)
            keys_values = keys_values.unsqueeze(0)
        if queries.shape[-1] != self.w_query.in_features:
            raise ValueError(
                f"query dim {queries.shape[-1]} != expected {self.w_query.in_features}")
        if keys_values.shape[-1] != self.w_key.in_features:
            raise ValueError(
                f"key dim {keys_values.shape[-1]} != expected {self.w_key.in_features}")
        if not torch.isfinite(queries).all() or not torch.isfinite(keys_values).all():
            raise ValueError("non-finite attention input")
        b, lq = queries.shape[0], queries.shape[1]
        lk = keys_values.shape[1]
        h, dk = self.num_heads, self.head_dim
        q = self.w_query(queries).view(b, lq, h, dk).transpose(1, 2)
        k = self.w_key(keys_values).view(b, lk, h, dk).transpose(1, 2)
        v = self.w_value(keys_values).view(b, lk, h, dk).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) * math.sqrt(1.0 / dk)
        attn = torch.softmax(scores, dim=-1)
        mixed = self.w_out((attn @ v).transpose(1, 2).reshape(b, lq, h * dk))
        if squeeze:
            return mixed[0], attn[0]
        return mixed, attn


class AttentionBlock(nn.Module):
    """One self-attention + cross-attention stage with residual wiring."""

    def __init__(self, token_dim: int, patch_dim: int, num_heads: int,
                 cross_residual: CrossResidual = "raw"):
        super().__init__()
        if token_dim % num_heads != 0:
            raise ValueError(f"token dim {token_dim} not divisible by {num_heads} heads")
        if cross_residual not in ("raw", "residual"):
            raise ValueError(f"unknown cross_residual mode '{cross_residual}'")
        head_dim = token_dim // num_heads
        self.cross_residual = cross_residual
        self.self_attn = MultiHeadAttention(token_dim, token_dim, num_heads, head_dim, token_dim)
        self.cross_attn = MultiHeadAttention(token_dim, patch_dim, num_heads, head_dim, token_dim)

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.self_attn.reset_parameters(generator)
        self.cross_attn.reset_parameters(generator)

    def forward(self, tokens: torch.Tensor, patches: torch.Tensor):
        """Returns (self_attended, cross_attended, cls_row) for one block."""
        self_out, self_attended, cls_row = self_attend(self, tokens)
        base = self_out if self.cross_residual == "raw" else self_attended
        cross_attended = cross_attend(self, self_attended, patches, base)
        return self_attended, cross_attended, cls_row


def self_attend(block: AttentionBlock, tokens: torch.Tensor):
    """Self-attention with residual; also returns the head-averaged [CLS] attention row.

    Returns (raw_output, residual_added, cls_row); cls_row has length seq_len and
    sums to 1 (softmax rows averaged over heads).
    """
    if tokens.shape[-2] < 2:
        raise ValueError("token sequence must have at least 2 rows ([CLS] + 1)")
    out, attn = block.self_attn(tokens, tokens)
    cls_row = attn[..., 0, :].mean(dim=-2)
    return out, out + tokens, cls_row


def cross_attend(block: AttentionBlock, self_attended: torch.Tensor,
                 patches: torch.Tensor, residual_base: torch.Tensor) -> torch.Tensor:
    """Cross-attention from tokens to patches, plus the selected residual base."""
    out, _ = block.cross_attn(self_attended, patches)
    return out + residual_base


class AttentionStack(nn.Module):
    """num_blocks cascaded blocks with final-block joint-space projections."""

    def __init__(self, token_dim: int, patch_dim: int, joint_dim: int, num_heads: int,
                 num_blocks: int, cross_residual: CrossResidual = "raw"):
        super().__init__()
        if num_blocks < 1:
            raise ValueError(f"need at least 1 block, got {num_blocks}")
        self.blocks = nn.ModuleList([
            AttentionBlock(token_dim, patch_dim, num_heads, cross_residual)
            for _ in range(num_blocks)
        ])
        self.self_proj = nn.Linear(token_dim, joint_dim, bias=False, dtype=DTYPE)
        self.cross_proj = nn.Linear(token_dim, joint_dim, bias=False, dtype=DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for block in self.blocks:
            block.reset_parameters(generator)
        uniform_init_(self.self_proj.weight, self.self_proj.in_features, generator)
        uniform_init_(self.cross_proj.weight, self.cross_proj.in_features, generator)

    def forward(self, tokens: torch.Tensor, patches: torch.Tensor) -> AttentionFeatures:
        """tokens (B, L, token_dim), patches (B, n_patches, patch_dim) -> features.

        Block i consumes block i-1's cross-attended tokens; projections and the
        [CLS] weighting come from the final block only.
        """
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
            patches = patches.unsqueeze(0)
        x = tokens
        for block in self.blocks:
            self_attended, cross_attended, cls_row = block(x, patches)
            x = cross_attended
        w = cls_row[..., 1:]
        w = w / w.sum(dim=-1, keepdim=True)
        feats = AttentionFeatures(
            self_attended=self_attended,
            cross_attended=cross_attended,
            self_joint=self.self_proj(self_attended),
            cross_joint=self.cross_proj(cross_attended),
            cls_weights=w,
        )
        if squeeze:
            feats = AttentionFeatures(*(t[0] for t in (
                feats.self_attended, feats.cross_attended, feats.self_joint,
                feats.cross_joint, feats.cls_weights)))
        return feats


def flatten_patch_grid(patch_grid: torch.Tensor) -> torch.Tensor:
    """(.., channels, h, w) -> (.., h*w, channels), row-major over the grid."""
    if patch_grid.dim() == 3:
        c, h, w = patch_grid.shape
        return patch_grid.permute(1, 2, 0).reshape(h * w, c)
    b, c, h, w = patch_grid.shape
    return patch_grid.permute(0, 2, 3, 1).reshape(b, h * w, c)
