"""Training objectives: global/local contrastive alignment, triplet hinge, and
a finite-difference gradient checker used by the numeric test suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch

from .attention import AttentionFeatures
from .model import PairFeatures


@dataclass
class LossConfig:
    """Temperatures, mixing weight, and triplet margin."""

    tau_g: float = 0.07
    tau_l: float = 0.07
    beta: float = 0.1
    margin: float = 0.5
    eps: float = 1e-8

    def __post_init__(self):
        if self.tau_g <= 0 or self.tau_l <= 0:
            raise ValueError("temperatures must be positive")
        if self.beta < 0 or self.margin < 0:
            raise ValueError("beta and margin must be non-negative")


@dataclass
class Stage1Loss:
    """Combined first-stage objective with its logged components."""

    total: torch.Tensor
    global_term: torch.Tensor
    local_term: torch.Tensor


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError(f"zero-norm {what} row: cosine undefined")
    return x / norms


def _symmetric_info_nce(scores: torch.Tensor) -> torch.Tensor:
    """Mean over i of the row- and column-wise -log softmax at the diagonal."""
    row = torch.diagonal(torch.log_softmax(scores, dim=1))
    col = torch.diagonal(torch.log_softmax(scores, dim=0))
    return -(row + col).mean()


def global_alignment_loss(config: LossConfig, image_embeds: torch.Tensor,
                          text_embeds: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE over the pairwise cosine matrix of global embeddings."""
    if image_embeds.shape != text_embeds.shape or image_embeds.dim() != 2:
        raise ValueError(
            f"expected matching (N, d) batches, got {tuple(image_embeds.shape)} "
            f"and {tuple(text_embeds.shape)}")
    cosines = _unit_rows(image_embeds, "image embedding") @ \
        _unit_rows(text_embeds, "text embedding").T
    return _symmetric_info_nce(cosines / config.tau_g)


def local_pair_scores(feats: AttentionFeatures) -> torch.Tensor:
    """score[i, j] = sum_k w_i[k] * cos(self_joint_i[k], cross_joint_j[k]).

    k ranges over non-[CLS] tokens; the weighting always comes from the row
    (query) sample i.
    """
    if feats.self_joint.dim() != 3:
        raise ValueError("local loss needs a batched AttentionFeatures")
    sj = _unit_rows(feats.self_joint[:, 1:, :], "self-attended token")
    cj = _unit_rows(feats.cross_joint[:, 1:, :], "cross-attended token")
    token_cos = torch.einsum("ikd,jkd->ijk", sj, cj)
    return torch.einsum("ik,ijk->ij", feats.cls_weights, token_cos)


def local_alignment_loss(config: LossConfig,
                         feats: AttentionFeatures | Sequence[AttentionFeatures]) -> torch.Tensor:
    """Symmetric InfoNCE over [CLS]-weighted token-wise cosine pair scores."""
    if not isinstance(feats, AttentionFeatures):
        feats = stack_features(feats)
    return _symmetric_info_nce(local_pair_scores(feats) / config.tau_l)


def stack_features(features: Sequence[AttentionFeatures]) -> AttentionFeatures:
    """Stack per-sample AttentionFeatures into one batch; lengths must agree."""
    lengths = {f.self_joint.shape[-2] for f in features}
    if len(lengths) != 1:
        raise ValueError(f"token lengths differ within batch: {sorted(lengths)}")
    return AttentionFeatures(*(torch.stack([getattr(f, name) for f in features])
                               for name in ("self_attended", "cross_attended",
                                            "self_joint", "cross_joint", "cls_weights")))


def triplet_loss(config: LossConfig, anchors: torch.Tensor, positives: torch.Tensor,
                 negatives: torch.Tensor) -> torch.Tensor:
    """mean(max(l2(a, p) - l2(a, n) + margin, 0)) over the batch."""
    if not anchors.shape == positives.shape == negatives.shape:
        raise ValueError("anchor/positive/negative shapes must match")
    d_pos = torch.linalg.vector_norm(anchors - positives, dim=-1)
    d_neg = torch.linalg.vector_norm(anchors - negatives, dim=-1)
    return torch.clamp(d_pos - d_neg + config.margin, min=0).mean()


def stage1_loss(config: LossConfig, pairs: PairFeatures) -> Stage1Loss:
    """Global + beta * local alignment on one forward batch."""
    g = global_alignment_loss(config, pairs.global_image, pairs.global_text)
    l = local_alignment_loss(config, pairs.attn)
    return Stage1Loss(total=g + config.beta * l, global_term=g, local_term=l)


@dataclass
class GradCheckReport:
    """Worst relative analytic-vs-numeric gradient error, per parameter."""

    per_param: dict[str, float]
    max_rel_error: float
    step: float

    def __str__(self) -> str:
        lines = [f"grad check (step={self.step:g}, max rel err={self.max_rel_error:.3e})"]
        for name, err in sorted(self.per_param.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(loss_fn: Callable[[], torch.Tensor],
               named_params: Iterable[tuple[str, torch.Tensor]],
               step: float = 1e-5) -> GradCheckReport:
    """Compare autograd gradients against central finite differences, entrywise.

    ``loss_fn`` recomputes the scalar loss from current parameter values. The
    relative error denominator is floored at 1e-6 so that true-zero gradients
    compare by absolute error.
    """
    params = [(name, p) for name, p in named_params]
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    if loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise ValueError(f"non-finite loss {loss.item()}")
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None
                       else torch.zeros_like(p)) for name, p in params}
    per_param: dict[str, float] = {}
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            grads = analytic[name].view(-1)
            worst = 0.0
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + step
                f_plus = float(loss_fn())
                flat[idx] = orig - step
                f_minus = float(loss_fn())
                flat[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = grads[idx].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, err)
            per_param[name] = worst
    return GradCheckReport(per_param=per_param,
                           max_rel_error=max(per_param.values(), default=0.0),
                           step=step)
