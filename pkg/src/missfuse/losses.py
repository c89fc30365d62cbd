"""Training objectives for the distillation pipeline.

The student is trained with four ingredients:

* a group-aware contrastive loss over student embeddings whose per-anchor
  log-probability decomposes into three terms — membership of the anchor's
  modality combination, class purity within that combination, and combination
  purity within the class — with weights mu1/mu2 on the latter two;
* a per-sample squared distance between student and teacher embeddings;
* a logits-distillation term (squared error for regression, decoupled
  target/non-target KL for classification) gated per sample by the absolute
  teacher/student prediction-uncertainty gap;
* the variational bottleneck KL from :mod:`missfuse.backbone`.

All functions are pure, operate on float64 tensors, and keep gradients
flowing to their tensor inputs unless explicitly detached.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

LOG_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.2
    mu1: float = 1.0
    mu2: float = 1.0
    normalize_embeddings: bool = True
    include_self: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.mu1 < 0 or self.mu2 < 0:
            raise ValueError("mu1 and mu2 must be >= 0")


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.2
    detach_uncertainty_weight: bool = False
    task: str = "classification"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass(frozen=True)
class LossWeights:
    gamma: float
    zeta: float
    beta: float = 0.01

    def __post_init__(self):
        if self.gamma < 0 or self.zeta < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class GroupIndexSets:
    """Boolean (B, B) membership matrices; row i marks the sets of anchor i."""

    same_combination: torch.Tensor  # M_i
    same_class: torch.Tensor        # S_i
    same_both: torch.Tensor         # N_i = M_i & S_i
    candidates: torch.Tensor        # full batch (minus self when excluded)


def build_group_sets(
    combos: torch.Tensor, classes: torch.Tensor, include_self: bool = True
) -> GroupIndexSets:
    if combos.shape != classes.shape or combos.dim() != 1:
        raise ValueError("combos and classes must be matching 1-D tensors")
    same_comb = combos.unsqueeze(0) == combos.unsqueeze(1)
    same_cls = classes.unsqueeze(0) == classes.unsqueeze(1)
    candidates = torch.ones_like(same_comb)
    if not include_self:
        eye = torch.eye(len(combos), dtype=torch.bool, device=combos.device)
        same_comb = same_comb & ~eye
        same_cls = same_cls & ~eye
        candidates = candidates & ~eye
    return GroupIndexSets(
        same_combination=same_comb,
        same_class=same_cls,
        same_both=same_comb & same_cls,
        candidates=candidates,
    )


def similarity_logits(embeddings: torch.Tensor, cfg: ContrastiveConfig) -> torch.Tensor:
    """Pairwise (optionally cosine) similarities divided by the temperature."""
    if embeddings.dim() != 2 or embeddings.shape[0] < 1:
        raise ValueError("embeddings must be a non-empty (B, D) matrix")
    if cfg.normalize_embeddings:
        norms = embeddings.norm(dim=1, keepdim=True)
        if (norms == 0).any():
            raise ValueError("cannot normalize a zero embedding row")
        embeddings = embeddings / norms
    return embeddings @ embeddings.t() / cfg.temperature


def _masked_logsumexp(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    filled = logits.masked_fill(~mask, float("-inf"))
    return torch.logsumexp(filled, dim=1)


def log_p_combination(logits: torch.Tensor, sets: GroupIndexSets):
    """Row-wise log of (same-combination mass / full-batch mass); (values, valid)."""
    valid = sets.same_combination.any(dim=1) & sets.candidates.any(dim=1)
    out = _masked_logsumexp(logits, sets.same_combination) - _masked_logsumexp(
        logits, sets.candidates
    )
    return out.clamp(min=LOG_FLOOR), valid


def log_p_class_within_combination(logits: torch.Tensor, sets: GroupIndexSets):
    valid = sets.same_both.any(dim=1)
    out = _masked_logsumexp(logits, sets.same_both) - _masked_logsumexp(
        logits, sets.same_combination
    )
    return out.clamp(min=LOG_FLOOR), valid


def log_p_combination_within_class(logits: torch.Tensor, sets: GroupIndexSets):
    valid = sets.same_both.any(dim=1)
    out = _masked_logsumexp(logits, sets.same_both) - _masked_logsumexp(
        logits, sets.same_class
    )
    return out.clamp(min=LOG_FLOOR), valid


def _masked_mean(values: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    if not valid.any():
        return values.new_zeros(())
    return values[valid].mean()


def class_bucket(labels: torch.Tensor, kind: str) -> torch.Tensor:
    """Discrete class ids for grouping; regression labels bucket by sign."""
    if kind == "classification":
        return labels.long()
    if kind == "regression":
        return (labels.reshape(-1) >= 0).long()
    raise ValueError(f"unknown task kind {kind!r}")


def combination_code(mask: torch.Tensor) -> torch.Tensor:
    """Encode (B, m) availability rows as integers, modality 0 = least-significant bit."""
    if mask.dim() != 2:
        raise ValueError("mask must be (B, m)")
    weights = torch.tensor([1 << p for p in range(mask.shape[1])], device=mask.device)
    return (mask.long() * weights).sum(dim=1)


def group_contrastive_loss(
    embeddings: torch.Tensor,
    combos: torch.Tensor,
    classes: torch.Tensor,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> torch.Tensor:
    """Mean over anchors of -(log p_comb + mu1 log p_cls|comb - mu2 log p_comb|cls).

    With mu1 == mu2 == 1 the three terms telescope to the supervised
    contrastive value -log(same-class mass / batch mass) per anchor. Anchors
    whose index set for one of the terms is empty (possible only with
    include_self=False) drop out of that term's mean; a batch where every
    term is empty yields 0.0 and a warning.
    """
    logits = similarity_logits(embeddings, cfg)
    sets = build_group_sets(combos, classes, include_self=cfg.include_self)
    t1, v1 = log_p_combination(logits, sets)
    t2, v2 = log_p_class_within_combination(logits, sets)
    t3, v3 = log_p_combination_within_class(logits, sets)
    if not (v1.any() or v2.any() or v3.any()):
        warnings.warn("contrastive loss: every anchor was skipped; returning 0")
        return embeddings.sum() * 0.0
    return -(
        _masked_mean(t1, v1)
        + cfg.mu1 * _masked_mean(t2, v2)
        - cfg.mu2 * _masked_mean(t3, v3)
    )


def embedding_mse(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Per-sample squared Euclidean distance between embedding rows."""
    if student.shape != teacher.shape:
        raise ValueError("embedding shapes must match")
    return (student - teacher).pow(2).sum(dim=-1)


def prediction_uncertainty(
    y_hat: torch.Tensor, y: Optional[torch.Tensor] = None, kind: str = "classification"
) -> torch.Tensor:
    """Per-sample uncertainty: softmax entropy, or squared error for regression."""
    if not torch.isfinite(y_hat).all():
        raise ValueError("non-finite predictions")
    if kind == "classification":
        logp = F.log_softmax(y_hat, dim=-1)
        return -(logp.exp() * logp).sum(dim=-1)
    if kind == "regression":
        if y is None:
            raise ValueError("regression uncertainty needs the label")
        return (y_hat.reshape(-1) - y.reshape(-1)).pow(2)
    raise ValueError(f"unknown task kind {kind!r}")


def uncertainty_gap(h_teacher: torch.Tensor, h_student: torch.Tensor) -> torch.Tensor:
    return (h_teacher - h_student).abs()


def logits_distill(
    y_s: torch.Tensor,
    y_t: torch.Tensor,
    kind: str,
    alpha: float = 0.2,
    targets: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Per-sample distillation gap between student and teacher predictions.

    Regression: squared difference of the scalar predictions. Classification:
    decoupled KD — alpha * KL over the (target, non-target) binary split plus
    (1 - alpha) * KL over the renormalized non-target distribution, teacher
    first in both KLs.
    """
    if y_s.shape != y_t.shape:
        raise ValueError("prediction shapes must match")
    if kind == "regression":
        return (y_s.reshape(-1) - y_t.reshape(-1)).pow(2)
    if kind != "classification":
        raise ValueError(f"unknown task kind {kind!r}")
    if y_s.shape[-1] < 2:
        raise ValueError("classification distillation needs at least two classes")
    if targets is None:
        raise ValueError("classification distillation needs target classes")
    b, k = y_s.shape
    rows = torch.arange(b, device=y_s.device)
    p_t = F.softmax(y_t, dim=-1)
    p_s = F.softmax(y_s, dim=-1)
    pt_tgt = p_t[rows, targets]
    ps_tgt = p_s[rows, targets]
    b_t = torch.stack([pt_tgt, 1.0 - pt_tgt], dim=1).clamp(min=1e-12)
    b_s = torch.stack([ps_tgt, 1.0 - ps_tgt], dim=1).clamp(min=1e-12)
    kl_binary = (b_t * (b_t.log() - b_s.log())).sum(dim=1)

    nontgt = torch.ones_like(p_t, dtype=torch.bool)
    nontgt[rows, targets] = False
    # log-softmax over the non-target logits renormalizes over K-1 classes
    masked_t = y_t.masked_fill(~nontgt, float("-inf"))
    masked_s = y_s.masked_fill(~nontgt, float("-inf"))
    logp_t = F.log_softmax(masked_t, dim=-1)
    logp_s = F.log_softmax(masked_s, dim=-1)
    contrib = torch.where(
        nontgt, logp_t.exp() * (logp_t - logp_s), torch.zeros_like(logp_t)
    )
    kl_nontgt = contrib.sum(dim=1)
    return alpha * kl_binary + (1.0 - alpha) * kl_nontgt


def task_loss(y_hat: torch.Tensor, y: torch.Tensor, kind: str) -> torch.Tensor:
    """Per-sample supervised loss: cross-entropy or absolute error."""
    if kind == "classification":
        targets = y.long().reshape(-1)
        if (targets < 0).any() or (targets >= y_hat.shape[-1]).any():
            raise ValueError("class index out of range")
        return F.cross_entropy(y_hat, targets, reduction="none")
    if kind == "regression":
        return (y_hat.reshape(-1) - y.reshape(-1)).abs()
    raise ValueError(f"unknown task kind {kind!r}")


def uncertainty_gated_loss(
    gap: torch.Tensor,
    task: torch.Tensor,
    distill: torch.Tensor,
    detach_gate: bool = False,
) -> torch.Tensor:
    """Mean over samples of gap_i * (task_i + distill_i)."""
    if not (gap.shape == task.shape == distill.shape):
        raise ValueError("per-sample loss vectors must align")
    weight = gap.detach() if detach_gate else gap
    return (weight * (task + distill)).mean()


def total_student_loss(
    contrastive: torch.Tensor,
    vib: torch.Tensor,
    rep_mse: torch.Tensor,
    gated: torch.Tensor,
    weights: LossWeights,
    include_vib: bool = True,
) -> torch.Tensor:
    """gamma * contrastive + beta * vib + rep_mse + zeta * gated (vib term optional)."""
    total = weights.gamma * contrastive + rep_mse + weights.zeta * gated
    if include_vib:
        total = total + weights.beta * vib
    return total


def total_teacher_loss(task: torch.Tensor, vib: torch.Tensor, beta: float = 0.01) -> torch.Tensor:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return task + beta * vib


@dataclass
class LossReport:
    """Per-step scalar summary of every objective component."""

    contrastive: float = 0.0
    rep_mse: float = 0.0
    uncertainty_gap: float = 0.0
    logits_distill: float = 0.0
    task: float = 0.0
    gated: float = 0.0
    vib: float = 0.0
    total: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("contrastive", "rep_mse", "uncertainty_gap", "logits_distill",
                     "task", "gated", "vib", "total"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite loss component {name}")

    def to_json(self) -> str:
        payload = {
            "L_CL": self.contrastive,
            "L_MSE": self.rep_mse,
            "L_Uncer": self.uncertainty_gap,
            "L_Logits": self.logits_distill,
            "L_TASK": self.task,
            "L_Sugr": self.gated,
            "L_VIB": self.vib,
            "L_all": self.total,
        }
        payload.update(self.extra)
        return json.dumps(payload, sort_keys=True)
