"""Teacher pre-training and student distillation loops.

The teacher sees complete modalities only. The student sees the same data but
with a fresh modality-availability pattern drawn per sample at the start of
every epoch, so the identity of the missing modalities varies across epochs.
The teacher is frozen throughout student training and provides embeddings,
logits, and prediction uncertainties (by default from full-modality inputs).

Both loops are single-threaded and deterministic given the config seed: data
shuffling and pattern draws use numpy generators, bottleneck noise uses a
torch generator, and model init is seeded through the backbone config.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import (
    BackboneConfig,
    Checkpoint,
    MultimodalBackbone,
    build_backbone,
    checkpoint_from_model,
    vib_kl,
)
from .datamodel import Sample, batch_arrays
from .losses import (
    ContrastiveConfig,
    DistillConfig,
    LossReport,
    LossWeights,
    class_bucket,
    combination_code,
    embedding_mse,
    group_contrastive_loss,
    logits_distill,
    prediction_uncertainty,
    task_loss,
    total_student_loss,
    total_teacher_loss,
    uncertainty_gap,
    uncertainty_gated_loss,
)

DROPPABLE_TERMS = ("L_CL", "L_Uncer", "L_Logits", "L_MSE")


def uniform_pattern_probs(m: int) -> tuple[float, ...]:
    """Uniform distribution over the 2^m - 1 non-empty availability patterns."""
    n = (1 << m) - 1
    return tuple(1.0 / n for _ in range(n))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 8e-4
    optimizer: str = "adam"
    weight_decay: float = 0.0
    seed: int = 0
    weights: LossWeights = field(default_factory=lambda: LossWeights(gamma=0.1, zeta=5.0))
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    pattern_probs: Optional[tuple[float, ...]] = None
    grad_clip: Optional[float] = 5.0
    use_rep_mse: bool = True
    use_logits_distill: bool = True
    use_uncertainty_gate: bool = True
    include_vib_in_total: bool = True
    teacher_inputs: str = "full"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.teacher_inputs not in ("full", "masked"):
            raise ValueError(f"unknown teacher_inputs {self.teacher_inputs!r}")
        if self.pattern_probs is not None:
            object.__setattr__(self, "pattern_probs", normalize_pattern_probs(self.pattern_probs))


def normalize_pattern_probs(probs: Sequence[float]) -> tuple[float, ...]:
    """Validate a pattern distribution; a leading slot for the empty pattern must be 0.

    Accepts either 2^m - 1 entries (ids 1..2^m-1) or 2^m entries where index 0
    is the empty combination.
    """
    probs = tuple(float(p) for p in probs)
    n = len(probs)
    if n >= 1 and (n & (n + 1)) == 0:  # 2^m - 1 entries
        body = probs
    elif n >= 2 and (n & (n - 1)) == 0:  # 2^m entries, slot 0 = empty pattern
        if probs[0] != 0.0:
            raise ValueError("empty modality combination must have probability 0")
        body = probs[1:]
    else:
        raise ValueError("pattern distribution must cover all non-empty combinations")
    if any(p < 0 for p in body):
        raise ValueError("pattern probabilities must be >= 0")
    total = sum(body)
    if abs(total - 1.0) > 1e-9:
        raise ValueError("pattern probabilities must sum to 1")
    return body


def sample_pattern(probs: Sequence[float], rng: np.random.Generator) -> int:
    """Draw one combination id (1..2^m-1) from the pattern distribution."""
    body = normalize_pattern_probs(probs)
    return int(rng.choice(len(body), p=np.asarray(body) / sum(body))) + 1


def sample_epoch_masks(n: int, m: int, probs: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Draw an (n, m) 0/1 availability matrix, one pattern per sample."""
    body = np.asarray(normalize_pattern_probs(probs))
    ids = rng.choice(len(body), size=n, p=body / body.sum()) + 1
    masks = np.zeros((n, m), dtype=np.float64)
    for p in range(m):
        masks[:, p] = (ids >> p) & 1
    return masks


def tensors_from_samples(samples: Sequence[Sample]):
    feats_np, masks_np, labels_np = batch_arrays(samples)
    feats = [torch.from_numpy(a) for a in feats_np]
    masks = torch.from_numpy(masks_np.astype(np.float64))
    labels = torch.from_numpy(labels_np)
    return feats, masks, labels


def _make_optimizer(model: MultimodalBackbone, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def teacher_batch_losses(
    model: MultimodalBackbone,
    feats: Sequence[torch.Tensor],
    masks: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    mode: str = "sample",
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, LossReport]:
    out = model(feats, masks, mode=mode, generator=generator, noise=noise)
    kind = cfg.distill.task
    task = task_loss(out.logits, labels, kind).mean()
    vib = vib_kl(out.mu, out.sigma).mean()
    total = total_teacher_loss(task, vib, cfg.weights.beta)
    report = LossReport(task=task.item(), vib=vib.item(), total=total.item())
    return total, report


def student_batch_losses(
    student: MultimodalBackbone,
    teacher: MultimodalBackbone,
    feats: Sequence[torch.Tensor],
    masks: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    mode: str = "sample",
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, LossReport]:
    kind = cfg.distill.task
    with torch.no_grad():
        t_masks = torch.ones_like(masks) if cfg.teacher_inputs == "full" else masks
        t_out = teacher(feats, t_masks, mode="mean")
    s_out = student(feats, masks, mode=mode, generator=generator, noise=noise)

    combos = combination_code(masks)
    classes = class_bucket(labels, kind)
    contrastive = group_contrastive_loss(s_out.embedding, combos, classes, cfg.contrastive)

    rep = embedding_mse(s_out.embedding, t_out.embedding).mean()
    rep_term = rep if cfg.use_rep_mse else rep.detach() * 0.0

    h_t = prediction_uncertainty(t_out.logits, labels, kind)
    h_s = prediction_uncertainty(s_out.logits, labels, kind)
    gap = uncertainty_gap(h_t, h_s)
    gate = gap if cfg.use_uncertainty_gate else torch.ones_like(gap)

    task = task_loss(s_out.logits, labels, kind)
    if cfg.use_logits_distill:
        targets = labels.long() if kind == "classification" else None
        distill = logits_distill(s_out.logits, t_out.logits, kind, cfg.distill.alpha, targets)
    else:
        distill = torch.zeros_like(task)
    gated = uncertainty_gated_loss(gate, task, distill, cfg.distill.detach_uncertainty_weight)

    vib = vib_kl(s_out.mu, s_out.sigma).mean()
    total = total_student_loss(
        contrastive, vib, rep_term, gated, cfg.weights, cfg.include_vib_in_total
    )
    report = LossReport(
        contrastive=contrastive.item(),
        rep_mse=rep.item(),
        uncertainty_gap=gap.mean().item(),
        logits_distill=distill.mean().item(),
        task=task.mean().item(),
        gated=gated.item(),
        vib=vib.item(),
        total=total.item(),
    )
    return total, report


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]

    def epoch_mean_total(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for entry in self.history:
            by_epoch.setdefault(entry["epoch"], []).append(entry["L_all"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _log_lines(history: list[dict], log_path: Optional[str | Path]):
    if log_path is None:
        return
    path = Path(log_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _run_epochs(
    model: MultimodalBackbone,
    feats: Sequence[torch.Tensor],
    masks_for_epoch,
    labels: torch.Tensor,
    cfg: TrainConfig,
    batch_loss_fn,
) -> list[dict]:
    n = labels.shape[0]
    optimizer = _make_optimizer(model, cfg)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    torch_gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        masks = masks_for_epoch(epoch)
        order = shuffle_rng.permutation(n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            batch_feats = [f[idx] for f in feats]
            batch_masks = masks[idx]
            batch_labels = labels[idx]
            total, report = batch_loss_fn(
                batch_feats, batch_masks, batch_labels, generator=torch_gen
            )
            optimizer.zero_grad()
            total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            entry = {
                "epoch": epoch,
                "step": step,
                "mr": float(1.0 - batch_masks.mean().item()),
            }
            entry.update(json.loads(report.to_json()))
            history.append(entry)
    return history


def train_teacher(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    backbone: BackboneConfig,
    log_path: Optional[str | Path] = None,
) -> TrainResult:
    """Pre-train on complete modalities; rejects any incomplete availability mask."""
    feats, masks, labels = tensors_from_samples(samples)
    if not bool((masks == 1).all()):
        raise ValueError("teacher training requires complete modalities for every sample")
    if backbone.role != "teacher":
        backbone = dataclasses.replace(backbone, role="teacher")
    model = build_backbone(dataclasses.replace(backbone, init_seed=cfg.seed))

    def batch_loss(batch_feats, batch_masks, batch_labels, generator):
        return teacher_batch_losses(
            model, batch_feats, batch_masks, batch_labels, cfg, generator=generator
        )

    history = _run_epochs(model, feats, lambda epoch: masks, labels, cfg, batch_loss)
    _log_lines(history, log_path)
    ckpt = checkpoint_from_model(model, epoch=cfg.epochs, train_config=_config_echo(cfg))
    return TrainResult(checkpoint=ckpt, history=history)


def train_student(
    samples: Sequence[Sample],
    teacher: Checkpoint,
    cfg: TrainConfig,
    backbone: Optional[BackboneConfig] = None,
    log_path: Optional[str | Path] = None,
) -> TrainResult:
    """Distill from a frozen teacher under per-sample, per-epoch pattern resampling."""
    feats, masks, labels = tensors_from_samples(samples)
    if not bool((masks == 1).all()):
        raise ValueError("student training expects a complete dataset; patterns are sampled on the fly")

    teacher_model = teacher.build_model()
    teacher_model.eval()
    for p in teacher_model.parameters():
        p.requires_grad_(False)

    if backbone is None:
        backbone = dataclasses.replace(teacher.backbone, role="student")
    t_cfg = teacher.backbone
    if (backbone.m, backbone.common_dim, backbone.output_dim) != (
        t_cfg.m, t_cfg.common_dim, t_cfg.output_dim,
    ):
        raise ValueError("student backbone incompatible with teacher (m, D, K must match)")
    student = build_backbone(dataclasses.replace(backbone, init_seed=cfg.seed))

    m = backbone.m
    probs = cfg.pattern_probs if cfg.pattern_probs is not None else uniform_pattern_probs(m)
    pattern_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
    n = labels.shape[0]

    def masks_for_epoch(epoch):
        return torch.from_numpy(sample_epoch_masks(n, m, probs, pattern_rng))

    def batch_loss(batch_feats, batch_masks, batch_labels, generator):
        return student_batch_losses(
            student, teacher_model, batch_feats, batch_masks, batch_labels, cfg,
            generator=generator,
        )

    history = _run_epochs(student, feats, masks_for_epoch, labels, cfg, batch_loss)
    _log_lines(history, log_path)
    ckpt = checkpoint_from_model(student, epoch=cfg.epochs, train_config=_config_echo(cfg))
    return TrainResult(checkpoint=ckpt, history=history)


def ablate(cfg: TrainConfig, drop: str) -> TrainConfig:
    """Disable one loss term; everything else (seeds included) stays identical."""
    if drop == "L_CL":
        return dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, gamma=0.0))
    if drop == "L_Uncer":
        return dataclasses.replace(cfg, use_uncertainty_gate=False)
    if drop == "L_Logits":
        return dataclasses.replace(cfg, use_logits_distill=False)
    if drop == "L_MSE":
        return dataclasses.replace(cfg, use_rep_mse=False)
    raise ValueError(f"unknown loss term {drop!r}; expected one of {DROPPABLE_TERMS}")


def _config_echo(cfg: TrainConfig) -> dict:
    echo = dataclasses.asdict(cfg)
    if echo.get("pattern_probs") is not None:
        echo["pattern_probs"] = list(echo["pattern_probs"])
    return echo
