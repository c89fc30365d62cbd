import dataclasses
import json

import numpy as np
import pytest
import torch

from missfuse.backbone import BackboneConfig, build_backbone
from missfuse.losses import LossWeights
from missfuse.synthdata import SynthConfig, apply_random, generate
from missfuse.training import (
    DROPPABLE_TERMS,
    TrainConfig,
    ablate,
    normalize_pattern_probs,
    sample_epoch_masks,
    sample_pattern,
    student_batch_losses,
    teacher_batch_losses,
    tensors_from_samples,
    train_student,
    train_teacher,
    uniform_pattern_probs,
)
from oracles import oracle_binary_metrics

torch.set_default_dtype(torch.float64)

DATA_CFG = SynthConfig(
    n=760,
    m=3,
    task="classification",
    num_classes=2,
    informativeness=(1.0, 0.3, 0.3),
    noise_scale=(0.25, 0.4, 0.4),
    seq_lens=(9, 7, 5),
    feat_dims=(12, 10, 8),
    seed=77,
)
N_TRAIN = 360

BACKBONE_CFG = BackboneConfig(
    m=3,
    feat_dims=(12, 10, 8),
    common_len=8,
    common_dim=16,
    prompt_lens=(2, 2, 2),
    encoder_layers=1,
    fusion_layers=2,
    fusion_heads=2,
    output_dim=2,
    task="classification",
    role="teacher",
)

TEACHER_CFG = TrainConfig(
    epochs=30,
    batch_size=40,
    lr=8e-4,
    optimizer="adam",
    seed=5,
    weights=LossWeights(gamma=0.1, zeta=5.0, beta=0.01),
)

STUDENT_CFG = dataclasses.replace(TEACHER_CFG, epochs=25, seed=6)


@pytest.fixture(scope="module")
def dataset():
    return generate(DATA_CFG)


@pytest.fixture(scope="module")
def train_samples(dataset):
    return dataset[:N_TRAIN]


@pytest.fixture(scope="module")
def eval_samples(dataset):
    return dataset[N_TRAIN:]


@pytest.fixture(scope="module")
def teacher_result(train_samples):
    return train_teacher(train_samples, TEACHER_CFG, BACKBONE_CFG)


@pytest.fixture(scope="module")
def student_result(train_samples, teacher_result):
    return train_student(train_samples, teacher_result.checkpoint, STUDENT_CFG)


def accuracy(model, samples, mask_override=None):
    feats, masks, labels = tensors_from_samples(samples)
    if mask_override is not None:
        masks = mask_override
    with torch.no_grad():
        out = model(feats, masks, mode="mean")
    preds = out.logits.argmax(dim=1)
    return (preds == labels).double().mean().item()


class TestPatternSampling:
    def test_uniform_frequencies(self):
        rng = np.random.default_rng(0)
        probs = uniform_pattern_probs(3)
        draws = np.array([sample_pattern(probs, rng) for _ in range(10_000)])
        assert draws.min() >= 1 and draws.max() <= 7
        p = 1 / 7
        sigma = np.sqrt(p * (1 - p) / 10_000)
        for k in range(1, 8):
            freq = (draws == k).mean()
            assert abs(freq - p) < 3.5 * sigma

    def test_point_mass(self):
        rng = np.random.default_rng(1)
        probs = (1.0, 0, 0, 0, 0, 0, 0)
        assert all(sample_pattern(probs, rng) == 1 for _ in range(50))

    def test_seeded_reproducibility(self):
        probs = uniform_pattern_probs(3)
        a = [sample_pattern(probs, np.random.default_rng(7)) for _ in range(20)]
        b = [sample_pattern(probs, np.random.default_rng(7)) for _ in range(20)]
        assert a == b

    def test_empty_combination_mass_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            normalize_pattern_probs((0.5, 0.5, 0, 0, 0, 0, 0, 0))

    def test_accepts_leading_zero_slot(self):
        body = normalize_pattern_probs((0.0,) + tuple(1 / 7 for _ in range(7)))
        assert len(body) == 7

    def test_bad_sum_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            normalize_pattern_probs(tuple(0.2 for _ in range(7)))

    def test_epoch_masks_no_empty_rows(self):
        rng = np.random.default_rng(3)
        masks = sample_epoch_masks(500, 3, uniform_pattern_probs(3), rng)
        assert masks.shape == (500, 3)
        assert (masks.sum(axis=1) >= 1).all()
        assert set(np.unique(masks)) <= {0.0, 1.0}


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="learning rate"):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError, match="optimizer"):
            TrainConfig(optimizer="sgd")
        with pytest.raises(ValueError, match="teacher_inputs"):
            TrainConfig(teacher_inputs="noisy")
        with pytest.raises(ValueError, match=">= 1"):
            TrainConfig(epochs=0)

    def test_pattern_probs_normalized_at_construction(self):
        cfg = TrainConfig(pattern_probs=(0.0,) + tuple(1 / 7 for _ in range(7)))
        assert len(cfg.pattern_probs) == 7


class TestTeacherTraining:
    def test_rejects_incomplete_masks(self, train_samples):
        masked = apply_random(train_samples, target_mr=0.3, seed=0)
        with pytest.raises(ValueError, match="complete"):
            train_teacher(masked, TEACHER_CFG, BACKBONE_CFG)

    def test_deterministic_given_seed(self, train_samples, teacher_result):
        quick_cfg = dataclasses.replace(TEACHER_CFG, epochs=2)
        r1 = train_teacher(train_samples, quick_cfg, BACKBONE_CFG)
        r2 = train_teacher(train_samples, quick_cfg, BACKBONE_CFG)
        assert [h["L_all"] for h in r1.history] == [h["L_all"] for h in r2.history]
        assert r1.checkpoint.param_bytes() == r2.checkpoint.param_bytes()

    def test_single_small_step_descends(self, train_samples):
        model = build_backbone(dataclasses.replace(BACKBONE_CFG, init_seed=11))
        feats, masks, labels = tensors_from_samples(train_samples[:32])
        noise = torch.randn(32, 16, generator=torch.Generator().manual_seed(0))
        loss0, _ = teacher_batch_losses(model, feats, masks, labels, TEACHER_CFG, noise=noise)
        loss0.backward()
        with torch.no_grad():
            for p in model.parameters():
                if p.grad is not None:
                    p -= 1e-6 * p.grad
        loss1, _ = teacher_batch_losses(model, feats, masks, labels, TEACHER_CFG, noise=noise)
        assert loss1.item() <= loss0.item() + 1e-12

    def test_strong_signal_reaches_high_accuracy(self, train_samples, teacher_result):
        model = teacher_result.checkpoint.build_model()
        assert accuracy(model, train_samples) >= 0.95

    def test_loss_trend_decreasing(self, teacher_result):
        means = teacher_result.epoch_mean_total()
        assert means[-1] < 0.8 * means[0]

    def test_per_epoch_log_structure(self, teacher_result, tmp_path):
        entry = teacher_result.history[0]
        for key in ("epoch", "step", "mr", "L_TASK", "L_VIB", "L_all"):
            assert key in entry
        assert entry["mr"] == 0.0  # complete modalities


class TestStudentTraining:
    def test_teacher_frozen(self, train_samples, teacher_result, student_result):
        before = teacher_result.checkpoint.param_bytes()
        cfg = dataclasses.replace(STUDENT_CFG, epochs=1)
        train_student(train_samples, teacher_result.checkpoint, cfg)
        assert teacher_result.checkpoint.param_bytes() == before

    def test_rejects_incomplete_dataset(self, train_samples, teacher_result):
        masked = apply_random(train_samples, target_mr=0.3, seed=1)
        with pytest.raises(ValueError, match="complete"):
            train_student(masked, teacher_result.checkpoint, STUDENT_CFG)

    def test_incompatible_backbone_rejected(self, train_samples, teacher_result):
        bad = dataclasses.replace(BACKBONE_CFG, common_dim=32, role="student",
                                  fusion_heads=2)
        with pytest.raises(ValueError, match="incompatible"):
            train_student(train_samples, teacher_result.checkpoint, STUDENT_CFG, backbone=bad)

    def test_deterministic_given_seed(self, train_samples, teacher_result):
        cfg = dataclasses.replace(STUDENT_CFG, epochs=2)
        r1 = train_student(train_samples, teacher_result.checkpoint, cfg)
        r2 = train_student(train_samples, teacher_result.checkpoint, cfg)
        assert [h["L_all"] for h in r1.history] == [h["L_all"] for h in r2.history]
        assert r1.checkpoint.param_bytes() == r2.checkpoint.param_bytes()

    def test_pure_rep_mse_regression(self, train_samples, teacher_result):
        cfg = dataclasses.replace(
            STUDENT_CFG,
            epochs=8,
            weights=LossWeights(gamma=0.0, zeta=0.0, beta=0.0),
            include_vib_in_total=False,
        )
        result = train_student(train_samples, teacher_result.checkpoint, cfg)
        by_epoch = {}
        for h in result.history:
            by_epoch.setdefault(h["epoch"], []).append(h["L_MSE"])
        first = np.mean(by_epoch[0])
        last = np.mean(by_epoch[max(by_epoch)])
        assert last < first

    def test_loss_trend_decreasing(self, student_result):
        means = student_result.epoch_mean_total()
        assert means[-1] < 0.8 * means[0]

    def test_student_role_recorded(self, student_result):
        assert student_result.checkpoint.role == "student"
        assert student_result.checkpoint.backbone.role == "student"

    def test_masks_vary_across_epochs(self, student_result):
        mrs = {round(h["mr"], 4) for h in student_result.history}
        assert len(mrs) > 3  # fresh random patterns produce varying batch MRs

    def test_student_beats_teacher_under_heavy_missing(
        self, eval_samples, teacher_result, student_result
    ):
        masked = apply_random(eval_samples, target_mr=0.5, seed=3)
        feats, masks, labels = tensors_from_samples(masked)
        teacher_model = teacher_result.checkpoint.build_model()
        student_model = student_result.checkpoint.build_model()
        scores = {}
        for name, model in (("teacher", teacher_model), ("student", student_model)):
            with torch.no_grad():
                out = model(feats, masks, mode="mean")
            preds = out.logits.argmax(dim=1)
            acc = (preds == labels).double().mean().item()
            scores[name] = acc
        assert scores["student"] > scores["teacher"]

    def test_jsonl_log_written(self, train_samples, teacher_result, tmp_path):
        cfg = dataclasses.replace(STUDENT_CFG, epochs=1)
        log = tmp_path / "train_log.jsonl"
        train_student(train_samples, teacher_result.checkpoint, cfg, log_path=log)
        lines = log.read_text().strip().split("\n")
        assert len(lines) == int(np.ceil(len(train_samples) / cfg.batch_size))
        entry = json.loads(lines[0])
        for key in ("epoch", "step", "mr", "L_CL", "L_MSE", "L_Uncer",
                    "L_Logits", "L_TASK", "L_Sugr", "L_VIB", "L_all"):
            assert key in entry


class TestAblate:
    def test_drop_contrastive(self):
        cfg = ablate(STUDENT_CFG, "L_CL")
        assert cfg.weights.gamma == 0.0
        assert cfg.use_uncertainty_gate and cfg.use_logits_distill and cfg.use_rep_mse

    def test_drop_uncertainty_gate(self):
        cfg = ablate(STUDENT_CFG, "L_Uncer")
        assert not cfg.use_uncertainty_gate
        assert cfg.weights == STUDENT_CFG.weights

    def test_drop_logits_distill(self):
        cfg = ablate(STUDENT_CFG, "L_Logits")
        assert not cfg.use_logits_distill

    def test_drop_rep_mse(self):
        cfg = ablate(STUDENT_CFG, "L_MSE")
        assert not cfg.use_rep_mse

    def test_everything_else_identical(self):
        for key in DROPPABLE_TERMS:
            cfg = ablate(STUDENT_CFG, key)
            assert cfg.epochs == STUDENT_CFG.epochs
            assert cfg.seed == STUDENT_CFG.seed
            assert cfg.lr == STUDENT_CFG.lr

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown loss term"):
            ablate(STUDENT_CFG, "L_VIB")


class TestBatchLossHelpers:
    def test_gate_off_means_unweighted_sum(self, train_samples, teacher_result):
        student = build_backbone(
            dataclasses.replace(BACKBONE_CFG, role="student", init_seed=9)
        )
        teacher_model = teacher_result.checkpoint.build_model()
        feats, masks, labels = tensors_from_samples(train_samples[:16])
        cfg_on = STUDENT_CFG
        cfg_off = dataclasses.replace(STUDENT_CFG, use_uncertainty_gate=False)
        noise = torch.randn(16, 16, generator=torch.Generator().manual_seed(1))
        _, rep_on = student_batch_losses(
            student, teacher_model, feats, masks, labels, cfg_on, noise=noise
        )
        _, rep_off = student_batch_losses(
            student, teacher_model, feats, masks, labels, cfg_off, noise=noise
        )
        assert abs(rep_off.gated - (rep_off.task + rep_off.logits_distill)) < 1e-9
        assert rep_on.gated != rep_off.gated

    def test_distill_off_zeroes_term(self, train_samples, teacher_result):
        student = build_backbone(
            dataclasses.replace(BACKBONE_CFG, role="student", init_seed=9)
        )
        teacher_model = teacher_result.checkpoint.build_model()
        feats, masks, labels = tensors_from_samples(train_samples[:16])
        cfg = dataclasses.replace(STUDENT_CFG, use_logits_distill=False)
        _, rep = student_batch_losses(
            student, teacher_model, feats, masks, labels, cfg,
            noise=torch.zeros(16, 16),
        )
        assert rep.logits_distill == 0.0
