"""Synthetic multimodal dataset generation and the missing-modality protocols.

Samples are drawn from a shared latent (class one-hot or scalar score) pushed
through fixed per-modality random linear maps, so modalities are correlated
but unequally informative. The two protocols mirror deployment conditions:
a fixed modality pattern applied to every sample, or per-sample random
dropping to an exact dataset-level missing rate.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import (
    AvailabilityMask,
    CombinationId,
    Label,
    ModalityTensor,
    Sample,
    compute_mr,
)

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings; the seed fully determines the output."""

    n: int
    m: int = 3
    task: str = "classification"
    num_classes: int = 4
    label_range: float = 3.0
    informativeness: tuple[float, ...] = (1.0, 0.5, 0.3)
    noise_scale: tuple[float, ...] = (0.5, 0.5, 0.5)
    seq_lens: tuple[int, ...] = (12, 8, 10)
    feat_dims: tuple[int, ...] = (16, 10, 12)
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("informativeness", "noise_scale", "seq_lens", "feat_dims"):
            tup = tuple(getattr(self, name))
            object.__setattr__(self, name, tup)
            if len(tup) != self.m:
                raise ValueError(f"{name} must have length m={self.m}, got {len(tup)}")
        if any(w < 0 for w in self.informativeness):
            raise ValueError("informativeness weights must be >= 0")
        if any(t < 1 for t in self.seq_lens) or any(d < 1 for d in self.feat_dims):
            raise ValueError("seq_lens and feat_dims must be >= 1")


@dataclass(frozen=True)
class MissingProtocol:
    """Either a fixed pattern for every sample, or random dropping to a target MR."""

    kind: str
    fixed_pattern: CombinationId | None = None
    target_mr: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "fixed":
            if self.fixed_pattern is None or self.target_mr is not None:
                raise ValueError("fixed protocol needs fixed_pattern only")
        elif self.kind == "random":
            if self.target_mr is None or self.fixed_pattern is not None:
                raise ValueError("random protocol needs target_mr only")
        else:
            raise ValueError(f"unknown protocol kind {self.kind!r}")


def _latent_dim(config: SynthConfig) -> int:
    return config.num_classes if config.task == "classification" else 1


def _modality_maps(config: SynthConfig) -> list[np.ndarray]:
    """Fixed random linear maps latent -> feature space, one per modality."""
    z_dim = _latent_dim(config)
    maps = []
    for p in range(config.m):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7919, p]))
        maps.append(rng.normal(0.0, 1.0, size=(z_dim, config.feat_dims[p])) / np.sqrt(z_dim))
    return maps


def generate(config: SynthConfig) -> list[Sample]:
    """Draw a dataset of `config.n` samples with complete availability masks."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 104729]))
    maps = _modality_maps(config)
    z_dim = _latent_dim(config)
    samples = []
    complete = AvailabilityMask.complete(config.m)
    for i in range(config.n):
        if config.task == "classification":
            k = int(rng.integers(config.num_classes))
            z = np.zeros(z_dim)
            z[k] = 1.0
            label = Label(kind="classification", class_index=k, num_classes=config.num_classes)
        else:
            y = float(rng.uniform(-config.label_range, config.label_range))
            z = np.array([y])
            label = Label(kind="regression", value=y)
        tensors = []
        for p in range(config.m):
            signal = config.informativeness[p] * (z @ maps[p])
            noise = rng.normal(0.0, config.noise_scale[p], size=(config.seq_lens[p], config.feat_dims[p]))
            tensors.append(ModalityTensor(p, signal[None, :] + noise))
        samples.append(Sample(tensors=tuple(tensors), mask=complete, label=label, sample_id=i))
    return samples


def apply_fixed(samples: Sequence[Sample], pattern: CombinationId) -> list[Sample]:
    """Set every sample's mask to the given pattern; everything else unchanged."""
    if len(samples) == 0:
        return []
    mask = pattern.decode(samples[0].m)
    return [s.with_mask(mask) for s in samples]


def apply_random(samples: Sequence[Sample], target_mr: float, seed: int) -> list[Sample]:
    """Drop exactly round(target_mr * N * m) modality slots uniformly at random.

    Slots are drawn one at a time from the currently droppable set (slots whose
    sample would still keep at least one modality), which keeps every draw
    uniform over feasible choices and terminates for every feasible target.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("apply_random requires at least one sample")
    m = samples[0].m
    max_mr = (m - 1) / m
    if not 0.0 < target_mr <= max_mr + 1e-12:
        raise ValueError(f"target_mr must be in (0, {max_mr:.4f}], got {target_mr}")
    n_drop = int(round(target_mr * n * m))
    n_drop = min(n_drop, n * (m - 1))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 15485863]))

    avail = np.ones((n, m), dtype=bool)
    counts = np.full(n, m, dtype=np.int64)
    for _ in range(n_drop):
        droppable = avail & (counts > 1)[:, None]
        flat = np.flatnonzero(droppable.ravel())
        pick = int(flat[rng.integers(len(flat))])
        i, p = divmod(pick, m)
        avail[i, p] = False
        counts[i] -= 1

    out = [s.with_mask(AvailabilityMask(bits=tuple(int(b) for b in avail[i]))) for i, s in enumerate(samples)]
    achieved = compute_mr([s.mask for s in out], m)
    assert abs(achieved - target_mr) <= 1.0 / (n * m) + 1e-12
    return out


def add_feature_noise(samples: Sequence[Sample], intensity: float, seed: int) -> list[Sample]:
    """Perturb every modality tensor by intensity-scaled standard normal noise."""
    if intensity == 0.0:
        return list(samples)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 32452843]))
    out = []
    for s in samples:
        tensors = tuple(
            ModalityTensor(t.modality_index, t.data + intensity * rng.standard_normal(t.data.shape))
            for t in s.tensors
        )
        out.append(Sample(tensors=tensors, mask=s.mask, label=s.label, sample_id=s.sample_id))
    return out


def config_hash(config: SynthConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_array(path: Path, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    arr.tofile(path)
    return {"file": path.name, "shape": list(arr.shape), "dtype": str(arr.dtype)}


def _read_array(path: Path, entry: dict) -> np.ndarray:
    arr = np.fromfile(path, dtype=np.dtype(entry["dtype"]))
    return arr.reshape(entry["shape"])


def save_dataset(dirpath: str | Path, splits: dict[str, Sequence[Sample]], config: SynthConfig) -> Path:
    """Export splits as flat binary arrays plus a JSON manifest."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format_version": DATASET_FORMAT_VERSION,
        "config": asdict(config),
        "config_hash": config_hash(config),
        "splits": {},
    }
    for split, samples in splits.items():
        samples = list(samples)
        if not samples:
            raise ValueError(f"split {split!r} is empty")
        m = samples[0].m
        arrays = {}
        for p in range(m):
            feats = np.stack([s.tensors[p].data for s in samples])
            arrays[f"features_{p}"] = _write_array(dirpath / f"{split}_features_{p}.bin", feats)
        masks = np.stack([s.mask.as_array() for s in samples])
        arrays["masks"] = _write_array(dirpath / f"{split}_masks.bin", masks)
        if config.task == "classification":
            labels = np.array([s.label.class_index for s in samples], dtype=np.int64)
        else:
            labels = np.array([s.label.value for s in samples], dtype=np.float64)
        arrays["labels"] = _write_array(dirpath / f"{split}_labels.bin", labels)
        ids = np.array([s.sample_id for s in samples], dtype=np.int64)
        arrays["sample_ids"] = _write_array(dirpath / f"{split}_sample_ids.bin", ids)
        manifest["splits"][split] = {"n": len(samples), "m": m, "arrays": arrays}
    (dirpath / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return dirpath


def load_dataset(dirpath: str | Path) -> tuple[dict[str, list[Sample]], SynthConfig]:
    """Load a dataset directory written by save_dataset."""
    dirpath = Path(dirpath)
    manifest = json.loads((dirpath / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')}")
    cfg_dict = dict(manifest["config"])
    for key in ("informativeness", "noise_scale", "seq_lens", "feat_dims"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = SynthConfig(**cfg_dict)
    splits: dict[str, list[Sample]] = {}
    for split, info in manifest["splits"].items():
        m = info["m"]
        arrays = info["arrays"]
        feats = [_read_array(dirpath / arrays[f"features_{p}"]["file"], arrays[f"features_{p}"]) for p in range(m)]
        masks = _read_array(dirpath / arrays["masks"]["file"], arrays["masks"])
        labels = _read_array(dirpath / arrays["labels"]["file"], arrays["labels"])
        ids = _read_array(dirpath / arrays["sample_ids"]["file"], arrays["sample_ids"])
        samples = []
        for i in range(info["n"]):
            tensors = tuple(ModalityTensor(p, feats[p][i]) for p in range(m))
            mask = AvailabilityMask(bits=tuple(int(b) for b in masks[i]))
            if config.task == "classification":
                label = Label(kind="classification", class_index=int(labels[i]), num_classes=config.num_classes)
            else:
                label = Label(kind="regression", value=float(labels[i]))
            samples.append(Sample(tensors=tensors, mask=mask, label=label, sample_id=int(ids[i])))
        splits[split] = samples
    return splits, config
