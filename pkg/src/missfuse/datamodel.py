"""Core value types shared across the pipeline, plus mask/combination arithmetic.

Conventions: modality index 0 is language (L), 1 is audio (A), 2 is visual (V)
for the default three-modality setup; higher indices are named M3, M4, ...
Combination ids encode availability masks as bit patterns with modality 0 in
the least significant bit, so ids range over [1, 2^m - 1].

All types are frozen dataclasses validated on construction and safe to share
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

CANONICAL_NAMES = ("L", "A", "V")


def modality_name(p: int) -> str:
    return CANONICAL_NAMES[p] if p < len(CANONICAL_NAMES) else f"M{p}"


@dataclass(frozen=True)
class ModalityTensor:
    """One modality's feature sequence, shape (t_p, d_p)."""

    modality_index: int
    data: np.ndarray

    def __post_init__(self):
        if self.modality_index < 0:
            raise ValueError(f"modality_index must be >= 0, got {self.modality_index}")
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"modality data must be 2-D (t_p, d_p), got shape {arr.shape}")
        t_p, d_p = arr.shape
        if t_p < 1 or d_p < 1:
            raise ValueError(f"modality data needs t_p >= 1 and d_p >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("modality data contains non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def seq_len(self) -> int:
        return self.data.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AvailabilityMask:
    """Per-sample availability bits, one per modality; at least one must be set."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"mask entries must be exactly 0 or 1, got {bits}")
        if sum(bits) < 1:
            raise ValueError("mask must have at least one available modality")
        object.__setattr__(self, "bits", bits)

    @property
    def m(self) -> int:
        return len(self.bits)

    @property
    def available_count(self) -> int:
        return sum(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.int8)

    @classmethod
    def complete(cls, m: int) -> "AvailabilityMask":
        return cls(bits=(1,) * m)


@dataclass(frozen=True)
class CombinationId:
    """Bit-pattern encoding of an availability mask (modality 0 = LSB)."""

    id: int

    def __post_init__(self):
        if self.id < 1:
            raise ValueError(f"combination id must be >= 1, got {self.id}")

    def decode(self, m: int) -> AvailabilityMask:
        if self.id > (1 << m) - 1:
            raise ValueError(f"combination id {self.id} out of range for m={m}")
        return AvailabilityMask(bits=tuple((self.id >> p) & 1 for p in range(m)))

    def names(self, m: int) -> str:
        mask = self.decode(m)
        return ",".join(modality_name(p) for p in range(m) if mask.bits[p])

    @classmethod
    def from_names(cls, spec: str, m: int) -> "CombinationId":
        wanted = [s.strip() for s in spec.split(",") if s.strip()]
        known = {modality_name(p): p for p in range(m)}
        cid = 0
        for name in wanted:
            if name not in known:
                raise ValueError(f"unknown modality name {name!r} for m={m}")
            cid |= 1 << known[name]
        return cls(id=cid)

    @property
    def available_count(self) -> int:
        return bin(self.id).count("1")


def combination_id(mask: AvailabilityMask) -> CombinationId:
    """Encode a mask as its bit-pattern id; bijective over valid masks."""
    cid = sum(b << p for p, b in enumerate(mask.bits))
    return CombinationId(id=cid)


def decode_combination(cid: CombinationId, m: int) -> AvailabilityMask:
    return cid.decode(m)


def compute_mr(masks: Sequence[AvailabilityMask], m: int) -> float:
    """Dataset-level missing rate: 1 - (sum of available slots) / (N * m)."""
    if len(masks) == 0:
        raise ValueError("compute_mr requires at least one mask")
    total = 0
    for mask in masks:
        if mask.m != m:
            raise ValueError(f"mask has m={mask.m}, expected {m}")
        total += mask.available_count
    return 1.0 - total / (len(masks) * m)


@dataclass(frozen=True)
class Label:
    """Classification class index or regression value, never both."""

    kind: str
    class_index: int | None = None
    value: float | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if self.kind == "classification":
            if self.class_index is None or self.value is not None:
                raise ValueError("classification label needs class_index only")
            if self.num_classes is None or self.num_classes < 2:
                raise ValueError("classification label needs num_classes >= 2")
            if not 0 <= self.class_index < self.num_classes:
                raise ValueError(
                    f"class_index {self.class_index} out of range [0, {self.num_classes})"
                )
        elif self.kind == "regression":
            if self.value is None or self.class_index is not None:
                raise ValueError("regression label needs value only")
            if not np.isfinite(self.value):
                raise ValueError("regression label must be finite")
        else:
            raise ValueError(f"unknown label kind {self.kind!r}")


@dataclass(frozen=True)
class Sample:
    """One data point: m modality tensors, an availability mask, a label.

    Tensors are kept in memory even for masked modalities; masking is applied
    at encoding time by zero-filling, so one dataset serves all protocols.
    """

    tensors: tuple[ModalityTensor, ...]
    mask: AvailabilityMask
    label: Label
    sample_id: int = 0

    def __post_init__(self):
        if len(self.tensors) != self.mask.m:
            raise ValueError(
                f"sample has {len(self.tensors)} tensors but mask for m={self.mask.m}"
            )
        for p, tensor in enumerate(self.tensors):
            if tensor.modality_index != p:
                raise ValueError("tensors must be ordered by modality index")
        object.__setattr__(self, "tensors", tuple(self.tensors))

    @property
    def m(self) -> int:
        return self.mask.m

    def with_mask(self, mask: AvailabilityMask) -> "Sample":
        return replace(self, mask=mask)


def validate_batch(samples: Sequence[Sample]) -> None:
    """Check the shared-shape invariants of a batch (B >= 1, same m and label kind)."""
    if len(samples) == 0:
        raise ValueError("batch must contain at least one sample")
    first = samples[0]
    for s in samples:
        if s.m != first.m:
            raise ValueError("all samples in a batch must share m")
        if s.label.kind != first.label.kind:
            raise ValueError("all samples in a batch must share label kind")
        if s.label.kind == "classification" and s.label.num_classes != first.label.num_classes:
            raise ValueError("all samples in a batch must share num_classes")


def batch_arrays(samples: Sequence[Sample]) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Stack a batch into (per-modality feature arrays, masks (B, m), labels (B,)).

    Labels are class indices (int64) for classification, raw values (float64)
    for regression.
    """
    validate_batch(samples)
    m = samples[0].m
    feats = [np.stack([s.tensors[p].data for s in samples]) for p in range(m)]
    masks = np.stack([s.mask.as_array() for s in samples])
    if samples[0].label.kind == "classification":
        labels = np.array([s.label.class_index for s in samples], dtype=np.int64)
    else:
        labels = np.array([s.label.value for s in samples], dtype=np.float64)
    return feats, masks, labels
