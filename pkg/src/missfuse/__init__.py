"""Missing-modality robust multimodal fusion.

A desk-scale teacher-student distillation pipeline for multimodal
classification/regression under heterogeneous missing-modality conditions:
synthetic multimodal data, fixed/random missing protocols, a
conv + cross-attention + transformer fusion backbone with a variational
bottleneck, combination-and-class contrastive learning, uncertainty-gated
distillation, and a 14-scenario evaluation suite with calibration metrics.
"""

__version__ = "0.1.0"

from .datamodel import (
    AvailabilityMask,
    CombinationId,
    Label,
    ModalityTensor,
    Sample,
    combination_id,
    compute_mr,
    decode_combination,
)

__all__ = [
    "AvailabilityMask",
    "CombinationId",
    "Label",
    "ModalityTensor",
    "Sample",
    "combination_id",
    "compute_mr",
    "decode_combination",
    "__version__",
]
