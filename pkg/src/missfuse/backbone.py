"""Shared teacher/student network.

Per modality: a kernel-3 1D convolution plus linear time resampling maps the
raw (t_p, d_p) sequence to a common (T, D) shape, then learnable prompt
vectors cross-attend to it and the prompt outputs of the final layer are
averaged into one D-vector. The m modality vectors pass through a small
transformer encoder and a two-layer MLP into a fused embedding, which a
variational bottleneck compresses (mu/sigma heads, reparameterized sample)
before an affine classifier produces logits.

Missing modalities are zero-filled at the input; the conv bias then acts as a
learned placeholder token. All modules run in float64 on CPU.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    m: int
    feat_dims: tuple[int, ...]
    common_len: int
    common_dim: int
    prompt_lens: tuple[int, ...]
    encoder_layers: int = 2
    fusion_layers: int = 2
    fusion_heads: int = 2
    output_dim: int = 1
    task: str = "classification"
    role: str = "teacher"
    fusion_relu: bool = True
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feat_dims", tuple(self.feat_dims))
        object.__setattr__(self, "prompt_lens", tuple(self.prompt_lens))
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if len(self.feat_dims) != self.m or len(self.prompt_lens) != self.m:
            raise ValueError("feat_dims and prompt_lens must have length m")
        if self.common_len < 1 or self.common_dim < 1:
            raise ValueError("common_len and common_dim must be >= 1")
        if any(l < 1 for l in self.prompt_lens):
            raise ValueError("prompt lengths must be >= 1")
        if self.common_dim % self.fusion_heads != 0:
            raise ValueError("common_dim must be divisible by fusion_heads")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.output_dim < 2:
            raise ValueError("classification needs output_dim >= 2")
        if self.task == "regression" and self.output_dim != 1:
            raise ValueError("regression needs output_dim == 1")
        if self.role not in ("teacher", "student"):
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class FusionOutput:
    """All intermediate and final tensors of one forward pass."""

    encoded: torch.Tensor    # (B, m, D) per-modality prompt-averaged features
    fused: torch.Tensor      # (B, D) pre-bottleneck embedding
    mu: torch.Tensor         # (B, D)
    sigma: torch.Tensor      # (B, D), strictly positive
    code: torch.Tensor       # (B, D) bottleneck sample (== mu in mean mode)
    embedding: torch.Tensor  # (B, D) final embedding used by losses (== code)
    logits: torch.Tensor     # (B, K) or (B, 1)


class TemporalStandardizer(nn.Module):
    """Kernel-3 same-padded conv, then linear resampling of time to a fixed T."""

    def __init__(self, in_dim: int, out_dim: int, out_len: int):
        super().__init__()
        self.conv = nn.Conv1d(in_dim, out_dim, kernel_size=3, padding=1)
        self.out_len = out_len

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, t, d) -> (B, T, D)
        if x.shape[1] < 1:
            raise ValueError("sequence length must be >= 1")
        h = self.conv(x.transpose(1, 2))
        t = h.shape[-1]
        if t != self.out_len:
            if t == 1:
                h = h.expand(-1, -1, self.out_len)
            else:
                h = F.interpolate(h, size=self.out_len, mode="linear", align_corners=True)
        return h.transpose(1, 2)


class PromptCrossAttention(nn.Module):
    """Single-head cross-attention: query/key projections compose on the score path."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.scale = dim ** -0.5

    def forward(self, queries: torch.Tensor, feats: torch.Tensor, return_attn: bool = False):
        # queries: (B, l, D), feats: (B, T, D)
        scores = self.w_q(queries) @ self.w_k(feats).transpose(-1, -2) * self.scale
        attn = torch.softmax(scores, dim=-1)
        out = attn @ self.w_v(feats)
        if return_attn:
            return out, attn
        return out


class PerceiverEncoder(nn.Module):
    """Learnable prompts iteratively cross-attend to one modality's features.

    The final layer's prompt outputs are averaged into a single D-vector.
    """

    def __init__(self, dim: int, prompt_len: int, num_layers: int):
        super().__init__()
        self.prompts = nn.Parameter(torch.randn(prompt_len, dim) * dim ** -0.5)
        self.layers = nn.ModuleList(PromptCrossAttention(dim) for _ in range(num_layers))

    def forward(self, feats: torch.Tensor, return_attn: bool = False):
        if not torch.isfinite(feats).all():
            raise ValueError("non-finite values in encoder input")
        q = self.prompts.unsqueeze(0).expand(feats.shape[0], -1, -1)
        attns = []
        for layer in self.layers:
            q, attn = layer(q, feats, return_attn=True)
            attns.append(attn)
        pooled = q.mean(dim=1)
        if return_attn:
            return pooled, attns
        return pooled


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer (multi-head self-attention + FFN)."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 2):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.w_o = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim),
            nn.ReLU(),
            nn.Linear(ff_mult * dim, dim),
        )

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape

        def split(t):
            return t.view(b, s, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.w_q(x)), split(self.w_k(x)), split(self.w_v(x))
        scores = q @ k.transpose(-1, -2) * self.head_dim ** -0.5
        out = torch.softmax(scores, dim=-1) @ v
        return self.w_o(out.transpose(1, 2).reshape(b, s, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self._attend(x))
        return self.norm2(x + self.ff(x))


class FusionHead(nn.Module):
    """Transformer encoder over the m modality tokens, then a two-layer MLP.

    The MLP acts on the concatenation of all token outputs, so the fusion is
    not (and is not claimed to be) invariant to modality order.
    """

    def __init__(self, dim: int, m: int, num_layers: int, heads: int, relu: bool = True):
        super().__init__()
        self.m = m
        self.encoder = nn.ModuleList(EncoderLayer(dim, heads) for _ in range(num_layers))
        self.mix1 = nn.Linear(m * dim, dim)
        self.mix2 = nn.Linear(dim, dim)
        self.relu = relu

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] != self.m:
            raise ValueError(f"expected {self.m} modality tokens, got {tokens.shape[1]}")
        for layer in self.encoder:
            tokens = layer(tokens)
        h = self.mix1(tokens.flatten(1))
        if self.relu:
            h = F.relu(h)
        return self.mix2(h)


class BottleneckHead(nn.Module):
    """Variational bottleneck: affine mu head plus a log-variance head.

    The log-variance is clamped to [-10, 10] so sigma = exp(logvar / 2) stays
    strictly positive and finite.
    """

    LOGVAR_RANGE = 10.0

    def __init__(self, dim: int):
        super().__init__()
        self.mu_head = nn.Linear(dim, dim)
        self.logvar_head = nn.Linear(dim, dim)

    def forward(
        self,
        fused: torch.Tensor,
        mode: str = "mean",
        generator: torch.Generator | None = None,
        noise: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        mu = self.mu_head(fused)
        logvar = self.logvar_head(fused)
        if not torch.isfinite(logvar).all():
            raise ValueError("non-finite bottleneck scale parameterization")
        logvar = logvar.clamp(-self.LOGVAR_RANGE, self.LOGVAR_RANGE)
        sigma = torch.exp(0.5 * logvar)
        if mode == "mean":
            code = mu
        elif mode == "sample":
            if noise is None:
                noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            code = mu + noise * sigma
        else:
            raise ValueError(f"unknown bottleneck mode {mode!r}")
        return mu, sigma, code


def vib_kl(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(N(mu, sigma^2 I) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)."""
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    return 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma)).sum(dim=-1)


class MultimodalBackbone(nn.Module):
    """Full network: standardize -> encode per modality -> fuse -> bottleneck -> classify."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.common_dim
        self.standardizers = nn.ModuleList(
            TemporalStandardizer(config.feat_dims[p], d, config.common_len) for p in range(config.m)
        )
        self.encoders = nn.ModuleList(
            PerceiverEncoder(d, config.prompt_lens[p], config.encoder_layers) for p in range(config.m)
        )
        self.fusion = FusionHead(d, config.m, config.fusion_layers, config.fusion_heads, config.fusion_relu)
        self.bottleneck = BottleneckHead(d)
        self.classifier = nn.Linear(d, config.output_dim)

    def forward(
        self,
        feats: Sequence[torch.Tensor],
        mask: torch.Tensor,
        mode: str = "mean",
        generator: torch.Generator | None = None,
        noise: torch.Tensor | None = None,
    ) -> FusionOutput:
        if len(feats) != self.config.m:
            raise ValueError(f"expected {self.config.m} modality tensors, got {len(feats)}")
        mask = mask.to(feats[0].dtype)
        tokens = []
        for p in range(self.config.m):
            x = feats[p] * mask[:, p].view(-1, 1, 1)
            tokens.append(self.encoders[p](self.standardizers[p](x)))
        encoded = torch.stack(tokens, dim=1)
        fused = self.fusion(encoded)
        mu, sigma, code = self.bottleneck(fused, mode=mode, generator=generator, noise=noise)
        logits = self.classifier(code)
        return FusionOutput(
            encoded=encoded, fused=fused, mu=mu, sigma=sigma, code=code,
            embedding=code, logits=logits,
        )


def build_backbone(config: BackboneConfig) -> MultimodalBackbone:
    """Construct a backbone with seeded initialization, in float64."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.init_seed)
        model = MultimodalBackbone(config)
    return model.double()


# ---------------------------------------------------------------------------
# Checkpoint format: flat binary parameter arrays + JSON manifest.
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    backbone: BackboneConfig
    role: str
    epoch: int
    rng_state: str = ""
    train_config: dict | None = None
    tool_version: str = ""

    def build_model(self) -> MultimodalBackbone:
        model = build_backbone(self.backbone)
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.params.items()}
        model.load_state_dict(state)
        return model

    def param_bytes(self) -> bytes:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name]).tobytes())
        return digest.digest()


def checkpoint_from_model(
    model: MultimodalBackbone,
    epoch: int,
    rng_state: str = "",
    train_config: dict | None = None,
) -> Checkpoint:
    from . import __version__

    params = {name: t.detach().cpu().numpy().copy() for name, t in model.state_dict().items()}
    return Checkpoint(
        params=params,
        backbone=model.config,
        role=model.config.role,
        epoch=epoch,
        rng_state=rng_state,
        train_config=train_config,
        tool_version=__version__,
    )


def save_checkpoint(ckpt: Checkpoint, dirpath: str | Path) -> Path:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name])
        fname = name.replace(".", "__") + ".bin"
        arr.tofile(dirpath / fname)
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "role": ckpt.role,
        "epoch": ckpt.epoch,
        "backbone": asdict(ckpt.backbone),
        "train_config": ckpt.train_config,
        "rng_state": ckpt.rng_state,
        "tool_version": ckpt.tool_version,
        "params": entries,
    }
    (dirpath / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return dirpath


def load_checkpoint(dirpath: str | Path) -> Checkpoint:
    dirpath = Path(dirpath)
    manifest = json.loads((dirpath / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    cfg_dict = dict(manifest["backbone"])
    cfg_dict["feat_dims"] = tuple(cfg_dict["feat_dims"])
    cfg_dict["prompt_lens"] = tuple(cfg_dict["prompt_lens"])
    backbone = BackboneConfig(**cfg_dict)
    params = {}
    for name, entry in manifest["params"].items():
        arr = np.fromfile(dirpath / entry["file"], dtype=np.dtype(entry["dtype"]))
        params[name] = arr.reshape(entry["shape"])
    return Checkpoint(
        params=params,
        backbone=backbone,
        role=manifest["role"],
        epoch=manifest["epoch"],
        rng_state=manifest.get("rng_state", ""),
        train_config=manifest.get("train_config"),
        tool_version=manifest.get("tool_version", ""),
    )
