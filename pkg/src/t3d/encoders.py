"""Paired encoders: a 3D residual conv backbone and a small text transformer.

The visual encoder maps (B, 1, X, Y, Z) volumes to (B, d_f, h, w, s) feature
maps through stride-2 stages (spatial dims shrink by 2 per stage, so three
stages divide each axis by 8). The text encoder maps padded token ids to
per-token features plus a CLS vector. Both feed learnable projections into a
shared embedding space, L2-normalized so dot products are cosines.

One parameter dict serves full volumes and local views alike; there is no
separate view encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, PreconditionError, ShapeError, VocabError
from .text import TokenSequence
from .volume import Volume


@dataclass
class ModelConfig:
    """Architecture knobs shared by encoders, fusion, and the cluster head."""

    visual_channels: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 1
    gn_groups: int = 4
    vocab_size: int = 32
    d_r: int = 32
    text_layers: int = 2
    text_heads: int = 4
    max_tokens: int = 32
    d_shared: int = 768
    fusion_layers: int = 1
    fusion_heads: int = 4
    text_informing: bool = True

    def __post_init__(self):
        self.visual_channels = tuple(int(c) for c in self.visual_channels)
        if not self.visual_channels:
            raise ConfigError("visual_channels must name at least one stage")
        for c in self.visual_channels:
            if c < 1 or c % self.gn_groups:
                raise ConfigError(f"stage width {c} must be a positive multiple of gn_groups={self.gn_groups}")
        if self.d_r % self.text_heads:
            raise ConfigError(f"d_r={self.d_r} must be divisible by text_heads={self.text_heads}")
        if self.d_f % self.fusion_heads:
            raise ConfigError(f"d_f={self.d_f} must be divisible by fusion_heads={self.fusion_heads}")
        for name in ("blocks_per_stage", "vocab_size", "d_r", "text_layers", "text_heads",
                     "max_tokens", "d_shared", "fusion_layers", "fusion_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def d_f(self) -> int:
        return self.visual_channels[-1]

    @property
    def stride_product(self) -> int:
        return 2 ** len(self.visual_channels)


@dataclass
class FeatureMap:
    """Batched rank-4 visual features: values has shape (B, d_f, h, w, s)."""

    values: Tensor
    provenance: str = "global_volume"

    def __post_init__(self):
        if self.values.ndim != 5:
            raise ShapeError(f"feature map must be (B, d_f, h, w, s), got {self.values.shape}")
        if self.provenance not in ("global_volume", "local_view"):
            raise ConfigError(f"unknown provenance {self.provenance!r}")
        if not np.all(np.isfinite(self.values.data)):
            raise PreconditionError("feature map contains non-finite entries")

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.values.shape[2:]


@dataclass
class TextFeatures:
    """Per-token features (B, L, d_r), the CLS rows (B, d_r), and the mask."""

    tokens: Tensor
    cls: Tensor
    mask: np.ndarray


@dataclass
class EmbeddingBatch:
    """Rows in the shared space; `normalized` asserts unit row norms."""

    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"embeddings must be rank-2, got {self.values.shape}")
        if self.normalized:
            norms = np.linalg.norm(self.values, axis=1)
            if self.values.shape[1] and not np.allclose(norms, 1.0, atol=1e-6):
                raise PreconditionError("embedding rows are not unit-norm")


# ---- initialization -----------------------------------------------------------


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Truncated-normal weights, zero biases, unit norm gains, fixed seed via rng."""
    p: dict[str, Tensor] = {}
    c_prev = 1
    for i, c in enumerate(cfg.visual_channels):
        he = np.sqrt(2.0 / (c_prev * 27))
        p[f"vis.stage{i}.down.w"] = nn.param(rng, (c, c_prev, 3, 3, 3), he)
        nn.init_layer_norm(f"vis.stage{i}.down.gn", c, p)
        for j in range(cfg.blocks_per_stage):
            he_c = np.sqrt(2.0 / (c * 27))
            p[f"vis.stage{i}.block{j}.conv1.w"] = nn.param(rng, (c, c, 3, 3, 3), he_c)
            nn.init_layer_norm(f"vis.stage{i}.block{j}.gn1", c, p)
            p[f"vis.stage{i}.block{j}.conv2.w"] = nn.param(rng, (c, c, 3, 3, 3), he_c)
            nn.init_layer_norm(f"vis.stage{i}.block{j}.gn2", c, p)
        c_prev = c

    p["txt.tok_emb"] = nn.param(rng, (cfg.vocab_size, cfg.d_r), 0.02)
    p["txt.pos_emb"] = nn.param(rng, (cfg.max_tokens, cfg.d_r), 0.02)
    for l in range(cfg.text_layers):
        nn.init_layer_norm(f"txt.l{l}.ln1", cfg.d_r, p)
        nn.init_attention(rng, cfg.d_r, cfg.d_r, cfg.d_r, f"txt.l{l}.attn", p)
        nn.init_layer_norm(f"txt.l{l}.ln2", cfg.d_r, p)
        nn.init_ffn(rng, cfg.d_r, 4 * cfg.d_r, f"txt.l{l}.ffn", p)
    nn.init_layer_norm("txt.ln_f", cfg.d_r, p)

    p["proj.visual.w"] = nn.param(rng, (cfg.d_f, cfg.d_shared), np.sqrt(1.0 / cfg.d_f))
    p["proj.visual.b"] = nn.zeros(cfg.d_shared)
    p["proj.text.w"] = nn.param(rng, (cfg.d_r, cfg.d_shared), np.sqrt(1.0 / cfg.d_r))
    p["proj.text.b"] = nn.zeros(cfg.d_shared)
    return p


# ---- visual path ---------------------------------------------------------------


def volumes_to_batch(volumes) -> np.ndarray:
    """Stack Volumes into a (B, 1, X, Y, Z) float64 batch, validating inputs."""
    vols = list(volumes)
    if not vols:
        raise ShapeError("empty volume batch")
    dims = {v.dims for v in vols}
    if len(dims) != 1:
        raise ShapeError(f"volumes in a batch must share dims, got {sorted(dims)}")
    if not all(v.unit_range for v in vols):
        raise PreconditionError("volumes must be normalized to [0, 1] before encoding")
    return np.stack([v.voxels for v in vols]).astype(np.float64)[:, None]


def _as_volume_array(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        if batch.ndim == 4:
            batch = batch[:, None]
        if batch.ndim != 5 or batch.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, X, Y, Z) volumes, got {batch.shape}")
        lo, hi = float(batch.min()), float(batch.max())
        if lo < 0.0 or hi > 1.0:
            raise PreconditionError(f"volume intensities must lie in [0, 1], got [{lo}, {hi}]")
        return batch.astype(np.float64)
    if len(batch) and isinstance(batch[0], Volume):
        return volumes_to_batch(batch)
    raise ShapeError("encode_volume expects an array batch or a sequence of Volumes")


def encode_volume(batch, params: dict, cfg: ModelConfig,
                  provenance: str = "global_volume") -> FeatureMap:
    """Run the shared conv backbone; spatial dims shrink by the stride product."""
    x = Tensor(_as_volume_array(batch))
    h = x
    for i, _c in enumerate(cfg.visual_channels):
        h = ad.conv3d(h, params[f"vis.stage{i}.down.w"], stride=2, padding=1)
        h = nn.group_norm(h, params[f"vis.stage{i}.down.gn.gain"],
                          params[f"vis.stage{i}.down.gn.bias"], cfg.gn_groups)
        h = ad.gelu(h)
        for j in range(cfg.blocks_per_stage):
            pre = f"vis.stage{i}.block{j}"
            r = h
            h = ad.conv3d(h, params[f"{pre}.conv1.w"], stride=1, padding=1)
            h = nn.group_norm(h, params[f"{pre}.gn1.gain"], params[f"{pre}.gn1.bias"],
                              cfg.gn_groups)
            h = ad.gelu(h)
            h = ad.conv3d(h, params[f"{pre}.conv2.w"], stride=1, padding=1)
            h = nn.group_norm(h, params[f"{pre}.gn2.gain"], params[f"{pre}.gn2.bias"],
                              cfg.gn_groups)
            h = ad.gelu(h + r)
    return FeatureMap(h, provenance)


def pool_project_visual(fmap: FeatureMap, params: dict) -> Tensor:
    """Spatial average pool, linear projection to the shared space, L2 norm."""
    pooled = fmap.values.mean(axis=(2, 3, 4))
    projected = nn.linear(pooled, params["proj.visual.w"], params["proj.visual.b"])
    return nn.l2_normalize(projected)


# ---- text path -------------------------------------------------------------------


def sequences_to_batch(seqs) -> tuple[np.ndarray, np.ndarray]:
    seqs = list(seqs)
    if not seqs:
        raise ShapeError("empty token batch")
    if len({len(s) for s in seqs}) != 1:
        raise ShapeError("token sequences in a batch must share length")
    ids = np.stack([s.ids for s in seqs])
    mask = np.stack([s.mask for s in seqs])
    return ids, mask


def encode_text(batch, params: dict, cfg: ModelConfig) -> TextFeatures:
    """Token + position embeddings through masked pre-LN transformer layers."""
    if isinstance(batch, tuple):
        ids, mask = batch
    else:
        ids, mask = sequences_to_batch(batch)
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise VocabError(f"token ids must lie in [0, {cfg.vocab_size})")
    if ids.shape[1] > cfg.max_tokens:
        raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_tokens={cfg.max_tokens}")

    h = ad.embedding(params["txt.tok_emb"], ids) + params["txt.pos_emb"][: ids.shape[1]]
    for l in range(cfg.text_layers):
        pre = f"txt.l{l}"
        normed = nn.ln(h, params, f"{pre}.ln1")
        h = h + nn.attention_block(normed, normed, params, f"{pre}.attn",
                                   cfg.text_heads, key_mask=mask)
        h = h + nn.ffn(nn.ln(h, params, f"{pre}.ln2"), params, f"{pre}.ffn")
    h = nn.ln(h, params, "txt.ln_f")
    cls = h[:, 0]
    return TextFeatures(tokens=h, cls=cls, mask=mask)


def project_text(cls: Tensor, params: dict) -> Tensor:
    """Linear map of the CLS vector into the shared space, L2-normalized."""
    projected = nn.linear(cls, params["proj.text.w"], params["proj.text.b"])
    return nn.l2_normalize(projected)


def embed_token_batch(token_seqs, params: dict, cfg: ModelConfig) -> Tensor:
    feats = encode_text(token_seqs, params, cfg)
    return project_text(feats.cls, params)
