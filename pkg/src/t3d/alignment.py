"""Training objectives: global contrastive alignment plus text-informed
multi-view cluster alignment.

The global term pulls each volume embedding toward its own report embedding
against in-batch negatives (softmax over dot products at temperature tau,
image-anchored by default). The multi-view term crops M local views per
volume, refines each view's token sequence with the report via cross
attention (queries are visual tokens, keys/values are unmasked text tokens),
pools, and classifies every refined view to its source pair's batch slot
through one shared linear head. Both losses are sums, not means, and both
use max-subtracted log-sum-exp stabilization; 1/tau is around 14, which
would overflow naive single-precision exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoders import (
    FeatureMap,
    ModelConfig,
    TextFeatures,
    encode_text,
    encode_volume,
    pool_project_visual,
    project_text,
)
from .errors import ConfigError, NonFiniteLossError, PreconditionError, ShapeError


@dataclass
class LossBreakdown:
    """Weighted loss terms; total is exactly their float sum."""

    gca: float
    tma: float
    total: float

    def __post_init__(self):
        if not (np.isfinite(self.gca) and np.isfinite(self.tma) and np.isfinite(self.total)):
            raise NonFiniteLossError(f"non-finite loss: gca={self.gca}, tma={self.tma}")
        if self.total != self.gca + self.tma:
            raise PreconditionError("total must equal gca + tma exactly")

    @classmethod
    def of(cls, gca: float, tma: float) -> "LossBreakdown":
        return cls(gca=gca, tma=tma, total=gca + tma)


def _as_tensor_rows(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    values = getattr(x, "values", x)
    return Tensor(np.asarray(values, dtype=np.float64))


def _check_normalized(name: str, t: Tensor) -> None:
    norms = np.sqrt((t.data * t.data).sum(axis=-1))
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise PreconditionError(f"{name} rows must be unit-norm for the contrastive loss")


def gca_loss(zv, zr, tau: float, symmetric: bool = False) -> Tensor:
    """Contrastive alignment over a batch of paired embeddings.

    -sum_i log softmax_j(sim(z^v_i, z^r_j)/tau) at j=i. Image-anchored by
    default; `symmetric` averages the image- and text-anchored directions.
    """
    zv, zr = _as_tensor_rows(zv), _as_tensor_rows(zr)
    if zv.ndim != 2 or zr.ndim != 2 or zv.shape != zr.shape:
        raise ShapeError(f"embedding batches must match, got {zv.shape} vs {zr.shape}")
    if zv.shape[0] < 1:
        raise ShapeError("batch must contain at least one pair")
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    _check_normalized("z^v", zv)
    _check_normalized("z^r", zr)
    b = zv.shape[0]
    diag = np.arange(b)
    sims = (zv @ zr.transpose(1, 0)) * (1.0 / tau)
    loss = -ad.log_softmax(sims, axis=-1)[diag, diag].sum()
    if symmetric:
        loss_t = -ad.log_softmax(sims.transpose(1, 0), axis=-1)[diag, diag].sum()
        loss = 0.5 * (loss + loss_t)
    return loss


# ---- text-informed fusion ----------------------------------------------------


def init_fusion_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    for l in range(cfg.fusion_layers):
        nn.init_attention(rng, cfg.d_f, cfg.d_r, cfg.d_f, f"fus.l{l}.attn", p)
        nn.init_layer_norm(f"fus.l{l}.ln1", cfg.d_f, p)
        nn.init_ffn(rng, cfg.d_f, 4 * cfg.d_f, f"fus.l{l}.ffn", p)
        nn.init_layer_norm(f"fus.l{l}.ln2", cfg.d_f, p)
    return p


def fuse_views(v_seq: Tensor, text: TextFeatures, params: dict, cfg: ModelConfig) -> Tensor:
    """Refine visual token sequences with their report and pool.

    v_seq: (B, M, L_v, d_f) visual tokens per view; text tokens (B, L_r, d_r)
    serve as keys/values for all M views of the same sample. Each layer is
    cross-attention then feed-forward, each with residual + layer norm; no
    visual self-attention and no positional encoding, so the output is
    invariant to visual-token order. Returns (B, M, d_f).
    """
    if v_seq.ndim != 4:
        raise ShapeError(f"expected (B, M, L_v, d_f) visual tokens, got {v_seq.shape}")
    if v_seq.shape[2] < 1:
        raise ShapeError("need at least one visual token")
    b, lr = text.mask.shape
    kv = text.tokens.reshape(b, 1, lr, text.tokens.shape[-1])
    h = v_seq
    for l in range(cfg.fusion_layers):
        pre = f"fus.l{l}"
        attended = nn.attention_block(h, kv, params, f"{pre}.attn",
                                      cfg.fusion_heads, key_mask=text.mask)
        h = nn.ln(h + attended, params, f"{pre}.ln1")
        h = nn.ln(h + nn.ffn(h, params, f"{pre}.ffn"), params, f"{pre}.ln2")
    return h.mean(axis=2)


def fuse_text_informed(v_seq: Tensor, text: TextFeatures, params: dict,
                       cfg: ModelConfig) -> Tensor:
    """Single-sample surface: (L_v, d_f) visual tokens -> fused (d_f,) vector."""
    v = _as_tensor_rows(v_seq)
    if v.ndim != 2:
        raise ShapeError(f"expected (L_v, d_f) visual tokens, got {v.shape}")
    fused = fuse_views(v.reshape(1, 1, *v.shape), text, params, cfg)
    return fused.reshape(v.shape[-1])


def flatten_feature_map(fmap: FeatureMap) -> Tensor:
    """(B, d_f, h, w, s) -> (B, L_v, d_f) token sequences, L_v = h*w*s."""
    b, d_f = fmap.values.shape[:2]
    return fmap.values.reshape(b, d_f, -1).transpose(0, 2, 1)


# ---- cluster head -----------------------------------------------------------------


def init_cluster_head(cfg: ModelConfig, b_max: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "cluster.w": nn.param(rng, (cfg.d_f, b_max), np.sqrt(1.0 / cfg.d_f)),
        "cluster.b": nn.zeros(b_max),
    }


def cluster_logits(z_hat, params: dict, active_b: int) -> Tensor:
    """Linear head truncated to the first active_b outputs."""
    b_max = params["cluster.w"].shape[1]
    if active_b > b_max:
        raise ConfigError(f"active batch {active_b} exceeds cluster head width {b_max}")
    if active_b < 1:
        raise ConfigError("active batch must be >= 1")
    z = _as_tensor_rows(z_hat)
    squeeze = z.ndim == 1
    if squeeze:
        z = z.reshape(1, -1)
    full = nn.linear(z, params["cluster.w"], params["cluster.b"])
    out = full[..., :active_b]
    return out.reshape(active_b) if squeeze else out


def tma_loss(logits, tau_tma: float) -> Tensor:
    """Cluster-assignment loss: view (i, m) must classify to slot i.

    -sum_i sum_m log softmax_j(logits[i, m, j]/tau)[i], stabilized.
    """
    t = _as_tensor_rows(logits)
    if t.ndim != 3:
        raise ShapeError(f"expected (B, M, B) logits, got {t.shape}")
    b, m, width = t.shape
    if width != b:
        raise ShapeError(f"logit width {width} must equal batch size {b}")
    if not np.all(np.isfinite(t.data)):
        raise PreconditionError("cluster logits must be finite")
    if tau_tma <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau_tma}")
    lsm = ad.log_softmax(t * (1.0 / tau_tma), axis=-1)
    rows = np.arange(b)[:, None]
    cols = np.arange(m)[None, :]
    return -lsm[rows, cols, rows].sum()


# ---- full objective ----------------------------------------------------------------


def total_loss(params: dict, cfg: ModelConfig, batch: dict, tau: float,
               tau_tma: float, gca_weight: float = 1.0, tma_weight: float = 1.0,
               symmetric_gca: bool = False) -> tuple[LossBreakdown, Tensor]:
    """One forward pass of both objectives on a complete batch.

    batch keys: "volumes" (B, 1, X, Y, Z), "views" (B, M, 1, x, y, z),
    "token_ids" and "token_mask" (B, L_r). A term with weight exactly 0 is
    skipped entirely, so its private parameters never enter the graph and
    receive no gradient and no optimizer update.
    """
    views = np.asarray(batch["views"], dtype=np.float64)
    volumes = np.asarray(batch["volumes"], dtype=np.float64)
    b = volumes.shape[0]
    if views.ndim != 6 or views.shape[0] != b:
        raise ShapeError(f"views must be (B, M, 1, x, y, z), got {views.shape}")
    m = views.shape[1]

    text = encode_text((batch["token_ids"], batch["token_mask"]), params, cfg)

    terms = []
    gca_val = 0.0
    if gca_weight != 0.0:
        fmap = encode_volume(volumes, params, cfg, provenance="global_volume")
        zv = pool_project_visual(fmap, params)
        zr = project_text(text.cls, params)
        gca_t = gca_loss(zv, zr, tau, symmetric=symmetric_gca) * gca_weight
        terms.append(gca_t)
        gca_val = gca_t.item()

    tma_val = 0.0
    if tma_weight != 0.0:
        vmap = encode_volume(views.reshape(b * m, *views.shape[2:]), params, cfg,
                             provenance="local_view")
        d_f = vmap.values.shape[1]
        tokens = vmap.values.reshape(b, m, d_f, -1).transpose(0, 1, 3, 2)
        if cfg.text_informing:
            z_hat = fuse_views(tokens, text, params, cfg)
        else:
            z_hat = tokens.mean(axis=2)
        logits = cluster_logits(z_hat, params, active_b=b)
        tma_t = tma_loss(logits, tau_tma) * tma_weight
        terms.append(tma_t)
        tma_val = tma_t.item()

    if not terms:
        raise ConfigError("at least one loss weight must be non-zero")
    loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return LossBreakdown.of(gca_val, tma_val), loss
