"""Pretraining loop: batching, AdamW, warmup + cosine schedule, checkpoints.

Determinism contract: given (seed, config, corpus), every run on one device
produces identical parameters, metrics values, corpora of views, and
checkpoints. All randomness is derived statelessly:

  * the batch partition comes from (seed, "partition") and is fixed for the
    whole run — batch membership and within-batch order never change across
    epochs, so the cluster label of a sample (its batch slot) is persistent
    and the multi-view cluster task is well-posed;
  * the order batches are visited in comes from (seed, "order", epoch);
  * the views of a sample come from (seed, "views", epoch, sample_index),
    independent of worker count.

The final incomplete batch is dropped, which keeps the cluster head width
equal to the live batch size.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import alignment, encoders, nn
from .alignment import LossBreakdown, total_loss
from .autodiff import Tensor
from .checkpoint import (
    CheckpointPayload,
    config_fingerprint,
    load_checkpoint,
    save_checkpoint,
)
from .corpus import Corpus, CorpusSample, load_corpus
from .encoders import ModelConfig
from .errors import ConfigError, DivergedRunError, NonFiniteLossError
from .volume import make_views

_TAG_PARTITION = 101
_TAG_ORDER = 202
_TAG_VIEWS = 303
_TAG_INIT = 404


@dataclass
class TrainConfig:
    """Optimization hyperparameters plus the architecture block.

    Paper-scale defaults where the protocol states them (lr 1e-3, cosine
    annealing with 5 warmup epochs out of 50, 3 views, tau 0.07); batch and
    volume geometry default to desk scale.
    """

    base_lr: float = 1e-3
    warmup_epochs: int = 5
    total_epochs: int = 50
    batch_size: int = 16
    views: int = 3
    crop_dims: tuple[int, int, int] = (16, 16, 8)
    tau: float = 0.07
    tau_tma: float = 0.07
    gca_weight: float = 1.0
    tma_weight: float = 1.0
    seed: int = 0
    freeze_text: bool = False
    symmetric_gca: bool = False
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    b_max: int = 0  # 0 means "equal to batch_size"
    checkpoint_every_epochs: int = 0  # 0 disables periodic checkpoints
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.crop_dims = tuple(int(c) for c in self.crop_dims)
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.total_epochs > 0 and not self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"warmup_epochs={self.warmup_epochs} must be < total_epochs={self.total_epochs}")
        if self.batch_size < 1 or self.views < 1:
            raise ConfigError("batch_size and views must be >= 1")
        if self.tma_weight > 0 and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when the cluster loss is active")
        if self.tau <= 0 or self.tau_tma <= 0:
            raise ConfigError("temperatures must be > 0")
        if len(self.crop_dims) != 3 or any(c < 1 for c in self.crop_dims):
            raise ConfigError(f"crop_dims must be 3 positive integers, got {self.crop_dims}")
        if self.b_max and self.b_max < self.batch_size:
            raise ConfigError(f"b_max={self.b_max} smaller than batch_size={self.batch_size}")

    @property
    def head_width(self) -> int:
        return self.b_max or self.batch_size

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "model":
                v = {mf.name: getattr(v, mf.name) for mf in fields(ModelConfig)}
                v["visual_channels"] = list(v["visual_channels"])
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        obj = dict(obj)
        if "model" in obj and isinstance(obj["model"], dict):
            mknown = {f.name for f in fields(ModelConfig)}
            munknown = set(obj["model"]) - mknown
            if munknown:
                raise ConfigError(f"unknown model config keys: {sorted(munknown)}")
        return cls(**obj)

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale defaults sized so a full pretraining run takes minutes on CPU."""
    base = dict(
        base_lr=3e-3,
        warmup_epochs=5,
        total_epochs=160,
        batch_size=16,
        views=3,
        crop_dims=(16, 16, 8),
        seed=0,
        model=ModelConfig(
            visual_channels=(8, 16, 32),
            blocks_per_stage=1,
            gn_groups=4,
            vocab_size=22,
            d_r=32,
            text_layers=2,
            text_heads=4,
            max_tokens=32,
            d_shared=32,
            fusion_layers=1,
            fusion_heads=4,
        ),
    )
    model_overrides = overrides.pop("model", None)
    base.update(overrides)
    if model_overrides is not None:
        base["model"] = model_overrides
    return TrainConfig(**base)


# ---- learning-rate schedule ------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then cosine annealing to 0; floor at 0."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return cfg.base_lr * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return cfg.base_lr * 0.5 * (1.0 + float(np.cos(np.pi * progress)))


# ---- optimizer ----------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Parameters whose gradient is absent for a step are skipped entirely:
    no moment update and no decay, so a loss path that is switched off
    leaves its private parameters bit-identical. Decay applies only to
    names `nn.decays` approves (weights and embeddings, not biases/norms).
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01, grad_clip: float = 1.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay, self.grad_clip = weight_decay, grad_clip
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    @classmethod
    def from_config(cls, cfg: "TrainConfig") -> "AdamW":
        return cls(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, cfg.grad_clip)

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        live = [(k, p) for k, p in params.items() if p.requires_grad and p.grad is not None]
        if self.grad_clip > 0:
            norm = np.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in live))
            scale = self.grad_clip / norm if norm > self.grad_clip else 1.0
        else:
            scale = 1.0
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in live:
            g = p.grad * scale
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay > 0 and nn.decays(name):
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self, params: dict[str, Tensor]) -> None:
        for p in params.values():
            p.grad = None


# ---- state ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: dict[str, Tensor]
    optimizer: AdamW
    step: int
    epoch: int
    rng: np.random.Generator
    fingerprint: str


def build_params(cfg: TrainConfig) -> dict[str, Tensor]:
    """All parameter groups from one seeded generator, in a fixed order."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TAG_INIT]))
    params = encoders.init_encoder_params(cfg.model, rng)
    params.update(alignment.init_fusion_params(cfg.model, rng))
    params.update(alignment.init_cluster_head(cfg.model, cfg.head_width, rng))
    if cfg.freeze_text:
        for name, p in params.items():
            if name.startswith("txt."):
                p.requires_grad = False
    return params


def init_state(cfg: TrainConfig) -> TrainState:
    return TrainState(
        params=build_params(cfg),
        optimizer=AdamW.from_config(cfg),
        step=0,
        epoch=0,
        rng=np.random.default_rng(cfg.seed),
        fingerprint=cfg.fingerprint(),
    )


def state_to_checkpoint(state: TrainState, cfg: TrainConfig, path) -> str:
    return save_checkpoint(
        path, cfg.to_dict(), state.step, state.epoch,
        state.rng.bit_generator.state, state.optimizer.t,
        state.params, state.optimizer.m, state.optimizer.v,
    )


def state_from_checkpoint(payload: CheckpointPayload, cfg: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    """Rebuild a TrainState; with a cfg given, refuse on fingerprint mismatch."""
    stored_cfg = TrainConfig.from_dict(payload.config)
    if cfg is not None and cfg.fingerprint() != payload.fingerprint:
        from .errors import RefuseToResumeError

        raise RefuseToResumeError(
            "refusing to resume: config fingerprint mismatch "
            f"({cfg.fingerprint()[:12]}... vs {payload.fingerprint[:12]}...)")
    cfg = cfg or stored_cfg
    params = build_params(cfg)
    if set(payload.params) != set(params):
        missing = sorted(set(params) - set(payload.params))
        extra = sorted(set(payload.params) - set(params))
        raise ConfigError(f"checkpoint tensors do not match architecture "
                          f"(missing {missing[:3]}, extra {extra[:3]})")
    for name, arr in payload.params.items():
        if params[name].data.shape != arr.shape:
            raise ConfigError(f"checkpoint tensor {name!r} has shape {arr.shape}, "
                              f"expected {params[name].data.shape}")
        params[name].data = arr.copy()
    optimizer = AdamW.from_config(cfg)
    optimizer.m = {k: v.copy() for k, v in payload.opt_m.items()}
    optimizer.v = {k: v.copy() for k, v in payload.opt_v.items()}
    optimizer.t = payload.opt_t
    rng = np.random.default_rng()
    rng.bit_generator.state = payload.rng_state
    state = TrainState(params=params, optimizer=optimizer, step=payload.step,
                       epoch=payload.epoch, rng=rng, fingerprint=payload.fingerprint)
    return state, cfg


def resume_from(path, cfg: TrainConfig) -> TrainState:
    state, _ = state_from_checkpoint(load_checkpoint(path), cfg)
    return state


# ---- batching --------------------------------------------------------------------------


def _derive_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def build_partition(cfg: TrainConfig, n_train: int) -> list[list[int]]:
    """Fixed batch membership for the whole run; the remainder is dropped."""
    order = _derive_rng(cfg.seed, _TAG_PARTITION).permutation(n_train)
    n_batches = n_train // cfg.batch_size
    return [[int(i) for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            for b in range(n_batches)]


def views_rng(cfg: TrainConfig, epoch: int, sample_index: int) -> np.random.Generator:
    """Per-sample, per-epoch view generator; independent of worker count."""
    return _derive_rng(cfg.seed, _TAG_VIEWS, epoch, sample_index)


class Trainer:
    """Owns the fixed batch partition and performs optimization steps."""

    def __init__(self, cfg: TrainConfig, corpus: Corpus, state: TrainState | None = None):
        self.cfg = cfg
        self.corpus = corpus
        self.train_samples: list[CorpusSample] = corpus.split("train")
        if len(self.train_samples) < cfg.batch_size:
            raise ConfigError(
                f"need at least batch_size={cfg.batch_size} train samples, "
                f"got {len(self.train_samples)}")
        self.steps_per_epoch = len(self.train_samples) // cfg.batch_size
        self.batches = build_partition(cfg, len(self.train_samples))
        self.state = state if state is not None else init_state(cfg)
        self._order_cache: dict[int, list[int]] = {}
        raw_workers = os.environ.get("T3D_NUM_WORKERS", "1") or "1"
        try:
            self.workers = max(1, int(raw_workers))
        except ValueError as e:
            raise ConfigError(f"T3D_NUM_WORKERS must be an integer, got {raw_workers!r}") from e

    # -- batch assembly ------------------------------------------------------------

    def batch_order(self, epoch: int) -> list[int]:
        if epoch not in self._order_cache:
            rng = _derive_rng(self.cfg.seed, _TAG_ORDER, epoch)
            self._order_cache = {epoch: [int(i) for i in rng.permutation(self.steps_per_epoch)]}
        return self._order_cache[epoch]

    def batch_for_step(self, step: int) -> dict:
        epoch = step // self.steps_per_epoch
        batch_idx = self.batch_order(epoch)[step % self.steps_per_epoch]
        return self.make_batch(batch_idx, epoch)

    def make_batch(self, batch_idx: int, epoch: int) -> dict:
        """Assemble raw arrays for one fixed batch with epoch-fresh views."""
        cfg = self.cfg
        members = self.batches[batch_idx]
        samples = [self.train_samples[i] for i in members]
        volumes = np.stack([s.volume.voxels for s in samples]).astype(np.float64)[:, None]
        views = np.empty((len(samples), cfg.views, 1) + cfg.crop_dims)
        for row, (i, s) in enumerate(zip(members, samples)):
            rng = views_rng(cfg, epoch, i)
            for m, view in enumerate(make_views(s.volume, cfg.views, cfg.crop_dims, rng)):
                views[row, m, 0] = view.voxels
        ids = np.stack([s.tokens.ids for s in samples])
        mask = np.stack([s.tokens.mask for s in samples])
        return {"volumes": volumes, "views": views, "token_ids": ids,
                "token_mask": mask, "members": members}

    # -- optimization ----------------------------------------------------------------

    def train_step(self, batch: dict) -> LossBreakdown:
        """Forward, backward, clip, AdamW update at the scheduled rate."""
        cfg = self.cfg
        state = self.state
        lr = lr_at(state.step, cfg, self.steps_per_epoch)
        self.state.optimizer.zero_grad(state.params)
        try:
            breakdown, loss = total_loss(
                state.params, cfg.model, batch, cfg.tau, cfg.tau_tma,
                gca_weight=cfg.gca_weight, tma_weight=cfg.tma_weight,
                symmetric_gca=cfg.symmetric_gca)
        except NonFiniteLossError as e:
            raise DivergedRunError(state.step, f"{e} (step {state.step})") from e
        loss.backward()
        state.optimizer.step(state.params, lr)
        state.step += 1
        state.epoch = state.step // self.steps_per_epoch
        return breakdown

    def run(self, out_dir, clock=None, log_file=None) -> "PretrainResult":
        """Loop to total_epochs, logging one JSONL record per step."""
        cfg = self.cfg
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        clock = clock or time.monotonic
        metrics_path = Path(log_file) if log_file else out / "metrics.jsonl"
        total_steps = cfg.total_epochs * self.steps_per_epoch
        mode = "a" if self.state.step > 0 else "w"
        pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        try:
            pending = None
            with open(metrics_path, mode, encoding="utf-8") as log:
                while self.state.step < total_steps:
                    step = self.state.step
                    epoch = step // self.steps_per_epoch
                    t0 = clock()
                    if pool is not None:
                        fut = pending or pool.submit(self.batch_for_step, step)
                        pending = pool.submit(self.batch_for_step, step + 1) \
                            if step + 1 < total_steps else None
                        batch = fut.result()
                    else:
                        batch = self.batch_for_step(step)
                    lr = lr_at(step, cfg, self.steps_per_epoch)
                    breakdown = self.train_step(batch)
                    wall_ms = (clock() - t0) * 1000.0
                    log.write(json.dumps({
                        "step": step, "epoch": epoch, "lr": lr,
                        "gca": breakdown.gca, "tma": breakdown.tma,
                        "total": breakdown.total, "wall_ms": wall_ms,
                    }))
                    log.write("\n")
                    done = self.state.step
                    if (cfg.checkpoint_every_epochs > 0
                            and done % self.steps_per_epoch == 0
                            and (done // self.steps_per_epoch) % cfg.checkpoint_every_epochs == 0
                            and done < total_steps):
                        state_to_checkpoint(self.state, cfg,
                                            out / f"ckpt-step{done:06d}.t3dk")
        finally:
            if pool is not None:
                pool.shutdown(wait=False)
        final_path = out / "ckpt-final.t3dk"
        state_to_checkpoint(self.state, cfg, final_path)
        return PretrainResult(checkpoint_path=final_path, metrics_path=metrics_path,
                              state=self.state, steps_per_epoch=self.steps_per_epoch)


@dataclass
class PretrainResult:
    checkpoint_path: Path
    metrics_path: Path
    state: TrainState
    steps_per_epoch: int


def run_pretraining(cfg: TrainConfig, manifest_path, out_dir, clock=None,
                    resume: str | None = None) -> PretrainResult:
    """Load the corpus, train to total_epochs, write checkpoints and metrics."""
    corpus = load_corpus(manifest_path, cfg.model.max_tokens)
    state = resume_from(resume, cfg) if resume else None
    trainer = Trainer(cfg, corpus, state=state)
    return trainer.run(out_dir, clock=clock)
