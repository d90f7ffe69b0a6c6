"""Downstream protocols over a frozen checkpoint: zero-shot prompt
classification, bidirectional retrieval, a linear probe, and exact metrics.

All operations are pure given the checkpoint, so reports are byte-identical
across reruns. AUC uses the rank-statistic (Mann-Whitney) formulation with
tie averaging, which matches an exhaustive pairwise comparison exactly.
Retrieval breaks similarity ties toward the lower candidate index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import cluster_logits, fuse_views
from .autodiff import Tensor
from .checkpoint import checkpoint_hash, load_checkpoint
from .corpus import Corpus, CorpusSample
from .encoders import (
    EmbeddingBatch,
    encode_text,
    encode_volume,
    pool_project_visual,
    project_text,
)
from .errors import (
    DegenerateLabelsError,
    PreconditionError,
    PromptError,
    ShapeError,
)
from .text import Vocabulary, split_words, tokenize
from .volume import make_views


# ---- model wrapper -------------------------------------------------------------


@dataclass
class AlignedModel:
    """Frozen parameters plus the config they were trained with."""

    params: dict
    cfg: "TrainConfig"
    source_hash: str | None = None

    @classmethod
    def from_checkpoint(cls, path) -> "AlignedModel":
        from .training import TrainConfig, state_from_checkpoint

        payload = load_checkpoint(path)
        state, cfg = state_from_checkpoint(payload)
        return cls(params=state.params, cfg=cfg, source_hash=checkpoint_hash(path))

    def embed_volumes(self, volumes, batch_size: int = 32) -> EmbeddingBatch:
        vols = list(volumes)
        rows = []
        with ad.no_grad():
            for i in range(0, len(vols), batch_size):
                fmap = encode_volume(vols[i:i + batch_size], self.params, self.cfg.model)
                rows.append(pool_project_visual(fmap, self.params).data)
        return EmbeddingBatch(np.concatenate(rows), normalized=True)

    def embed_texts(self, texts, vocab: Vocabulary) -> EmbeddingBatch:
        seqs = [tokenize(t, vocab, self.cfg.model.max_tokens) for t in texts]
        with ad.no_grad():
            feats = encode_text(seqs, self.params, self.cfg.model)
            z = project_text(feats.cls, self.params)
        return EmbeddingBatch(z.data, normalized=True)


# ---- metrics --------------------------------------------------------------------


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their run."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _binary_metrics(scores: np.ndarray, labels: np.ndarray) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must align")
    if not np.all(np.isfinite(scores)):
        raise PreconditionError("scores must be finite")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    preds = scores >= 0.5
    tp = int(np.sum(preds & pos))
    fp = int(np.sum(preds & ~pos))
    fn = int(np.sum(~preds & pos))
    tn = int(np.sum(~preds & ~pos))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    acc = (tp + tn) / scores.size
    if n_pos and n_neg:
        ranks = _average_ranks(scores)
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    else:
        auc = None
    return {"precision": precision, "auc": auc, "acc": acc, "f1": f1}


def compute_metrics(scores, labels) -> dict:
    """Precision/AUC/ACC/F1 at threshold 0.5; macro-averaged when 2-D.

    Single-class label columns get auc=None (flagged in "errors") while the
    threshold metrics are still returned; macro AUC averages the defined
    columns only.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        out = _binary_metrics(scores, labels)
        if out["auc"] is None:
            out["errors"] = ["auc undefined: labels are single-class"]
        return out
    if scores.ndim != 2:
        raise ShapeError(f"scores must be 1-D or 2-D, got {scores.shape}")
    per = {f"attr{j}": _binary_metrics(scores[:, j], labels[:, j])
           for j in range(scores.shape[1])}
    return _macro_average(per)


def _macro_average(per_attribute: dict[str, dict]) -> dict:
    keys = ("precision", "acc", "f1")
    out = {k: float(np.mean([m[k] for m in per_attribute.values()])) for k in keys}
    aucs = [m["auc"] for m in per_attribute.values() if m["auc"] is not None]
    out["auc"] = float(np.mean(aucs)) if aucs else None
    undefined = sorted(a for a, m in per_attribute.items() if m["auc"] is None)
    if undefined:
        out["errors"] = [f"auc undefined for single-class attributes: {undefined}"]
    out["per_attribute"] = per_attribute
    return out


# ---- retrieval ---------------------------------------------------------------------


def _partner_ranks(sims: np.ndarray) -> np.ndarray:
    """Rank of the true partner per query row; ties favor lower index."""
    n = sims.shape[0]
    true = sims[np.arange(n), np.arange(n)]
    better = (sims > true[:, None]).sum(axis=1)
    tied_before = ((sims == true[:, None])
                   & (np.arange(n)[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return better + tied_before


def retrieval_eval(zv, zr, ks) -> dict:
    """Recall@K for both directions from cosine similarities.

    Returns {"image_to_text": {"R@k": ...}, "text_to_image": {"R@k": ...}}.
    """
    zv = zv.values if isinstance(zv, EmbeddingBatch) else np.asarray(zv, dtype=np.float64)
    zr = zr.values if isinstance(zr, EmbeddingBatch) else np.asarray(zr, dtype=np.float64)
    if zv.shape != zr.shape:
        raise ShapeError(f"embedding sets must match, got {zv.shape} vs {zr.shape}")
    for name, z in (("z^v", zv), ("z^r", zr)):
        norms = np.linalg.norm(z, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise PreconditionError(f"{name} must be L2-normalized for cosine retrieval")
    sims = zv @ zr.T
    i2t = _partner_ranks(sims)
    t2i = _partner_ranks(sims.T)
    ks = [int(k) for k in ks]
    return {
        "image_to_text": {f"R@{k}": float(np.mean(i2t < k)) for k in ks},
        "text_to_image": {f"R@{k}": float(np.mean(t2i < k)) for k in ks},
    }


# ---- zero-shot classification --------------------------------------------------------


@dataclass
class PromptSet:
    """Per attribute: a positive and a negative prompt text."""

    prompts: dict[str, dict[str, str]]

    def __post_init__(self):
        if not self.prompts:
            raise PromptError("prompt set is empty")
        for attr, pair in self.prompts.items():
            for side in ("positive", "negative"):
                if side not in pair:
                    raise PromptError(f"attribute {attr!r} is missing a {side} prompt")
                if not split_words(pair[side]):
                    raise PromptError(f"{side} prompt for {attr!r} tokenizes to nothing")

    def attributes(self) -> list[str]:
        return sorted(self.prompts)

    @classmethod
    def from_file(cls, path) -> "PromptSet":
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
        if not isinstance(obj, dict) or not obj:
            raise PromptError(f"prompt file {path} must be a non-empty JSON object")
        return cls(obj)

    def check_against_labels(self, label_names) -> None:
        missing = sorted(set(self.prompts) - set(label_names))
        if missing:
            raise PromptError(f"prompt attributes not present in manifest labels: {missing}")


@dataclass
class ScoreTable:
    """(samples x attributes) scores in [0, 1] with aligned 0/1 labels."""

    scores: np.ndarray
    labels: np.ndarray
    attributes: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 2:
            raise ShapeError("scores and labels must be matching 2-D arrays")
        if self.scores.shape[1] != len(self.attributes):
            raise ShapeError("one attribute name per score column required")
        if not np.all(np.isfinite(self.scores)):
            raise PreconditionError("scores must be finite")
        if self.scores.size and (self.scores.min() < 0 or self.scores.max() > 1):
            raise PreconditionError("scores must lie in [0, 1]")


def zero_shot_scores(zv: np.ndarray, z_pos: np.ndarray, z_neg: np.ndarray,
                     tau: float) -> np.ndarray:
    """Two-way softmax over positive/negative prompt similarities."""
    s_pos = zv @ z_pos
    s_neg = zv @ z_neg
    d = (s_neg - s_pos) / tau
    return 1.0 / (1.0 + np.exp(d))


def zero_shot_classify(volumes, prompts: PromptSet, model: AlignedModel,
                       labels: np.ndarray, vocab: Vocabulary) -> ScoreTable:
    """Score each volume against each attribute's prompt pair.

    score(sample, attr) is the positive component of a softmax over
    {sim(z^v, z^pos)/tau, sim(z^v, z^neg)/tau}; identical prompt pairs give
    exactly 0.5.
    """
    attrs = prompts.attributes()
    zv = model.embed_volumes(volumes).values
    pos = model.embed_texts([prompts.prompts[a]["positive"] for a in attrs], vocab).values
    neg = model.embed_texts([prompts.prompts[a]["negative"] for a in attrs], vocab).values
    scores = np.empty((zv.shape[0], len(attrs)))
    for j in range(len(attrs)):
        if np.array_equal(pos[j], neg[j]):
            scores[:, j] = 0.5
        else:
            scores[:, j] = zero_shot_scores(zv, pos[j], neg[j], model.cfg.tau)
    return ScoreTable(scores=scores, labels=labels, attributes=attrs)


def score_table_metrics(table: ScoreTable) -> dict:
    per = {a: _binary_metrics(table.scores[:, j], table.labels[:, j])
           for j, a in enumerate(table.attributes)}
    return _macro_average(per)


# ---- linear probe ------------------------------------------------------------------------


def linear_probe(train_emb, train_labels, test_emb, test_labels, attrs,
                 steps: int = 400, lr: float = 0.05, weight_decay: float = 1e-4) -> dict:
    """One logistic classifier per attribute on frozen embeddings.

    Trained full-batch with the same AdamW machinery as pretraining from a
    zero initialization, so results are deterministic without a seed.
    """
    from .training import AdamW

    xtr = train_emb.values if isinstance(train_emb, EmbeddingBatch) else np.asarray(train_emb)
    xte = test_emb.values if isinstance(test_emb, EmbeddingBatch) else np.asarray(test_emb)
    ytr = np.asarray(train_labels)
    yte = np.asarray(test_labels)
    if ytr.ndim != 2 or ytr.shape[1] != len(attrs) or yte.shape[1] != len(attrs):
        raise ShapeError("label arrays must be (samples x attributes)")
    per = {}
    for j, attr in enumerate(attrs):
        y = ytr[:, j]
        if len(np.unique(y)) < 2:
            raise DegenerateLabelsError(attr)
        params = {
            "probe.w": Tensor(np.zeros((xtr.shape[1], 1)), requires_grad=True),
            "probe.b": Tensor(np.zeros(1), requires_grad=True),
        }
        opt = AdamW(weight_decay=weight_decay, grad_clip=0.0)
        x_t = Tensor(xtr)
        sign = (2.0 * y - 1.0)[:, None]  # logistic loss: softplus(-sign * logit)
        for _ in range(steps):
            opt.zero_grad(params)
            logits = x_t @ params["probe.w"] + params["probe.b"]
            loss = ad.softplus(logits * (-sign)).mean()
            loss.backward()
            opt.step(params, lr)
        test_logits = xte @ params["probe.w"].data + params["probe.b"].data
        probs = 1.0 / (1.0 + np.exp(-test_logits[:, 0]))
        per[attr] = _binary_metrics(probs, yte[:, j])
        per[attr]["train_acc"] = float(np.mean(
            ((xtr @ params["probe.w"].data + params["probe.b"].data)[:, 0] >= 0) == (y == 1)))
    return _macro_average(per)


# ---- cluster-behavior check ------------------------------------------------------------


def cluster_view_accuracy(model: AlignedModel, corpus: Corpus,
                          max_batches: int | None = None) -> float:
    """Fraction of fresh training-batch views whose argmax cluster equals
    their source slot, under the same fixed batch partition used in training."""
    from .training import build_partition, views_rng

    cfg = model.cfg
    train = corpus.split("train")
    batches = build_partition(cfg, len(train))
    if max_batches:
        batches = batches[:max_batches]
    eval_epoch = cfg.total_epochs  # one past the last training epoch
    hits = total = 0
    for members in batches:
        samples = [train[i] for i in members]
        views = np.empty((len(members), cfg.views, 1) + cfg.crop_dims)
        for row, (i, s) in enumerate(zip(members, samples)):
            rng = views_rng(cfg, eval_epoch, i)
            for m, view in enumerate(make_views(s.volume, cfg.views, cfg.crop_dims, rng)):
                views[row, m, 0] = view.voxels
        ids = np.stack([s.tokens.ids for s in samples])
        mask = np.stack([s.tokens.mask for s in samples])
        b, m_views = views.shape[:2]
        with ad.no_grad():
            text = encode_text((ids, mask), model.params, cfg.model)
            vmap = encode_volume(views.reshape(b * m_views, *views.shape[2:]),
                                 model.params, cfg.model, provenance="local_view")
            d_f = vmap.values.shape[1]
            tokens = vmap.values.reshape(b, m_views, d_f, -1).transpose(0, 1, 3, 2)
            z_hat = fuse_views(tokens, text, model.params, cfg.model) \
                if cfg.model.text_informing else tokens.mean(axis=2)
            logits = cluster_logits(z_hat, model.params, active_b=b)
        pred = logits.data.argmax(axis=-1)
        hits += int(np.sum(pred == np.arange(b)[:, None]))
        total += b * m_views
    return hits / total


# ---- reports -----------------------------------------------------------------------------


def write_report(path, task: str, source_hash: str, config: dict, metrics: dict,
                 per_attribute: dict | None = None) -> dict:
    """Canonical single-document JSON evaluation report."""
    doc = {
        "task": task,
        "checkpoint_hash": source_hash,
        "config": config,
        "metrics": metrics,
        "per_attribute": per_attribute or {},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc
