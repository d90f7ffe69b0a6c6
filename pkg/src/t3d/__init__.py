"""Desk-scale volume/report contrastive pretraining with text-informed
multi-view alignment, implemented on numpy with a built-in autodiff tape.
"""

from .alignment import (
    LossBreakdown,
    cluster_logits,
    fuse_text_informed,
    fuse_views,
    gca_loss,
    tma_loss,
    total_loss,
)
from .encoders import (
    EmbeddingBatch,
    FeatureMap,
    ModelConfig,
    TextFeatures,
    encode_text,
    encode_volume,
    pool_project_visual,
    project_text,
)
from .evaluation import (
    AlignedModel,
    PromptSet,
    ScoreTable,
    cluster_view_accuracy,
    compute_metrics,
    linear_probe,
    retrieval_eval,
    zero_shot_classify,
)
from .phantom import PhantomSpec, default_phantom_spec, generate_phantom, synth_corpus
from .text import TokenSequence, Vocabulary, tokenize
from .training import (
    AdamW,
    TrainConfig,
    Trainer,
    lr_at,
    run_pretraining,
    toy_train_config,
)
from .volume import Volume, hu_window, make_views, random_crop, resample, resize

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AlignedModel", "EmbeddingBatch", "FeatureMap", "LossBreakdown",
    "ModelConfig", "PhantomSpec", "PromptSet", "ScoreTable", "TextFeatures",
    "TokenSequence", "TrainConfig", "Trainer", "Vocabulary", "Volume",
    "cluster_logits", "cluster_view_accuracy", "compute_metrics",
    "default_phantom_spec", "encode_text", "encode_volume", "fuse_text_informed",
    "fuse_views", "gca_loss", "generate_phantom", "hu_window", "linear_probe",
    "lr_at", "make_views", "pool_project_visual", "project_text", "random_crop",
    "resample", "resize", "retrieval_eval", "run_pretraining", "synth_corpus",
    "tma_loss", "tokenize", "total_loss", "toy_train_config", "zero_shot_classify",
]
