"""locret: a desk-scale region-aligned vision-language pipeline.

Synthetic paired image/report corpus, contrastive + attention-based alignment
training, location-conditioned triplet learning, and grounding / retrieval /
explanation evaluation — all deterministic and CPU-only.
"""

__version__ = "0.1.0"

from .corpus import (CorpusMeta, CorpusSample, Finding, RegionLayout, Vocab,
                     default_layout, gen_corpus, load_corpus, load_corpus_meta,
                     save_corpus, split_corpus)
from .losses import LossConfig, global_alignment_loss, local_alignment_loss, triplet_loss
from .mining import Triplet, pair_validity, sample_triplets
from .model import ModelConfig, VisionLanguageModel, build_model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train_stage1, train_stage2

__all__ = [
    "CorpusMeta", "CorpusSample", "Finding", "RegionLayout", "Vocab",
    "default_layout", "gen_corpus", "load_corpus", "load_corpus_meta",
    "save_corpus", "split_corpus",
    "LossConfig", "global_alignment_loss", "local_alignment_loss", "triplet_loss",
    "Triplet", "pair_validity", "sample_triplets",
    "ModelConfig", "VisionLanguageModel", "build_model", "load_checkpoint",
    "save_checkpoint",
    "TrainConfig", "train_stage1", "train_stage2",
]
