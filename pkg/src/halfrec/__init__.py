"""Review-based rating prediction with hierarchical attention and latent factors."""

from .corpus import (DatasetSplit, Interaction, ReviewBundle, Vocabulary,
                     build_bundles, build_vocab, encode_tokens, prepare,
                     split_dataset, tokenize)
from .model import (HyperParams, ParamSet, Prediction, encode_review, forward,
                    fuse_and_predict, init_params, lfm_predict,
                    review_attention)
from .train import (AdamState, EpochReport, TrainConfig, adam_step, evaluate,
                    make_synthetic, mse_loss, train)

__all__ = [
    "AdamState", "DatasetSplit", "EpochReport", "HyperParams", "Interaction",
    "ParamSet", "Prediction", "ReviewBundle", "TrainConfig", "Vocabulary",
    "adam_step", "build_bundles", "build_vocab", "encode_review",
    "encode_tokens", "evaluate", "forward", "fuse_and_predict", "init_params",
    "lfm_predict", "make_synthetic", "mse_loss", "prepare", "review_attention",
    "split_dataset", "tokenize", "train",
]
