"""Contrastive learning for distinctive image captions, at desk scale.

An image-conditioned bigram caption scorer trained by maximum likelihood
or by contrasting it against a frozen reference model on positive and
mismatched image/caption pairs, plus self-retrieval and caption metrics.
"""

from .corpus import (Caption, CaptionedImage, Dataset, Vocabulary, build_vocab, decode, encode,
                     generate_synthetic, load_dataset, preprocess)
from .evaluation import EvalReport, bleu, cider, evaluate, rouge_l, self_retrieval
from .nce import NceProblem, ToyDensityModel, nce_fit, nce_objective
from .objectives import (PairBatch, cl_difference_loss, cl_loss, cl_negative_only, cl_objective,
                         cl_positive_only, il_loss, mle_loss, sample_negatives, saturate)
from .scorer import ScorerParams, batch_log_prob, decode_beam, decode_greedy, log_prob, log_prob_grad
from .train import TrainConfig, TrainState, load_checkpoint, load_params, save_checkpoint, save_params, train

__version__ = "0.1.0"

__all__ = [
    "Caption", "CaptionedImage", "Dataset", "EvalReport", "NceProblem", "PairBatch", "ScorerParams",
    "ToyDensityModel", "TrainConfig", "TrainState", "Vocabulary", "batch_log_prob", "bleu",
    "build_vocab", "cider", "cl_difference_loss", "cl_loss", "cl_negative_only", "cl_objective",
    "cl_positive_only", "decode", "decode_beam", "decode_greedy", "encode", "evaluate",
    "generate_synthetic", "il_loss", "load_checkpoint", "load_dataset", "load_params", "log_prob",
    "log_prob_grad", "mle_loss", "nce_fit", "nce_objective", "preprocess", "rouge_l",
    "sample_negatives", "saturate", "save_checkpoint", "save_params", "self_retrieval", "train",
]
