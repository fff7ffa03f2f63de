"""Encoder-decoder dialogue modeling with copy-flow state spans.

A small, numpy-only research library: reverse-mode autodiff, a two-network
(prior/posterior) span tracker with implicit copy mechanisms, KL posterior
regularization for semi- and unsupervised training, beam-search decoding,
a synthetic task-oriented corpus generator, and a metric suite.
"""

from .autodiff import ParamStore, Tensor, backward, finite_difference_check
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import (DialogueSession, GenConfig, KnowledgeBase, SlotSchema,
                     StateAnnotation, Turn, generate_synthetic_corpus,
                     kb_search, load_corpus, load_kb, save_corpus, save_kb,
                     split_corpus)
from .decoding import (DecodeConfig, SpanDecodeConfig, beam_search,
                       decode_sessions, extract_state, run_dialogue)
from .evaluation import (EvalReport, bleu, embedding_metric,
                         entity_match_rate, evaluate_sessions,
                         joint_goal_accuracy, predicted_keyword_proportion)
from .model import CopyFlowModel, MixtureDistribution, ModelConfig
from .training import (LambdaSchedule, TrainingConfig, TrainResult, fit,
                       kl_divergence, lambda_at)
from .vocab import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "ParamStore", "Tensor", "backward", "finite_difference_check",
    "load_checkpoint", "save_checkpoint",
    "DialogueSession", "GenConfig", "KnowledgeBase", "SlotSchema",
    "StateAnnotation", "Turn", "generate_synthetic_corpus", "kb_search",
    "load_corpus", "load_kb", "save_corpus", "save_kb", "split_corpus",
    "DecodeConfig", "SpanDecodeConfig", "beam_search", "decode_sessions",
    "extract_state", "run_dialogue",
    "EvalReport", "bleu", "embedding_metric", "entity_match_rate",
    "evaluate_sessions", "joint_goal_accuracy",
    "predicted_keyword_proportion",
    "CopyFlowModel", "MixtureDistribution", "ModelConfig",
    "LambdaSchedule", "TrainingConfig", "TrainResult", "fit",
    "kl_divergence", "lambda_at",
    "Vocabulary",
]
