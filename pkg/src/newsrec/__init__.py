"""Two-tower news recommendation with pretrainable transformer encoders."""

from .encoders import NewsEncoderSpec, build_news_encoder, param_count
from .model import ModelSpec, NewsTokenTable, Recommender
from .tensor import Adam, ComputationTape, Tensor, gradient_check
from .text import Vocabulary, build_vocab, tokenize
from .training import TrainConfig, build_training_samples, mlm_pretrain, train
from .users import UserEncoderSpec, build_user_encoder

__all__ = [
    "Adam", "ComputationTape", "Tensor", "gradient_check",
    "Vocabulary", "build_vocab", "tokenize",
    "NewsEncoderSpec", "build_news_encoder", "param_count",
    "UserEncoderSpec", "build_user_encoder",
    "ModelSpec", "NewsTokenTable", "Recommender",
    "TrainConfig", "build_training_samples", "mlm_pretrain", "train",
]

__version__ = "0.1.0"
