"""Two-tower recommendation model: news encoder + user encoder + scoring.

Bundles the encoder pair behind one parameter namespace ("news.*" /
"user.*"), owns the user-id table for personalized encoders, and prepares
the tokenized news matrix consumed by training and evaluation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import NewsArticle
from .encoders import (MINI_PLM, NewsEncoderSpec, apply_finetune_policy,
                       build_news_encoder, param_count)
from .tensor import Tensor, load_checkpoint, save_checkpoint
from .text import Vocabulary, tokenize
from .users import (FALLBACK_USER_INDEX, UserEncoderSpec, build_user_encoder,
                    user_param_count)


@dataclass
class ModelSpec:
    news: NewsEncoderSpec = field(default_factory=NewsEncoderSpec)
    user: UserEncoderSpec = field(default_factory=UserEncoderSpec)
    max_title_len: int = 30
    history_cap: int = 50

    def __post_init__(self):
        if self.user.d_model != self.news.d_model:
            raise ValueError("user encoder d_model must match news encoder d_model")

    def to_dict(self) -> dict:
        return dict(news=self.news.to_dict(), user=self.user.to_dict(),
                    max_title_len=self.max_title_len,
                    history_cap=self.history_cap)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class NewsTokenTable:
    """Tokenized news titles as (N, M) id/mask matrices with an id index."""

    def __init__(self, articles: list[NewsArticle], vocab: Vocabulary,
                 max_len: int):
        self.index: dict[str, int] = {}
        ids, mask = [], []
        for a in articles:
            seq = tokenize(a.title, vocab, max_len)
            self.index[a.news_id] = len(ids)
            ids.append(seq.ids)
            mask.append(seq.mask)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.mask = np.asarray(mask, dtype=np.float64)
        self.news_ids = [a.news_id for a in articles]

    def __len__(self):
        return len(self.news_ids)


class Recommender:
    """News encoder + user encoder with a shared parameter namespace."""

    def __init__(self, spec: ModelSpec, vocab: Vocabulary,
                 user_ids: list[str] | None = None, seed: int = 0):
        self.spec = spec
        self.vocab = vocab
        user_ids = user_ids or []
        # row 0 of any user table is the unknown-user fallback
        self.user_index = {uid: i + 1 for i, uid in enumerate(user_ids)}
        self.user_ids = list(user_ids)
        spec.user.user_table_size = len(user_ids) + 1
        self.news_encoder = build_news_encoder(spec.news, vocab.size,
                                               spec.max_title_len, seed=seed)
        self.user_encoder = build_user_encoder(spec.user, seed=seed + 1)

    def parameters(self) -> dict[str, Tensor]:
        p = {"news." + k: v for k, v in self.news_encoder.params.items()}
        p.update({"user." + k: v for k, v in self.user_encoder.params.items()})
        return p

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def user_idx(self, user_id: str) -> int:
        return self.user_index.get(user_id, FALLBACK_USER_INDEX)

    def user_idx_array(self, user_ids) -> np.ndarray:
        return np.asarray([self.user_idx(u) for u in user_ids], dtype=np.int64)

    def apply_finetune_policy(self, finetune_last_k: int | None = None):
        if self.spec.news.kind != MINI_PLM:
            raise ValueError("finetune policy requires a mini_plm news encoder")
        k = (self.spec.news.finetune_last_k if finetune_last_k is None
             else finetune_last_k)
        return apply_finetune_policy(self.news_encoder, k)

    def total_param_count(self) -> int:
        return (param_count(self.spec.news, self.vocab.size,
                            self.spec.max_title_len)
                + user_param_count(self.spec.user))

    # -- persistence ------------------------------------------------------

    def state(self) -> dict[str, Tensor]:
        return self.parameters()

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True):
        params = self.parameters()
        missing = set(params) - set(arrays)
        if strict and missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
        for name, arr in arrays.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r} in checkpoint")
                continue
            if params[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{params[name].data.shape} vs {arr.shape}")
            params[name].data = arr.copy()

    def save(self, ckpt_path, user_ids_path=None):
        save_checkpoint(ckpt_path, self.parameters())
        if user_ids_path is not None:
            with open(user_ids_path, "w", encoding="utf-8") as f:
                for uid in self.user_ids:
                    f.write(uid + "\n")

    @staticmethod
    def load_user_ids(path) -> list[str]:
        with open(path, encoding="utf-8") as f:
            return [line.rstrip("\n") for line in f if line.rstrip("\n")]

    def load(self, ckpt_path):
        self.load_state(load_checkpoint(ckpt_path))
