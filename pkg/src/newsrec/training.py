"""Sample construction, listwise training, MLM pretraining, and the
deterministic gradient-shard aggregation contract.

Training samples are (K+1)-way classification instances: one clicked
candidate plus K negatives drawn from the same impression.  Batches may be
split into equal shards whose gradients are averaged; the result matches
the unsharded gradient up to float reassociation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from . import tensor as T
from .data import Impression
from .model import NewsTokenTable, Recommender
from .tensor import Adam, ComputationTape, NumericalError, ShapeError, Tensor
from .text import TokenSequence, mask_for_mlm


@dataclass
class TrainingSample:
    user_id: str
    history: list[str]            # news ids, most-recent-last, already capped
    candidate_ids: list[str]      # length K+1
    label: int


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 128
    shards: int = 1
    negatives_k: int = 4
    epochs: int = 5
    seed: int = 0
    mlm_rate: float = 0.15

    def __post_init__(self):
        if self.batch_size % self.shards != 0:
            raise ValueError("batch_size must be divisible by shards")
        if self.negatives_k < 1:
            raise ValueError("negatives_k must be >= 1")


def build_training_samples(impressions: list[Impression], k: int, seed: int,
                           history_cap: int = 50):
    """One sample per click; K within-impression negatives, shuffled order.

    Negatives are drawn uniformly without replacement, or with replacement
    when the impression has fewer than K non-clicked candidates.  Returns
    (samples, skipped) where skipped counts clicks with no negatives.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    samples: list[TrainingSample] = []
    skipped = 0
    for imp in impressions:
        positives = [nid for nid, c in imp.candidates if c == 1]
        negatives = [nid for nid, c in imp.candidates if c == 0]
        history = imp.history[-history_cap:]
        for pos in positives:
            if not negatives:
                skipped += 1
                continue
            if len(negatives) >= k:
                negs = list(rng.choice(negatives, size=k, replace=False))
            else:
                negs = list(rng.choice(negatives, size=k, replace=True))
            cands = [pos] + negs
            order = rng.permutation(k + 1)
            samples.append(TrainingSample(
                user_id=imp.user_id, history=history,
                candidate_ids=[cands[i] for i in order],
                label=int(np.argwhere(order == 0)[0][0])))
    return samples, skipped


def listwise_loss(scores: Tensor, label: int) -> Tensor:
    """Cross-entropy over the candidate list: -log softmax(scores)[label]."""
    n = scores.shape[-1]
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} candidates")
    ls = T.log_softmax(scores, axis=-1)
    return -T.reshape(T.narrow(ls, -1, label, 1), ())


def aggregate_shards(shard_grads: list[dict[str, np.ndarray]]):
    """Elementwise mean over per-shard gradient dicts (fixed shard order)."""
    if not shard_grads:
        raise ValueError("no shard gradients to aggregate")
    names = list(shard_grads[0])
    out: dict[str, np.ndarray] = {}
    for name in names:
        ref = shard_grads[0][name]
        acc = ref.copy()
        for sg in shard_grads[1:]:
            g = sg.get(name)
            if g is None or g.shape != ref.shape:
                raise ShapeError(f"shard gradient mismatch for {name!r}")
            acc += g
        out[name] = acc / len(shard_grads)
    return out


# ---------------------------------------------------------------------------
# batched two-tower forward
# ---------------------------------------------------------------------------


@dataclass
class _RowSample:
    history_rows: np.ndarray
    candidate_rows: np.ndarray
    label: int
    user_idx: int


def _row_samples(model: Recommender, table: NewsTokenTable,
                 samples: list[TrainingSample]) -> list[_RowSample]:
    out = []
    for s in samples:
        out.append(_RowSample(
            history_rows=np.asarray([table.index[n] for n in s.history],
                                    dtype=np.int64),
            candidate_rows=np.asarray([table.index[n] for n in s.candidate_ids],
                                      dtype=np.int64),
            label=s.label, user_idx=model.user_idx(s.user_id)))
    return out


def batch_loss(model: Recommender, table: NewsTokenTable,
               batch: list[_RowSample], rng=None) -> Tensor:
    """Mean listwise loss over a batch; shares news encodings within it."""
    B = len(batch)
    uniq = np.unique(np.concatenate(
        [s.candidate_rows for s in batch] + [s.history_rows for s in batch]))
    remap = {int(r): i for i, r in enumerate(uniq)}
    H = model.news_encoder.embed(table.ids[uniq], table.mask[uniq], rng=rng)
    d = model.spec.news.d_model

    t_max = max(1, max(len(s.history_rows) for s in batch))
    n_cand = len(batch[0].candidate_rows)
    hist_idx = np.zeros((B, t_max), dtype=np.int64)
    hist_mask = np.zeros((B, t_max))
    cand_idx = np.zeros((B, n_cand), dtype=np.int64)
    onehot = np.zeros((B, n_cand))
    for i, s in enumerate(batch):
        if len(s.candidate_rows) != n_cand:
            raise ShapeError("ragged candidate lists in one batch")
        h = s.history_rows
        hist_idx[i, :len(h)] = [remap[int(r)] for r in h]
        hist_mask[i, :len(h)] = 1.0
        cand_idx[i] = [remap[int(r)] for r in s.candidate_rows]
        onehot[i, s.label] = 1.0

    hist = T.embedding_lookup(H, hist_idx) * hist_mask[..., None]
    user_idx = np.asarray([s.user_idx for s in batch], dtype=np.int64)
    u = model.user_encoder.forward(hist, hist_mask, user_idx)
    cand = T.embedding_lookup(H, cand_idx)
    scores = T.reduce_sum(T.reshape(u, (B, 1, d)) * cand, axis=-1)
    ls = T.log_softmax(scores, axis=-1)
    return T.reduce_sum(ls * onehot) * (-1.0 / B)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,valid_loss,valid_auc\n")
            for row in self.history:
                f.write(f"{row['epoch']},{row['train_loss']:.6f},"
                        f"{row['valid_loss']:.6f},{row['valid_auc']:.6f}\n")


def _shard_step(model, table, batch, shards, trainable):
    """Forward/backward per shard; returns (mean loss, aggregated grads)."""
    if len(batch) % shards != 0:
        shards = 1  # ragged tail batches run unsharded
    size = len(batch) // shards
    shard_grads = []
    losses = []
    names = list(trainable)
    for s in range(shards):
        part = batch[s * size:(s + 1) * size]
        for p in trainable.values():
            p.grad = None
        with ComputationTape() as tape:
            loss = batch_loss(model, table, part)
            tape.backward(loss, params=list(trainable.values()))
        losses.append(loss.item())
        shard_grads.append({n: trainable[n].grad for n in names})
    return float(np.mean(losses)), aggregate_shards(shard_grads)


def train(model: Recommender, table: NewsTokenTable,
          samples: list[TrainingSample], config: TrainConfig,
          valid_impressions: list[Impression] | None = None) -> TrainResult:
    """Mini-batch Adam over the listwise loss with seeded epoch shuffles.

    Frozen parameters are never touched by the optimizer.  A non-finite
    loss or gradient aborts with NumericalError.
    """
    if not samples:
        raise ValueError("empty training sample set")
    rows = _row_samples(model, table, samples)
    trainable = model.trainable_parameters()
    opt = Adam(trainable, learning_rate=config.learning_rate)

    valid_rows = None
    if valid_impressions:
        vsamples, _ = build_training_samples(valid_impressions,
                                             config.negatives_k,
                                             seed=config.seed + 7919,
                                             history_cap=model.spec.history_cap)
        valid_rows = _row_samples(model, table, vsamples)

    result = TrainResult()
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(config.seed * 1000003 + epoch)
        order = rng.permutation(len(rows))
        epoch_losses = []
        for start in range(0, len(rows), config.batch_size):
            batch = [rows[i] for i in order[start:start + config.batch_size]]
            loss, grads = _shard_step(model, table, batch, config.shards,
                                      trainable)
            if not np.isfinite(loss):
                raise NumericalError(f"NaN loss at epoch {epoch}")
            epoch_losses.append(loss)
            opt.step(grads)

        valid_loss = float("nan")
        valid_auc = float("nan")
        if valid_rows is not None:
            vloss = [batch_loss(model, table, valid_rows[i:i + 256]).item()
                     for i in range(0, len(valid_rows), 256)]
            valid_loss = float(np.mean(vloss))
            report = evaluation.evaluate(model, valid_impressions, table)
            valid_auc = report.means["auc"]
        result.history.append(dict(epoch=epoch,
                                   train_loss=float(np.mean(epoch_losses)),
                                   valid_loss=valid_loss,
                                   valid_auc=valid_auc))
    return result


# ---------------------------------------------------------------------------
# MLM pretraining
# ---------------------------------------------------------------------------


def mlm_pretrain(sequences: list[TokenSequence], encoder, vocab_size: int,
                 mask_rate: float = 0.15, epochs: int = 5,
                 learning_rate: float = 1e-3, batch_size: int = 32,
                 seed: int = 0):
    """Masked-token prediction with a tied-embedding output layer.

    Corrupted positions are predicted from the encoder's hidden states via
    logits = states @ token_emb^T + bias.  Returns (output_bias tensor,
    per-epoch mean losses); encoder parameters update in place.
    """
    if not sequences:
        raise ValueError("empty pretraining corpus")
    if encoder.spec.kind != "mini_plm":
        raise ValueError("MLM pretraining requires a mini_plm encoder")
    out_bias = Tensor(np.zeros(vocab_size), requires_grad=True)
    params = dict(encoder.params)
    params["mlm.out_bias"] = out_bias
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    opt = Adam(trainable, learning_rate=learning_rate)

    epoch_losses = []
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng(seed * 1000003 + epoch)
        order = rng.permutation(len(sequences))
        losses = []
        for start in range(0, len(sequences), batch_size):
            batch = [sequences[i] for i in order[start:start + batch_size]]
            ids, mask, onehot, n_targets = _corrupt_batch(
                batch, vocab_size, mask_rate, seed * 7 + step)
            step += 1
            if n_targets == 0:
                continue
            for p in trainable.values():
                p.grad = None
            with ComputationTape() as tape:
                states = encoder.forward(ids, mask)
                logits = states @ T.transpose_last(params["token_emb"]) + out_bias
                ls = T.log_softmax(logits, axis=-1)
                loss = T.reduce_sum(ls * onehot) * (-1.0 / n_targets)
                tape.backward(loss, params=list(trainable.values()))
            losses.append(loss.item())
            opt.step({k: p.grad for k, p in trainable.items()})
        epoch_losses.append(float(np.mean(losses)))
    return out_bias, epoch_losses


def _corrupt_batch(batch, vocab_size, mask_rate, seed_base):
    m = len(batch[0].ids)
    ids = np.zeros((len(batch), m), dtype=np.int64)
    mask = np.zeros((len(batch), m))
    onehot = np.zeros((len(batch), m, vocab_size))
    n_targets = 0
    for i, seq in enumerate(batch):
        corrupted, targets = mask_for_mlm(seq, vocab_size, mask_rate,
                                          rng_seed=seed_base * 100003 + i)
        ids[i] = corrupted.ids
        mask[i] = corrupted.mask
        for pos, orig in targets:
            onehot[i, pos, orig] = 1.0
            n_targets += 1
    return ids, mask, onehot, n_targets
