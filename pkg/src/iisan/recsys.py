"""Sequential recommendation on top of tower item embeddings.

Datasets are user -> chronological item-id sequences. The leave-one-out
split reserves the last item for test and the penultimate for validation.
Training scores every position of a user's train prefix against all
in-batch items with an in-batch debiased softmax loss (logits shifted by
-log popularity, negatives restricted to items the user never interacted
with), optimized by Adam. Evaluation ranks the target against the complete
catalog with pessimistic tie-breaking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, Tape, Tensor
from .backbone import FrozenEncoder, encode_item, item_tokens
from .cache import CacheStore
from .errors import ConfigError, ContractError, InputError, StalenessError
from .layers import TransformerBlock, causal_mask, dropout
from .sanet import CheckpointMeta, IisanModel, LayerDropPlan, assign_parameters, read_checkpoint, save_checkpoint


# ---------------------------------------------------------------------------
# datasets and splits
# ---------------------------------------------------------------------------

@dataclass
class InteractionDataset:
    users: dict[int, list[int]]
    catalog: tuple[int, ...]

    @classmethod
    def from_users(cls, users: Mapping[int, Sequence[int]]) -> "InteractionDataset":
        items = sorted({v for seq in users.values() for v in seq})
        return cls({u: list(seq) for u, seq in users.items()}, tuple(items))


def load_interactions(path) -> InteractionDataset:
    """Parse `user_id<TAB>item_id[ item_id]*` lines."""
    users: dict[int, list[int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                user_part, items_part = line.split("\t")
                user = int(user_part)
                items = [int(tok) for tok in items_part.split(" ") if tok]
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: malformed interaction line") from exc
            if not items:
                raise InputError(f"{path}:{lineno}: user {user} has no items")
            users[user] = items
    if not users:
        raise InputError(f"{path}: no interactions")
    return InteractionDataset.from_users(users)


def save_interactions(path, users: Mapping[int, Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for user in sorted(users):
            f.write(f"{user}\t{' '.join(str(v) for v in users[user])}\n")


@dataclass
class Split:
    train: dict[int, list[int]]
    val: dict[int, int]
    test: dict[int, int]
    dropped_users: int
    catalog: tuple[int, ...]


def split_leave_one_out(dataset: InteractionDataset) -> Split:
    """Last item held out for test, penultimate for validation; users with
    fewer than three interactions are dropped (and counted)."""
    if not dataset.users:
        raise InputError("empty dataset")
    train: dict[int, list[int]] = {}
    val: dict[int, int] = {}
    test: dict[int, int] = {}
    dropped = 0
    for user in sorted(dataset.users):
        seq = dataset.users[user]
        if len(seq) < 3:
            dropped += 1
            continue
        train[user] = list(seq[:-2])
        val[user] = seq[-2]
        test[user] = seq[-1]
    if not train:
        raise InputError("no user has enough interactions for a leave-one-out split")
    return Split(train, val, test, dropped, dataset.catalog)


def compute_popularity(split: Split) -> dict[int, float]:
    """Additively smoothed train-frequency: p_i = (count_i + 1) / (total + |catalog|)."""
    counts = {item: 0 for item in split.catalog}
    total = 0
    for seq in split.train.values():
        for item in seq:
            counts[item] += 1
            total += 1
    if total == 0:
        raise InputError("no training interactions")
    denom = total + len(split.catalog)
    return {item: (c + 1) / denom for item, c in counts.items()}


# ---------------------------------------------------------------------------
# sequential encoder
# ---------------------------------------------------------------------------

class SeqEncoder:
    """Causal transformer over item embeddings; the last position is the user state."""

    def __init__(self, dim: int = 64, blocks: int = 2, heads: int = 2,
                 max_seq_len: int = 10, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.max_seq_len = max_seq_len
        pos = (rng.standard_normal((max_seq_len, dim)) * 0.02).astype(dtype)
        self.pos_table = Parameter(Tensor(pos), "seq.positions")
        self.blocks = [TransformerBlock(dim, heads, f"seq.block{i + 1}", rng, dtype=dtype)
                       for i in range(blocks)]
        self.ln_out = _SeqLayerNorm(dim, dtype)

    def states(self, item_embs: Tensor, drop=None) -> Tensor:
        """Per-position states for a (s, dim) embedded sequence, causal."""
        s = item_embs.shape[0]
        if s == 0:
            raise InputError("empty item sequence")
        if s > self.max_seq_len:
            raise ContractError(f"sequence length {s} exceeds max_seq_len {self.max_seq_len}")
        x = ad.add(item_embs, ad.take_rows(self.pos_table.tensor, np.arange(s)))
        if drop is not None:
            x = drop(x)
        mask = causal_mask(s, dtype=item_embs.data.dtype)
        for blk in self.blocks:
            x = blk(x, attn_mask=mask, drop=drop)
        return self.ln_out(x)

    def parameters(self) -> list[Parameter]:
        out = [self.pos_table]
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend(self.ln_out.parameters())
        return out


class _SeqLayerNorm:
    def __init__(self, dim: int, dtype):
        self.gain = Parameter(Tensor(np.ones(dim, dtype=dtype)), "seq.ln_out.gain")
        self.offset = Parameter(Tensor(np.zeros(dim, dtype=dtype)), "seq.ln_out.offset")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gain.tensor, self.offset.tensor)

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.offset]


def seq_forward(encoder: SeqEncoder, item_embs: Tensor, drop=None) -> Tensor:
    """User state: final-position output, truncating long inputs from the left."""
    s = item_embs.shape[0]
    if s == 0:
        raise InputError("empty item sequence")
    if s > encoder.max_seq_len:
        item_embs = ad.take_rows(item_embs, np.arange(s - encoder.max_seq_len, s))
        s = encoder.max_seq_len
    states = encoder.states(item_embs, drop)
    return ad.take_rows(states, [s - 1])


def score(user_state, item_embedding) -> float:
    """Dot product of a user state and one item embedding."""
    u = np.asarray(user_state.data if isinstance(user_state, Tensor) else user_state).reshape(-1)
    v = np.asarray(item_embedding.data if isinstance(item_embedding, Tensor) else item_embedding).reshape(-1)
    if u.shape != v.shape:
        raise ContractError(f"score: lengths differ, {u.shape} vs {v.shape}")
    return float(u @ v)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _take_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    return ad.transpose(ad.take_rows(ad.transpose(x), idx))


def inbatch_debiased_ce(logits: Tensor, candidates: Sequence[int],
                        popularity: Mapping[int, float],
                        positives: Sequence[int],
                        owned: Sequence[set[int]]) -> Tensor:
    """In-batch debiased cross-entropy.

    `logits` is (terms, candidates) with columns aligned to `candidates`.
    Each term's denominator keeps its positive plus every in-batch item the
    user never interacted with; logits are shifted by -log(popularity).
    Candidates are reduced to canonical ascending item-id order before the
    stabilized summation, so negative order cannot change the value.
    """
    t = len(positives)
    if t < 1:
        raise ContractError("inbatch_debiased_ce: empty batch")
    if len(owned) != t:
        raise ContractError("inbatch_debiased_ce: owned sets do not match positives")
    if logits.shape != (t, len(candidates)):
        raise ContractError(f"inbatch_debiased_ce: logits {logits.shape} do not match "
                            f"{t} terms x {len(candidates)} candidates")
    if not np.isfinite(logits.data).all():
        raise ContractError("inbatch_debiased_ce: non-finite logit")

    order = np.argsort(np.asarray(candidates, dtype=np.int64), kind="stable")
    sorted_items = [candidates[i] for i in order]
    if len(set(sorted_items)) != len(sorted_items):
        raise ContractError("inbatch_debiased_ce: duplicate candidate items")
    if list(order) != list(range(len(candidates))):
        logits = _take_cols(logits, order)

    pops = np.array([popularity[i] for i in sorted_items], dtype=np.float64)
    if (pops <= 0).any():
        raise InputError("inbatch_debiased_ce: popularity must be positive for every candidate")
    log_p = Tensor(np.log(pops).astype(logits.data.dtype))
    adjusted = ad.bias_add(logits, ad.scale(log_p, -1.0))

    col = {item: i for i, item in enumerate(sorted_items)}
    pos_cols = np.empty(t, dtype=np.int64)
    allowed = np.zeros((t, len(sorted_items)), dtype=bool)
    for row, (pos, own) in enumerate(zip(positives, owned)):
        if pos not in col:
            raise ContractError(f"inbatch_debiased_ce: positive {pos} not among candidates")
        for j, item in enumerate(sorted_items):
            allowed[row, j] = item not in own
        pos_cols[row] = col[pos]
        allowed[row, pos_cols[row]] = True
    return ad.masked_softmax_ce(adjusted, allowed, pos_cols)


# ---------------------------------------------------------------------------
# item-state providers
# ---------------------------------------------------------------------------

class EncodeStateProvider:
    """Recompute pruned stacks from the frozen encoders on every request."""

    def __init__(self, text_encoder: FrozenEncoder, image_encoder: FrozenEncoder,
                 text_plan: LayerDropPlan, image_plan: LayerDropPlan):
        self.text_encoder = text_encoder
        self.image_encoder = image_encoder
        self.text_layers = list(text_plan.cache_layers())
        self.image_layers = list(image_plan.cache_layers())

    def batch_states(self, item_ids: Sequence[int]) -> tuple[list[Tensor], list[Tensor]]:
        return (_stack_batch(self._encode_all(self.text_encoder, self.text_layers, item_ids)),
                _stack_batch(self._encode_all(self.image_encoder, self.image_layers, item_ids)))

    @staticmethod
    def _encode_all(enc: FrozenEncoder, layers: list[int], item_ids) -> list[np.ndarray]:
        return [encode_item(enc, item_tokens(enc.cfg, i), item_id=i).states[layers]
                for i in item_ids]


class CachedStateProvider:
    """Serve pruned stacks from immutable cache files."""

    def __init__(self, text_store: CacheStore, image_store: CacheStore,
                 text_plan: LayerDropPlan, image_plan: LayerDropPlan):
        for store, plan, side in ((text_store, text_plan, "text"), (image_store, image_plan, "image")):
            if store.header.kept_layers != plan.cache_layers():
                raise StalenessError(
                    f"{side} cache keeps layers {store.header.kept_layers}, the plan needs "
                    f"{plan.cache_layers()}; rebuild the cache")
        self.text_store = text_store
        self.image_store = image_store

    def batch_states(self, item_ids: Sequence[int]) -> tuple[list[Tensor], list[Tensor]]:
        return (_stack_batch([self.text_store.read_item(i).states for i in item_ids]),
                _stack_batch([self.image_store.read_item(i).states for i in item_ids]))


def _stack_batch(stacks: list[np.ndarray]) -> list[Tensor]:
    layers = stacks[0].shape[0]
    return [Tensor(np.stack([s[j] for s in stacks])) for j in range(layers)]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RecModel:
    iisan: IisanModel
    seq: SeqEncoder

    def parameters(self) -> list[Parameter]:
        return self.iisan.parameters() + self.seq.parameters()


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 5
    dropout: float = 0.1
    seed: int = 7
    max_seq_len: int = 10


@dataclass
class TrainResult:
    epoch_losses: list[float]
    steps: int


def batch_windows(users: Sequence[int], split: Split, max_seq_len: int) -> dict[int, list[int]]:
    """Per-user training windows: the last max_seq_len+1 items of the train prefix."""
    windows = {u: split.train[u][-(max_seq_len + 1):] for u in users}
    windows = {u: w for u, w in windows.items() if len(w) >= 2}
    if not windows:
        raise InputError("batch has no user with a trainable prefix")
    return windows


def sequence_loss(seq: SeqEncoder, item_matrix: Tensor, candidates: Sequence[int],
                  windows: Mapping[int, list[int]], split: Split,
                  popularity: Mapping[int, float], drop=None) -> Tensor:
    """Next-item loss over every position of every window, against in-batch items."""
    col = {item: i for i, item in enumerate(candidates)}
    rows = []
    positives: list[int] = []
    owned: list[set[int]] = []
    for u in sorted(windows):
        w = windows[u]
        inputs, targets = w[:-1], w[1:]
        embs = ad.take_rows(item_matrix, [col[v] for v in inputs])
        rows.append(seq.states(embs, drop))
        own = set(split.train[u])
        positives.extend(targets)
        owned.extend([own] * len(targets))
    states = ad.concat_rows(rows) if len(rows) > 1 else rows[0]
    logits = ad.matmul(states, ad.transpose(item_matrix))
    return inbatch_debiased_ce(logits, candidates, popularity, positives, owned)


def train_step(rec: RecModel, users: Sequence[int], split: Split,
               popularity: Mapping[int, float], provider, cfg: TrainConfig,
               opt: Optional[Adam], dropout_rng: Optional[np.random.Generator],
               debug_out: Optional[list] = None) -> float:
    """One optimizer step over a batch of users; returns the batch loss."""
    windows = batch_windows(users, split, cfg.max_seq_len)
    candidates = sorted({item for w in windows.values() for item in w})
    text_states, image_states = provider.batch_states(candidates)

    drop = None
    if dropout_rng is not None and cfg.dropout > 0:
        drop = lambda t: dropout(t, cfg.dropout, dropout_rng)

    with Tape() as tape:
        item_matrix = rec.iisan.item_embed(text_states, image_states)
        loss = sequence_loss(rec.seq, item_matrix, candidates, windows, split, popularity, drop)
    if debug_out is not None:
        debug_out.append((tape, loss))
    if opt is not None:
        grads = ad.backward(tape, loss, rec.parameters())
        opt.step(grads)
    return float(loss.data)


def train(rec: RecModel, split: Split, popularity: Mapping[int, float],
          provider, cfg: TrainConfig) -> TrainResult:
    """Adam over all trainable parameters; deterministic for a fixed seed."""
    users = [u for u in sorted(split.train) if len(split.train[u]) >= 2]
    if not users:
        raise InputError("no users with at least two training interactions")
    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    opt = Adam(rec.parameters(), lr=cfg.lr)

    losses = []
    steps = 0
    for _ in range(cfg.epochs):
        order = [users[i] for i in shuffle_rng.permutation(len(users))]
        epoch = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            epoch.append(train_step(rec, batch, split, popularity, provider, cfg,
                                    opt, dropout_rng))
            steps += 1
        losses.append(float(np.mean(epoch)))
    return TrainResult(losses, steps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    hr_at_10: float
    ndcg_at_10: float
    evaluated_user_count: int

    def machine_line(self) -> str:
        return f"METRICS hr10={self.hr_at_10:.6f} ndcg10={self.ndcg_at_10:.6f} users={self.evaluated_user_count}"


def rank_pessimistic(scores: np.ndarray, target_col: int) -> int:
    """1-based rank of the target with equal scores counted ahead of it."""
    ts = scores[target_col]
    greater = int((scores > ts).sum())
    equal_others = int((scores == ts).sum()) - 1
    return greater + equal_others + 1


def metrics_from_scores(score_rows: Iterable[tuple[np.ndarray, int]], cutoff: int = 10) -> MetricReport:
    hrs = []
    ndcgs = []
    for scores, target_col in score_rows:
        rank = rank_pessimistic(scores, target_col)
        hrs.append(1.0 if rank <= cutoff else 0.0)
        ndcgs.append(1.0 / math.log2(rank + 1) if rank <= cutoff else 0.0)
    if not hrs:
        raise InputError("no users to evaluate")
    return MetricReport(float(np.mean(hrs)), float(np.mean(ndcgs)), len(hrs))


def evaluate(rec: RecModel, split: Split, provider, cfg: TrainConfig,
             target: str = "test") -> MetricReport:
    """Full-catalog ranking of each user's held-out item.

    Scoring the test item includes the validation item in the user prefix;
    scoring the validation item uses the train prefix alone.
    """
    if target not in ("test", "val"):
        raise ConfigError(f"unknown evaluation target {target!r}")
    catalog = list(split.catalog)
    if not catalog:
        raise InputError("empty catalog")
    col = {item: i for i, item in enumerate(catalog)}
    targets = split.test if target == "test" else split.val
    missing = [u for u, v in targets.items() if v not in col]
    if missing:
        raise InputError(f"target item of user {missing[0]} is not in the catalog; "
                         "evaluation would silently leak")

    text_states, image_states = provider.batch_states(catalog)
    item_matrix = rec.iisan.item_embed(text_states, image_states).data

    def rows():
        for u in sorted(targets):
            prefix = split.train[u] + ([split.val[u]] if target == "test" else [])
            window = prefix[-cfg.max_seq_len:]
            embs = Tensor(item_matrix[[col[v] for v in window]])
            state = rec.seq.states(embs).data[-1]
            yield item_matrix @ state, col[targets[u]]

    return metrics_from_scores(rows())


def popularity_baseline(split: Split, popularity: Mapping[int, float],
                        target: str = "test") -> MetricReport:
    """Rank the catalog by popularity (ties broken by item id) for every user."""
    catalog = sorted(split.catalog, key=lambda item: (-popularity[item], item))
    rank_of = {item: r for r, item in enumerate(catalog, start=1)}
    targets = split.test if target == "test" else split.val
    hrs = []
    ndcgs = []
    for u in sorted(targets):
        rank = rank_of[targets[u]]
        hrs.append(1.0 if rank <= 10 else 0.0)
        ndcgs.append(1.0 / math.log2(rank + 1) if rank <= 10 else 0.0)
    return MetricReport(float(np.mean(hrs)), float(np.mean(ndcgs)), len(hrs))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def build_rec_model(variant: str, text_layers: int, text_dim: int, image_layers: int,
                    image_dim: int, text_mode: Optional[str] = None, bottleneck: int = 16,
                    dseq: int = 64, seq_blocks: int = 2, seq_heads: int = 2,
                    max_seq_len: int = 10, seed: int = 0, dtype=np.float32) -> RecModel:
    from .sanet import build_model

    iisan = build_model(variant, text_layers, text_dim, image_layers, image_dim,
                        text_mode=text_mode, bottleneck=bottleneck, dseq=dseq,
                        seed=seed, dtype=dtype)
    seq = SeqEncoder(dim=dseq, blocks=seq_blocks, heads=seq_heads,
                     max_seq_len=max_seq_len, seed=seed + 1, dtype=dtype)
    return RecModel(iisan, seq)


def save_rec_checkpoint(path, rec: RecModel) -> None:
    meta = CheckpointMeta(rec.iisan.variant, rec.iisan.text_plan, rec.iisan.image_plan,
                          rec.iisan.text_dim, rec.iisan.image_dim, rec.iisan.bottleneck,
                          rec.iisan.dseq, len(rec.seq.blocks), rec.seq.blocks[0].heads,
                          rec.seq.max_seq_len)
    save_checkpoint(path, meta, rec.parameters())


def load_rec_checkpoint(path, dtype=np.float32) -> RecModel:
    meta, flat = read_checkpoint(path)
    iisan = IisanModel(meta.variant, meta.text_plan, meta.image_plan, meta.text_dim,
                       meta.image_dim, meta.bottleneck, meta.dseq, dtype=dtype)
    seq = SeqEncoder(dim=meta.dseq, blocks=meta.seq_blocks, heads=meta.seq_heads,
                     max_seq_len=meta.max_seq_len, dtype=dtype)
    rec = RecModel(iisan, seq)
    assign_parameters(rec.parameters(), flat)
    return rec
