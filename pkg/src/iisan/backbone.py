"""Frozen synthetic transformer encoders emitting per-layer pooled hidden states.

An encoder is built deterministically from its config seed: an embedding
stage (token + position tables) followed by pre-norm bidirectional blocks
with a 4x gelu MLP. Encoding an item pools every stage output at position 0,
yielding L+1 vectors of width H - the unit that gets cached and consumed by
the side towers. Real backbone exports can replace synthetic encoders via
`import_hidden_states`, which reads the cache file format.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, InputError
from .layers import TransformerBlock

TEXT_TOKEN_COUNT = 8
IMAGE_TOKEN_COUNT = 16


@dataclass(frozen=True)
class EncoderConfig:
    modality: str  # "text" | "image"
    layers: int
    hidden_dim: int
    vocab_or_patch_count: int
    max_positions: int
    seed: int

    def validate(self) -> None:
        if self.modality not in ("text", "image"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.hidden_dim < 2 or self.hidden_dim % 2 != 0:
            raise ConfigError(f"hidden_dim must be even and >= 2, got {self.hidden_dim}")
        if self.vocab_or_patch_count < 1:
            raise ConfigError("vocab_or_patch_count must be positive")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be positive")


def fingerprint(cfg: EncoderConfig) -> int:
    """64-bit hash identifying config + seed; equal configs hash equal."""
    key = f"{cfg.modality}|{cfg.layers}|{cfg.hidden_dim}|{cfg.vocab_or_patch_count}|{cfg.max_positions}|{cfg.seed}"
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")


@dataclass
class HiddenStateStack:
    """Per-item pooled hidden vectors: row 0 is the embedding output, row i block i."""

    item_id: int
    encoder_fingerprint: int
    states: np.ndarray  # (layers + 1, hidden_dim) float32

    def __post_init__(self):
        if self.states.ndim != 2:
            raise InputError(f"stack states must be 2-d, got shape {self.states.shape}")


class FrozenEncoder:
    """Deterministic transformer whose weights never receive gradients unless
    explicitly built trainable (the full-fine-tuning regime)."""

    def __init__(self, cfg: EncoderConfig, trainable: bool = False, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.fingerprint = fingerprint(cfg)
        self.heads = 2
        rng = np.random.default_rng(np.random.PCG64(cfg.seed))
        h = cfg.hidden_dim
        scale = 1.0 / np.sqrt(h)
        prefix = f"backbone.{cfg.modality}"
        tok = (rng.standard_normal((cfg.vocab_or_patch_count, h)) * scale).astype(dtype)
        pos = (rng.standard_normal((cfg.max_positions, h)) * scale).astype(dtype)
        self.token_table = Parameter(Tensor(tok), f"{prefix}.tokens", trainable)
        self.pos_table = Parameter(Tensor(pos), f"{prefix}.positions", trainable)
        self.blocks = [
            TransformerBlock(h, self.heads, f"{prefix}.block{i + 1}", rng,
                             trainable=trainable, dtype=dtype)
            for i in range(cfg.layers)
        ]

    def parameters(self) -> list[Parameter]:
        out = [self.token_table, self.pos_table]
        for b in self.blocks:
            out.extend(b.parameters())
        return out


def build_encoder(cfg: EncoderConfig, trainable: bool = False, dtype=np.float32) -> FrozenEncoder:
    return FrozenEncoder(cfg, trainable=trainable, dtype=dtype)


def _check_tokens(enc: FrozenEncoder, tokens: Sequence[int]) -> np.ndarray:
    ids = np.asarray(list(tokens), dtype=np.int64)
    if ids.size == 0:
        raise InputError("token sequence is empty")
    if ids.size > enc.cfg.max_positions:
        raise InputError(f"{ids.size} tokens exceed max_positions={enc.cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= enc.cfg.vocab_or_patch_count:
        raise InputError(f"token id out of range [0, {enc.cfg.vocab_or_patch_count})")
    return ids


def _forward_states(enc: FrozenEncoder, ids: np.ndarray) -> list[Tensor]:
    with ad.scope(f"backbone.{enc.cfg.modality}"):
        x = ad.add(ad.take_rows(enc.token_table.tensor, ids),
                   ad.take_rows(enc.pos_table.tensor, np.arange(ids.size)))
        states = [x]
        for block in enc.blocks:
            x = block(x)  # bidirectional: no mask
            states.append(x)
    return states


def encode_item(enc: FrozenEncoder, tokens: Sequence[int], item_id: int = 0) -> HiddenStateStack:
    """Run the encoder and pool every stage at position 0."""
    ids = _check_tokens(enc, tokens)
    states = _forward_states(enc, ids)
    pooled = np.stack([s.data[0] for s in states]).astype(np.float32)
    return HiddenStateStack(item_id=item_id, encoder_fingerprint=enc.fingerprint, states=pooled)


def encode_item_graph(enc: FrozenEncoder, tokens: Sequence[int]) -> list[Tensor]:
    """Like encode_item but keeps pooled states on the active tape (rows of shape (1, H)).

    Used by regimes that backpropagate into or through the backbone.
    """
    ids = _check_tokens(enc, tokens)
    states = _forward_states(enc, ids)
    with ad.scope(f"backbone.{enc.cfg.modality}"):
        return [ad.take_rows(s, [0]) for s in states]


def item_tokens(cfg: EncoderConfig, item_id: int) -> list[int]:
    """Deterministic synthetic content: item id -> fixed-length token sequence."""
    length = TEXT_TOKEN_COUNT if cfg.modality == "text" else IMAGE_TOKEN_COUNT
    key = f"{cfg.modality}|{cfg.seed}|{item_id}".encode()
    digest = hashlib.blake2b(key, digest_size=2 * length).digest()
    return [
        int.from_bytes(digest[2 * i:2 * i + 2], "little") % cfg.vocab_or_patch_count
        for i in range(length)
    ]


def import_hidden_states(path) -> Iterator[HiddenStateStack]:
    """Stream stacks from a cache file in file order; fingerprint from the header."""
    from . import cache

    yield from cache.iter_stacks(path)
