"""Analytic training-cost accounting per fine-tuning regime, plus a live probe.

Regimes
    fft             everything trainable, no towers; a linear head fuses the
                    pooled final states of both encoders
    epeft_adapter   frozen backbone with one trainable bottleneck adapter per
                    transformer block, same head
    dpeft_uncached  frozen backbone recomputed every step, trainable towers
    dpeft_cached    like dpeft_uncached but hidden states come from disk

Accounting constants (documented, fixed; only cross-regime orderings and
ratios are meaningful, never absolute values):

  * forward FLOPs per transformer block on a length-s, width-h sequence:
        F(s, h) = 8 s h^2 + 4 s^2 h     (projections + attention map)
  * backward FLOPs: 1x F for every segment the gradient chain merely
    traverses (frozen weights: only dL/dx is formed), plus another 1x F when
    the segment's own weights train (dL/dW needs the stored inputs). Fully
    trained segments therefore cost 2x their forward FLOPs.
  * stored activations per token per block: 9 h-wide vectors to backpropagate
    through the block (nonlinearity inputs), 7 more when its weights train
    (linear-layer inputs), plus heads * s^2 attention probabilities.
  * towers operate on pooled per-item vectors, so their terms have no token
    factor; embedded adapters run per token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, Tape, Tensor
from .backbone import EncoderConfig, FrozenEncoder, build_encoder, encode_item_graph, item_tokens
from .cache import cache_file_size
from .errors import ConfigError, ContractError
from .layers import Linear
from .recsys import (InteractionDataset, RecModel, SeqEncoder, TrainConfig, batch_windows,
                     compute_popularity, sequence_loss, split_leave_one_out, train_step,
                     EncodeStateProvider)
from .sanet import SanBlock, build_model

FFT = "fft"
EPEFT_ADAPTER = "epeft_adapter"
DPEFT_UNCACHED = "dpeft_uncached"
DPEFT_CACHED = "dpeft_cached"
REGIMES = (FFT, EPEFT_ADAPTER, DPEFT_UNCACHED, DPEFT_CACHED)

CHAIN_ACT_VECTORS = 9
WGRAD_ACT_VECTORS = 7
BACKBONE_HEADS = 2


def block_fwd_flops(s: int, h: int) -> int:
    return 8 * s * h * h + 4 * s * s * h


@dataclass(frozen=True)
class SanSpec:
    """Shape of the trainable side: towers, fusion, and the sequential encoder."""

    variant: str = "vs"
    bottleneck: int = 16
    dseq: int = 64
    seq_blocks: int = 2
    seq_heads: int = 2
    seq_len: int = 10


@dataclass(frozen=True)
class Workload:
    batch: int
    text_tokens: int
    image_tokens: int
    seq_len: int
    catalog_items: int


@dataclass
class CostReport:
    regime: str
    fwd_backbone_flops: int
    fwd_peft_flops: int
    bwd_flops: int
    activation_bytes: int
    trainable_params: int
    cache_bytes: int
    workload: Workload
    weight_grad_segments: tuple[str, ...]
    traversal_segments: tuple[str, ...]

    def machine_line(self) -> str:
        return (f"COST regime={self.regime} fwdB={self.fwd_backbone_flops} "
                f"fwdP={self.fwd_peft_flops} bwd={self.bwd_flops} "
                f"act={self.activation_bytes} params={self.trainable_params} "
                f"cache={self.cache_bytes}")


# --- parameter counting (mirrors the actual builders; tested against them) ----

def backbone_param_count(cfg: EncoderConfig) -> int:
    h = cfg.hidden_dim
    per_block = 12 * h * h + 13 * h
    return cfg.vocab_or_patch_count * h + cfg.max_positions * h + cfg.layers * per_block


def _sanb_params(h: int, d: int) -> int:
    return 2 * h * d + d + h


def tower_param_count(text_dim: int, image_dim: int, m: int, bottleneck: int,
                      dseq: int, asymmetric: bool) -> int:
    d = bottleneck
    intra_text = m * _sanb_params(text_dim, d) + (m - 1)
    intra_image = m * _sanb_params(image_dim, d) + (m - 1)
    inter = m * _sanb_params(image_dim, d) + m
    dtl = (text_dim * image_dim + image_dim) if asymmetric else 0
    fusion_in = 2 * image_dim + text_dim
    fusion = fusion_in * dseq + dseq
    return intra_text + intra_image + inter + dtl + fusion


def seq_param_count(dseq: int, blocks: int, max_seq_len: int) -> int:
    return max_seq_len * dseq + blocks * (12 * dseq * dseq + 13 * dseq) + 2 * dseq


def adapter_param_count(text_cfg: EncoderConfig, image_cfg: EncoderConfig, bottleneck: int) -> int:
    return (text_cfg.layers * _sanb_params(text_cfg.hidden_dim, bottleneck)
            + image_cfg.layers * _sanb_params(image_cfg.hidden_dim, bottleneck))


def fusion_head_param_count(text_cfg: EncoderConfig, image_cfg: EncoderConfig, dseq: int) -> int:
    return (text_cfg.hidden_dim + image_cfg.hidden_dim) * dseq + dseq


# --- the estimator -------------------------------------------------------------

def _backbone_fwd(text_cfg, image_cfg, wl: Workload) -> int:
    return (text_cfg.layers * block_fwd_flops(wl.text_tokens, text_cfg.hidden_dim)
            + image_cfg.layers * block_fwd_flops(wl.image_tokens, image_cfg.hidden_dim))


def _backbone_act_floats(cfg: EncoderConfig, tokens: int, trained: bool) -> int:
    per_token = cfg.hidden_dim * (CHAIN_ACT_VECTORS + (WGRAD_ACT_VECTORS if trained else 0))
    return cfg.layers * (tokens * per_token + BACKBONE_HEADS * tokens * tokens)


def _tower_fwd(text_cfg, image_cfg, san: SanSpec, m: int) -> int:
    ht, hi, d = text_cfg.hidden_dim, image_cfg.hidden_dim, san.bottleneck
    flops = m * 4 * ht * d + 2 * (m * 4 * hi * d)
    if san.variant == "va":
        flops += (m + 1) * 2 * ht * hi
    flops += 2 * (2 * hi + ht) * san.dseq
    return flops


def _tower_act_floats(text_cfg, image_cfg, san: SanSpec, m: int) -> int:
    ht, hi, d = text_cfg.hidden_dim, image_cfg.hidden_dim, san.bottleneck
    floats = (m + 1) * (ht + hi)                       # input stacks
    floats += m * (2 * ht + 2 * d) + 2 * (m * (2 * hi + 2 * d))
    if san.variant == "va":
        floats += (m + 1) * hi
    floats += (2 * hi + ht) + san.dseq                 # fusion in/out
    return floats


def _adapter_fwd(text_cfg, image_cfg, san: SanSpec, wl: Workload) -> int:
    d = san.bottleneck
    return (text_cfg.layers * 4 * wl.text_tokens * text_cfg.hidden_dim * d
            + image_cfg.layers * 4 * wl.image_tokens * image_cfg.hidden_dim * d)


def _adapter_act_floats(text_cfg, image_cfg, san: SanSpec, wl: Workload) -> int:
    d = san.bottleneck
    return (text_cfg.layers * wl.text_tokens * (2 * text_cfg.hidden_dim + 2 * d)
            + image_cfg.layers * wl.image_tokens * (2 * image_cfg.hidden_dim + 2 * d))


def _head_fwd(text_cfg, image_cfg, san: SanSpec) -> int:
    return 2 * (text_cfg.hidden_dim + image_cfg.hidden_dim) * san.dseq


def _head_act_floats(text_cfg, image_cfg, san: SanSpec) -> int:
    return text_cfg.hidden_dim + image_cfg.hidden_dim + san.dseq


def _seq_fwd(san: SanSpec, wl: Workload) -> int:
    return san.seq_blocks * block_fwd_flops(wl.seq_len, san.dseq)


def _seq_act_floats(san: SanSpec, wl: Workload) -> int:
    per_block = wl.seq_len * san.dseq * (CHAIN_ACT_VECTORS + WGRAD_ACT_VECTORS) \
        + san.seq_heads * wl.seq_len * wl.seq_len
    return wl.seq_len * san.dseq + san.seq_blocks * per_block


def estimate(text_cfg: EncoderConfig, image_cfg: EncoderConfig, san: SanSpec, regime: str,
             batch: int = 32, seq_lens: tuple[int, int] = (8, 16),
             catalog_items: int = 1000) -> CostReport:
    """Per-step cost of one batch of items plus one batch of user sequences."""
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    if san.variant == "vs" and text_cfg.hidden_dim != image_cfg.hidden_dim:
        raise ConfigError("symmetric estimate needs equal hidden dims")
    wl = Workload(batch, seq_lens[0], seq_lens[1], san.seq_len, catalog_items)
    m = image_cfg.layers // 2

    backbone_f = _backbone_fwd(text_cfg, image_cfg, wl)
    seq_f = _seq_fwd(san, wl)
    seq_act = _seq_act_floats(san, wl)

    if regime == FFT:
        peft_f = _head_fwd(text_cfg, image_cfg, san) + seq_f
        fwd_backbone = backbone_f
        bwd = 2 * (backbone_f + peft_f)
        act = (_backbone_act_floats(text_cfg, wl.text_tokens, True)
               + _backbone_act_floats(image_cfg, wl.image_tokens, True)
               + _head_act_floats(text_cfg, image_cfg, san) + seq_act)
        params = (backbone_param_count(text_cfg) + backbone_param_count(image_cfg)
                  + fusion_head_param_count(text_cfg, image_cfg, san.dseq)
                  + seq_param_count(san.dseq, san.seq_blocks, san.seq_len))
        cache_bytes = 0
        trained = ("backbone", "head", "seq")
        traversed: tuple[str, ...] = ()
    elif regime == EPEFT_ADAPTER:
        adapters_f = _adapter_fwd(text_cfg, image_cfg, san, wl)
        peft_f = adapters_f + _head_fwd(text_cfg, image_cfg, san) + seq_f
        fwd_backbone = backbone_f
        bwd = backbone_f + 2 * peft_f
        act = (_backbone_act_floats(text_cfg, wl.text_tokens, False)
               + _backbone_act_floats(image_cfg, wl.image_tokens, False)
               + _adapter_act_floats(text_cfg, image_cfg, san, wl)
               + _head_act_floats(text_cfg, image_cfg, san) + seq_act)
        params = (adapter_param_count(text_cfg, image_cfg, san.bottleneck)
                  + fusion_head_param_count(text_cfg, image_cfg, san.dseq)
                  + seq_param_count(san.dseq, san.seq_blocks, san.seq_len))
        cache_bytes = 0
        trained = ("adapter", "head", "seq")
        traversed = ("backbone",)
    else:  # decoupled regimes
        towers_f = _tower_fwd(text_cfg, image_cfg, san, m)
        peft_f = towers_f + seq_f
        fwd_backbone = 0 if regime == DPEFT_CACHED else backbone_f
        bwd = 2 * peft_f
        act = _tower_act_floats(text_cfg, image_cfg, san, m) + seq_act
        params = (tower_param_count(text_cfg.hidden_dim, image_cfg.hidden_dim, m,
                                    san.bottleneck, san.dseq, san.variant == "va")
                  + seq_param_count(san.dseq, san.seq_blocks, san.seq_len))
        if regime == DPEFT_CACHED:
            cache_bytes = (cache_file_size(catalog_items, m + 1, text_cfg.hidden_dim)
                           + cache_file_size(catalog_items, m + 1, image_cfg.hidden_dim))
        else:
            cache_bytes = 0
        trained = ("tower", "seq")
        traversed = ()

    return CostReport(
        regime=regime,
        fwd_backbone_flops=batch * fwd_backbone,
        fwd_peft_flops=batch * peft_f,
        bwd_flops=batch * bwd,
        activation_bytes=4 * batch * act,
        trainable_params=params,
        cache_bytes=cache_bytes,
        workload=wl,
        weight_grad_segments=trained,
        traversal_segments=traversed,
    )


# --- regime comparison -----------------------------------------------------------

_EXPECTED_ORDER = (DPEFT_CACHED, DPEFT_UNCACHED, EPEFT_ADAPTER, FFT)


@dataclass
class Comparison:
    lines: list[str]
    verdict: Optional[str]  # "PASS" | "FAIL" | None for a degenerate table


def compare(reports: Sequence[CostReport]) -> Comparison:
    """Tabulate reports over one workload and check the expected regime ordering."""
    if not reports:
        raise ContractError("compare: no reports")
    wl = reports[0].workload
    if any(r.workload != wl for r in reports):
        raise ContractError("compare: reports cover different workloads")

    header = f"{'regime':<16}{'fwd_backbone':>16}{'fwd_peft':>14}{'bwd':>16}{'act_bytes':>14}{'params':>12}{'cache':>12}"
    lines = [header]
    for r in sorted(reports, key=lambda r: (r.activation_bytes, r.bwd_flops)):
        lines.append(f"{r.regime:<16}{r.fwd_backbone_flops:>16}{r.fwd_peft_flops:>14}"
                     f"{r.bwd_flops:>16}{r.activation_bytes:>14}{r.trainable_params:>12}{r.cache_bytes:>12}")

    if len(reports) < 2:
        return Comparison(lines, None)

    by_regime = {r.regime: r for r in reports}
    present = [by_regime[name] for name in _EXPECTED_ORDER if name in by_regime]
    ok = True
    for metric in ("activation_bytes", "bwd_flops"):
        values = [getattr(r, metric) for r in present]
        if any(b < a for a, b in zip(values, values[1:])):
            ok = False
    return Comparison(lines, "PASS" if ok else "FAIL")


# --- gradient-flow probe -----------------------------------------------------------

_SEGMENT_BY_PREFIX = {
    "backbone": "backbone",
    "intra_text": "tower", "intra_image": "tower", "inter": "tower",
    "dtl": "tower", "fusion": "tower",
    "adapter": "adapter",
    "head": "head",
    "seq": "seq",
}


def segment_of(param_name: str) -> str:
    return _SEGMENT_BY_PREFIX[param_name.split(".", 1)[0]]


@dataclass
class ProbeReport:
    regime: str
    grad_param_names: set[str]
    all_param_names: set[str]
    backbone_param_names: set[str]
    backbone_activations_retained: bool
    backbone_weights_unchanged: bool

    @property
    def segments_with_gradients(self) -> tuple[str, ...]:
        return tuple(sorted({segment_of(n) for n in self.grad_param_names}))


@dataclass
class ProbeSetup:
    """A tiny but real training instance shared by every regime."""

    text_cfg: EncoderConfig
    image_cfg: EncoderConfig
    bottleneck: int
    dseq: int
    users: dict[int, list[int]]

    @classmethod
    def default(cls) -> "ProbeSetup":
        return cls(
            text_cfg=EncoderConfig("text", 2, 8, 32, 16, seed=101),
            image_cfg=EncoderConfig("image", 2, 8, 32, 32, seed=202),
            bottleneck=4,
            dseq=8,
            users={1: [0, 1, 2, 3, 4], 2: [2, 3, 4, 0, 1], 3: [4, 5, 1, 2, 3]},
        )


def _epeft_item_matrix(encoders, adapters, head, candidates):
    rows = []
    for item_id in candidates:
        pooled = []
        for enc, adp in ((encoders[0], adapters[0]), (encoders[1], adapters[1])):
            ids = np.asarray(item_tokens(enc.cfg, item_id), dtype=np.int64)
            with ad.scope(f"backbone.{enc.cfg.modality}"):
                x = ad.add(ad.take_rows(enc.token_table.tensor, ids),
                           ad.take_rows(enc.pos_table.tensor, np.arange(ids.size)))
            for blk, blk_adapter in zip(enc.blocks, adp):
                with ad.scope(f"backbone.{enc.cfg.modality}"):
                    x = blk(x)
                x = blk_adapter(x)
            pooled.append(ad.take_rows(x, [0]))
        rows.append(ad.concat_cols(pooled))
    return head(ad.concat_rows(rows))


def _fft_item_matrix(encoders, head, candidates):
    rows = []
    for item_id in candidates:
        pooled = []
        for enc in encoders:
            states = encode_item_graph(enc, item_tokens(enc.cfg, item_id))
            pooled.append(states[-1])
        rows.append(ad.concat_cols(pooled))
    return head(ad.concat_rows(rows))


def gradient_flow_probe(regime: str, setup: Optional[ProbeSetup] = None) -> ProbeReport:
    """Run one real training step in `regime` and report where gradients landed.

    Both decoupled regimes share one gradient graph (caching changes where
    stacks come from, never what is differentiated), so they probe equally.
    """
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    setup = setup or ProbeSetup.default()
    split = split_leave_one_out(InteractionDataset.from_users(setup.users))
    popularity = compute_popularity(split)
    users = sorted(split.train)
    cfg = TrainConfig(lr=1e-3, batch_size=len(users), epochs=1, dropout=0.0, seed=0, max_seq_len=6)

    fft = regime == FFT
    text_enc = build_encoder(setup.text_cfg, trainable=fft)
    image_enc = build_encoder(setup.image_cfg, trainable=fft)
    backbone_params = text_enc.parameters() + image_enc.parameters()
    backbone_names = {p.name for p in backbone_params}
    snapshot = {p.name: p.data.copy() for p in backbone_params}

    if regime in (DPEFT_CACHED, DPEFT_UNCACHED):
        rec = RecModel(
            build_model("vs", setup.text_cfg.layers, setup.text_cfg.hidden_dim,
                        setup.image_cfg.layers, setup.image_cfg.hidden_dim,
                        bottleneck=setup.bottleneck, dseq=setup.dseq, seed=1),
            SeqEncoder(dim=setup.dseq, blocks=2, heads=2, max_seq_len=cfg.max_seq_len, seed=2))
        provider = EncodeStateProvider(text_enc, image_enc, rec.iisan.text_plan, rec.iisan.image_plan)
        trainables = rec.parameters()
        debug: list = []
        train_step(rec, users, split, popularity, provider, cfg, None, None, debug_out=debug)
        tape, loss = debug[0]
    else:
        rng = np.random.default_rng(3)
        head = Linear(setup.text_cfg.hidden_dim + setup.image_cfg.hidden_dim,
                      setup.dseq, "head", rng)
        seq = SeqEncoder(dim=setup.dseq, blocks=2, heads=2, max_seq_len=cfg.max_seq_len, seed=2)
        adapters = None
        if regime == EPEFT_ADAPTER:
            adapters = (
                [SanBlock(setup.text_cfg.hidden_dim, setup.bottleneck, f"adapter.text.block{i + 1}", rng)
                 for i in range(setup.text_cfg.layers)],
                [SanBlock(setup.image_cfg.hidden_dim, setup.bottleneck, f"adapter.image.block{i + 1}", rng)
                 for i in range(setup.image_cfg.layers)],
            )
        trainables = head.parameters() + seq.parameters()
        if adapters is not None:
            for side in adapters:
                for blk in side:
                    trainables.extend(blk.parameters())
        if fft:
            trainables = backbone_params + trainables

        windows = batch_windows(users, split, cfg.max_seq_len)
        candidates = sorted({item for w in windows.values() for item in w})
        with Tape() as tape:
            if regime == EPEFT_ADAPTER:
                item_matrix = _epeft_item_matrix((text_enc, image_enc), adapters, head, candidates)
            else:
                item_matrix = _fft_item_matrix((text_enc, image_enc), head, candidates)
            loss = sequence_loss(seq, item_matrix, candidates, windows, split, popularity)

    # gradients must be taken before the update: tape entries reference live arrays
    all_params = trainables if fft else trainables + backbone_params
    grad_map = ad.backward(tape, loss, all_params)
    Adam(trainables, lr=cfg.lr).step(grad_map)
    retained = any(e.scope.startswith("backbone") for e in tape.entries)
    unchanged = all(np.array_equal(snapshot[p.name], p.data) for p in backbone_params)
    return ProbeReport(
        regime=regime,
        grad_param_names=set(grad_map),
        all_param_names={p.name for p in all_params},
        backbone_param_names=backbone_names,
        backbone_activations_retained=retained,
        backbone_weights_unchanged=unchanged,
    )
