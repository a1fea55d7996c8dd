"""Side-adapter towers over frozen hidden-state ladders.

A model owns three towers of bottleneck blocks: one per modality refining
that encoder's ladder through learnable scalar gates, plus an inter-modal
tower mixing both ladders per level. Asymmetric pairings (a deeper text
encoder) are aligned by a LayerDrop plan on the text side and a dimension
transform down to the image width. A final linear fusion of the three tower
outputs produces the item embedding consumed by the sequential encoder.

Layer selection modes:
  symmetric_even  keep blocks 2, 4, ..., L
  asym_even_all   keep m = L_image/2 blocks spread evenly over all L_text
  asym_grouped    keep every k-th block counting back from the top, with k
                  the largest group size such that L_text - k*m >= 1
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError, FormatError, VersionError
from .layers import Linear

MODE_SYMMETRIC_EVEN = "symmetric_even"
MODE_ASYM_EVEN_ALL = "asym_even_all"
MODE_ASYM_GROUPED = "asym_grouped"
MODES = (MODE_SYMMETRIC_EVEN, MODE_ASYM_EVEN_ALL, MODE_ASYM_GROUPED)

VARIANT_SYMMETRIC = "vs"
VARIANT_ASYMMETRIC = "va"


@dataclass(frozen=True)
class LayerDropPlan:
    """The backbone block indices (1-based) feeding a tower."""

    mode: str
    source_layers: int
    kept_indices: tuple[int, ...]
    group_size: Optional[int] = None

    @property
    def m(self) -> int:
        return len(self.kept_indices)

    def cache_layers(self) -> tuple[int, ...]:
        """State indices to cache: the embedding output plus the kept blocks."""
        return (0,) + self.kept_indices


def select_layers(mode: str, source_layers: int, image_layers: Optional[int] = None) -> LayerDropPlan:
    if mode not in MODES:
        raise ConfigError(f"unknown layer-drop mode {mode!r}")
    if source_layers < 2:
        raise ConfigError(f"need at least 2 source layers, got {source_layers}")

    if mode == MODE_SYMMETRIC_EVEN:
        kept = tuple(range(2, source_layers + 1, 2))
        return LayerDropPlan(mode, source_layers, kept)

    if image_layers is None:
        raise ConfigError(f"mode {mode} needs the image layer count")
    m = image_layers // 2
    if m < 1:
        raise ConfigError(f"image encoder with {image_layers} layers leaves no blocks to keep")
    if source_layers < m:
        raise ConfigError(f"{source_layers} source layers cannot feed {m} blocks")

    if mode == MODE_ASYM_EVEN_ALL:
        kept: list[int] = []
        for j in range(1, m + 1):
            idx = int(math.floor(j * source_layers / m + 0.5))  # round half up
            if kept and idx <= kept[-1]:
                idx = kept[-1] + 1  # deduplicate upward
            kept.append(idx)
        if kept[-1] > source_layers:
            raise ConfigError(f"cannot place {m} distinct blocks within {source_layers} layers")
        return LayerDropPlan(mode, source_layers, tuple(kept))

    # grouped: largest k with source_layers - k*m >= 1, anchored at the top layer
    k = (source_layers - 1) // m
    if k < 1:
        raise ConfigError(f"no feasible group size for {source_layers} layers and {m} blocks")
    kept = tuple(source_layers - (m - j) * k for j in range(1, m + 1))
    return LayerDropPlan(mode, source_layers, kept, group_size=k)


class SanBlock:
    """Bottleneck adapter: x + up(gelu(down(x))). Zero-initialized up makes it the identity."""

    def __init__(self, dim: int, bottleneck: int, name: str, rng: np.random.Generator, dtype=np.float32):
        self.down = Linear(dim, bottleneck, f"{name}.down", rng, dtype=dtype)
        self.up = Linear(bottleneck, dim, f"{name}.up", rng, zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.up(ad.gelu(self.down(x))))

    def parameters(self) -> list[Parameter]:
        return self.down.parameters() + self.up.parameters()


class GateParam:
    """Scalar gate sigmoid(raw); raw starts at 0 so mixing starts balanced."""

    def __init__(self, name: str, dtype=np.float32):
        self.raw = Parameter(Tensor(np.zeros((), dtype=dtype)), name)

    def value(self) -> Tensor:
        return ad.sigmoid(self.raw.tensor)

    def parameters(self) -> list[Parameter]:
        return [self.raw]


class DimensionTransform:
    """Aligns the text hidden width to the image width (asymmetric variant only)."""

    def __init__(self, text_dim: int, image_dim: int, name: str, rng: np.random.Generator, dtype=np.float32):
        self.proj = Linear(text_dim, image_dim, name, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(x)

    def parameters(self) -> list[Parameter]:
        return self.proj.parameters()


def _check_stack(states: Sequence[Tensor], m: int, who: str) -> None:
    if len(states) != m + 1:
        raise ContractError(f"{who}: expected {m + 1} stack entries (embedding + kept), got {len(states)}")


class IntraTower:
    """Single-modality ladder: block 1 sees the embedding state, later blocks a
    gated mix of the previous block output and the current kept state."""

    def __init__(self, dim: int, bottleneck: int, m: int, name: str,
                 rng: np.random.Generator, dtype=np.float32):
        self.m = m
        self.blocks = [SanBlock(dim, bottleneck, f"{name}.block{i}", rng, dtype) for i in range(1, m + 1)]
        self.gates = {i: GateParam(f"{name}.gate{i}", dtype) for i in range(2, m + 1)}

    def __call__(self, states: Sequence[Tensor]) -> Tensor:
        _check_stack(states, self.m, "intra tower")
        b = self.blocks[0](states[0])
        for i in range(2, self.m + 1):
            g = self.gates[i].value()
            mixed = ad.add(ad.mul(b, g), ad.mul(states[i], ad.one_minus(g)))
            b = self.blocks[i - 1](mixed)
        return b

    def parameters(self) -> list[Parameter]:
        out = []
        for blk in self.blocks:
            out.extend(blk.parameters())
        for i in sorted(self.gates):
            out.extend(self.gates[i].parameters())
        return out


class InterTower:
    """Cross-modality ladder: each block mixes the image state with the
    (width-aligned) text state by a gate, plus the previous block output."""

    def __init__(self, dim: int, bottleneck: int, m: int, name: str,
                 rng: np.random.Generator, dtype=np.float32):
        self.m = m
        self.blocks = [SanBlock(dim, bottleneck, f"{name}.block{i}", rng, dtype) for i in range(1, m + 1)]
        self.gates = {i: GateParam(f"{name}.gate{i}", dtype) for i in range(1, m + 1)}

    def __call__(self, text_states: Sequence[Tensor], image_states: Sequence[Tensor],
                 dtl: Optional[DimensionTransform]) -> Tensor:
        _check_stack(text_states, self.m, "inter tower (text)")
        _check_stack(image_states, self.m, "inter tower (image)")
        aligned = [dtl(t) for t in text_states] if dtl is not None else list(text_states)
        g1 = self.gates[1].value()
        b = self.blocks[0](ad.add(ad.mul(image_states[0], g1), ad.mul(aligned[0], ad.one_minus(g1))))
        for i in range(2, self.m + 1):
            g = self.gates[i].value()
            mixed = ad.add(ad.mul(image_states[i], g), ad.mul(aligned[i], ad.one_minus(g)))
            b = self.blocks[i - 1](ad.add(mixed, b))
        return b

    def parameters(self) -> list[Parameter]:
        out = []
        for blk in self.blocks:
            out.extend(blk.parameters())
        for i in sorted(self.gates):
            out.extend(self.gates[i].parameters())
        return out


class IisanModel:
    """Three towers, optional dimension transform, and the fusion layer."""

    def __init__(self, variant: str, text_plan: LayerDropPlan, image_plan: LayerDropPlan,
                 text_dim: int, image_dim: int, bottleneck: int, dseq: int,
                 seed: int = 0, dtype=np.float32):
        if variant not in (VARIANT_SYMMETRIC, VARIANT_ASYMMETRIC):
            raise ConfigError(f"unknown variant {variant!r}")
        if variant == VARIANT_SYMMETRIC and text_dim != image_dim:
            raise ConfigError(f"symmetric variant needs equal hidden dims, got {text_dim} and {image_dim}")
        if text_plan.m != image_plan.m:
            raise ConfigError(f"towers must share m: text plan keeps {text_plan.m}, image {image_plan.m}")

        self.variant = variant
        self.text_plan = text_plan
        self.image_plan = image_plan
        self.text_dim = text_dim
        self.image_dim = image_dim
        self.bottleneck = bottleneck
        self.dseq = dseq
        self.dtype = dtype
        m = text_plan.m

        rng = np.random.default_rng(seed)
        self.intra_text = IntraTower(text_dim, bottleneck, m, "intra_text", rng, dtype)
        self.intra_image = IntraTower(image_dim, bottleneck, m, "intra_image", rng, dtype)
        self.inter = InterTower(image_dim, bottleneck, m, "inter", rng, dtype)
        self.dtl = (DimensionTransform(text_dim, image_dim, "dtl", rng, dtype)
                    if variant == VARIANT_ASYMMETRIC else None)
        self.fusion_in = image_dim + image_dim + text_dim
        self.fusion = Linear(self.fusion_in, dseq, "fusion", rng, dtype=dtype)

    @property
    def m(self) -> int:
        return self.text_plan.m

    def item_embed(self, text_states: Sequence[Tensor], image_states: Sequence[Tensor]) -> Tensor:
        """Fused item embedding; rows are items when states carry batched rows."""
        e_text = self.intra_text(text_states)
        e_image = self.intra_image(image_states)
        e_inter = self.inter(text_states, image_states, self.dtl)
        return self.fusion(ad.concat_cols([e_image, e_inter, e_text]))

    def parameters(self) -> list[Parameter]:
        out = []
        out.extend(self.intra_text.parameters())
        out.extend(self.intra_image.parameters())
        out.extend(self.inter.parameters())
        if self.dtl is not None:
            out.extend(self.dtl.parameters())
        out.extend(self.fusion.parameters())
        return out


def build_model(variant: str, text_layers: int, text_dim: int, image_layers: int, image_dim: int,
                text_mode: Optional[str] = None, bottleneck: int = 16, dseq: int = 64,
                seed: int = 0, dtype=np.float32) -> IisanModel:
    """Construct towers from encoder shapes; plans are derived here."""
    image_plan = select_layers(MODE_SYMMETRIC_EVEN, image_layers)
    if variant == VARIANT_SYMMETRIC:
        if text_mode not in (None, MODE_SYMMETRIC_EVEN):
            raise ConfigError(f"symmetric variant only supports {MODE_SYMMETRIC_EVEN}, got {text_mode}")
        if text_layers != image_layers:
            raise ConfigError(f"symmetric variant needs equal layer counts, got {text_layers} and {image_layers}")
        text_plan = select_layers(MODE_SYMMETRIC_EVEN, text_layers)
    elif variant == VARIANT_ASYMMETRIC:
        mode = text_mode or MODE_ASYM_EVEN_ALL
        if mode == MODE_SYMMETRIC_EVEN:
            raise ConfigError("asymmetric variant needs an asymmetric layer-drop mode for the text side")
        text_plan = select_layers(mode, text_layers, image_layers)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return IisanModel(variant, text_plan, image_plan, text_dim, image_dim,
                      bottleneck, dseq, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"IISM"
CHECKPOINT_VERSION = 1
_VARIANT_CODES = {VARIANT_SYMMETRIC: 0, VARIANT_ASYMMETRIC: 1}
_MODE_CODES = {m: i for i, m in enumerate(MODES)}


@dataclass(frozen=True)
class CheckpointMeta:
    variant: str
    text_plan: LayerDropPlan
    image_plan: LayerDropPlan
    text_dim: int
    image_dim: int
    bottleneck: int
    dseq: int
    seq_blocks: int
    seq_heads: int
    max_seq_len: int


def _pack_plan(plan: LayerDropPlan) -> bytes:
    body = struct.pack("<BHHH", _MODE_CODES[plan.mode], plan.source_layers,
                       plan.m, plan.group_size or 0)
    return body + struct.pack(f"<{plan.m}H", *plan.kept_indices)


def _unpack_plan(f) -> LayerDropPlan:
    mode_code, src, m, k = struct.unpack("<BHHH", f.read(7))
    kept = struct.unpack(f"<{m}H", f.read(2 * m))
    modes = {v: k2 for k2, v in _MODE_CODES.items()}
    return LayerDropPlan(modes[mode_code], src, tuple(kept), group_size=k or None)


def save_checkpoint(path, meta: CheckpointMeta, params: Sequence[Parameter]) -> None:
    """Parameters are stored as raw little-endian float32 in declaration order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HB", CHECKPOINT_VERSION, _VARIANT_CODES[meta.variant]))
        f.write(_pack_plan(meta.text_plan))
        f.write(_pack_plan(meta.image_plan))
        f.write(struct.pack("<IIIIHHH", meta.text_dim, meta.image_dim, meta.bottleneck,
                            meta.dseq, meta.seq_blocks, meta.seq_heads, meta.max_seq_len))
        total = sum(p.data.size for p in params)
        f.write(struct.pack("<Q", total))
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[CheckpointMeta, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        version, variant_code = struct.unpack("<HB", f.read(3))
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}", offset=4)
        variants = {v: k for k, v in _VARIANT_CODES.items()}
        text_plan = _unpack_plan(f)
        image_plan = _unpack_plan(f)
        text_dim, image_dim, bottleneck, dseq, seq_blocks, seq_heads, max_seq_len = \
            struct.unpack("<IIIIHHH", f.read(22))
        (total,) = struct.unpack("<Q", f.read(8))
        blob = f.read(total * 4)
        if len(blob) != total * 4:
            raise FormatError("truncated checkpoint parameter blob", offset=f.tell())
        meta = CheckpointMeta(variants[variant_code], text_plan, image_plan, text_dim,
                              image_dim, bottleneck, dseq, seq_blocks, seq_heads, max_seq_len)
        return meta, np.frombuffer(blob, dtype="<f4").astype(np.float32)


def assign_parameters(params: Sequence[Parameter], flat: np.ndarray) -> None:
    """Copy a checkpoint blob into parameters, consuming it in declaration order."""
    offset = 0
    for p in params:
        n = p.data.size
        if offset + n > flat.size:
            raise FormatError("checkpoint has fewer values than the model expects")
        p.tensor.data = flat[offset:offset + n].reshape(p.data.shape).astype(p.data.dtype)
        p.tensor.requires_grad = p.trainable
        offset += n
    if offset != flat.size:
        raise FormatError(f"checkpoint has {flat.size - offset} unconsumed values")
