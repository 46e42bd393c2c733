"""Scene-agnostic cross-attention decoder over per-voxel code banks.

A trainable MLP encoder embeds raw keypoint descriptors, T stacked
cross-attention blocks attend over the voxel's scaled codes, and a small
head emits a local 3D coordinate plus an in-voxel confidence logit.
Single-head attention, post-norm residual blocks, logits scaled by 1/sqrt(D).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .containers import FormatError, Reader, Writer
from .diffcore import DTensor, MLP, Tape
from .scene import CodeBank, VoxelId

WEIGHTS_MAGIC = b"NMWT"
WEIGHTS_FORMAT_VERSION = 1


@dataclass
class BlockParams:
    wq: DTensor
    wk: DTensor
    wv: DTensor
    mlp: MLP
    ln1_gain: DTensor
    ln1_bias: DTensor
    ln2_gain: DTensor
    ln2_bias: DTensor

    def parameters(self) -> list[DTensor]:
        return ([self.wq, self.wk, self.wv] + self.mlp.parameters()
                + [self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias])


class DecoderParams:
    """All scene-agnostic weights: encoder, attention blocks, output head."""

    def __init__(self, encoder: MLP, blocks: list[BlockParams], head: MLP,
                 d_raw: int, d: int,
                 encoder_hidden: int, block_hidden: int, head_hidden: int):
        self.encoder = encoder
        self.blocks = blocks
        self.head = head
        self.d_raw = d_raw
        self.d = d
        self.encoder_hidden = encoder_hidden
        self.block_hidden = block_hidden
        self.head_hidden = head_hidden

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @classmethod
    def init(cls, rng: np.random.Generator, d_raw: int = 64, d: int = 32,
             num_blocks: int = 6, encoder_hidden: int = 64,
             block_hidden: int = 32, head_hidden: int = 32) -> "DecoderParams":
        # encoder_hidden == 0 selects a single linear layer, which preserves
        # descriptor similarity structure exactly (a hidden ReLU layer does not)
        enc_widths = [d_raw, d] if encoder_hidden == 0 \
            else [d_raw, encoder_hidden, d]
        encoder = MLP.init(enc_widths, rng, prefix="encoder")
        blocks = []
        bound = np.sqrt(6.0 / (d + d))
        for t in range(num_blocks):
            blocks.append(BlockParams(
                wq=DTensor(rng.uniform(-bound, bound, (d, d)),
                           requires_grad=True, name=f"block.{t}.wq"),
                wk=DTensor(rng.uniform(-bound, bound, (d, d)),
                           requires_grad=True, name=f"block.{t}.wk"),
                wv=DTensor(rng.uniform(-bound, bound, (d, d)),
                           requires_grad=True, name=f"block.{t}.wv"),
                mlp=MLP.init([d, block_hidden, d], rng, prefix=f"block.{t}.mlp"),
                ln1_gain=DTensor(np.ones((1, d)), requires_grad=True,
                                 name=f"block.{t}.ln1.gain"),
                ln1_bias=DTensor(np.zeros((1, d)), requires_grad=True,
                                 name=f"block.{t}.ln1.bias"),
                ln2_gain=DTensor(np.ones((1, d)), requires_grad=True,
                                 name=f"block.{t}.ln2.gain"),
                ln2_bias=DTensor(np.zeros((1, d)), requires_grad=True,
                                 name=f"block.{t}.ln2.bias"),
            ))
        head = MLP.init([d, head_hidden, 4], rng, prefix="head")
        return cls(encoder, blocks, head, d_raw, d,
                   encoder_hidden, block_hidden, head_hidden)

    def named_parameters(self) -> dict[str, DTensor]:
        out = {}
        for p in self.encoder.parameters() + self.head.parameters():
            out[p.name] = p
        for blk in self.blocks:
            for p in blk.parameters():
                out[p.name] = p
        return dict(sorted(out.items()))


def encode_feature(tape, params: DecoderParams, raw: DTensor) -> DTensor:
    """Embed raw descriptors (M, D_raw) -> features (M, D)."""
    if raw.shape[1] != params.d_raw:
        raise dc.DimensionError(
            f"descriptor width {raw.shape} != encoder input {params.d_raw}")
    return params.encoder.forward(tape, raw)


@dataclass
class DecodeStats:
    skipped_blocks: list[int] = field(default_factory=list)


def _canonical_order(bank: CodeBank, t: int, idx: np.ndarray) -> np.ndarray:
    """Reorder active code rows lexicographically by (code, scale) values.

    Every reduction downstream then sees the codes in a storage-order-free
    sequence, so permuting rows of a bank leaves decode outputs
    bit-identical. Fully duplicated rows commute exactly, so ties are safe.
    """
    rows = np.hstack([bank.codes[t].values[idx], bank.scales[t].values[idx]])
    return idx[np.lexsort(rows.T[::-1])]


def cross_attention_block(tape, f: DTensor, bank: CodeBank, t: int,
                          params: DecoderParams,
                          stats: DecodeStats | None = None) -> DTensor:
    """One post-norm residual cross-attention block over block-t codes.

    A block whose codes are all pruned acts as identity on f (skip) and is
    recorded in stats.
    """
    blk = params.blocks[t]
    idx = bank.active_rows(t)
    if len(idx) == 0:
        if stats is not None:
            stats.skipped_blocks.append(t)
        return f
    idx = _canonical_order(bank, t, idx)
    codes = dc.take_rows(tape, bank.codes[t], idx)
    w = dc.take_rows(tape, bank.scales[t], idx)
    scaled = dc.mul(tape, codes, w)
    q = dc.matmul(tape, f, blk.wq)
    k = dc.matmul(tape, scaled, blk.wk)
    v = dc.matmul(tape, scaled, blk.wv)
    logits = dc.scale(tape, dc.matmul_nt(tape, q, k), 1.0 / np.sqrt(params.d))
    attn = dc.softmax_rows(tape, logits)
    attended = dc.attn_matmul(tape, attn, v)
    f1 = dc.layer_norm(tape, dc.add(tape, f, attended),
                       blk.ln1_gain, blk.ln1_bias)
    f2 = dc.layer_norm(tape, dc.add(tape, f1, blk.mlp.forward(tape, f1)),
                       blk.ln2_gain, blk.ln2_bias)
    return f2


@dataclass
class DecodeResult:
    """Batched decode output for one voxel."""
    local: DTensor        # (M, 3) coordinates in the voxel frame, meters
    confidence: DTensor   # (M, 1) sigmoid probabilities in (0, 1)
    origin: np.ndarray
    stats: DecodeStats

    def world(self) -> np.ndarray:
        return self.local.values + self.origin


@dataclass
class Prediction:
    local_coord: np.ndarray
    confidence: float
    voxel: VoxelId

    def world(self, origin: np.ndarray) -> np.ndarray:
        return self.local_coord + origin


def decode(tape, params: DecoderParams, features: DTensor, bank: CodeBank,
           origin: np.ndarray) -> DecodeResult:
    """Run encoded features (M, D) through all blocks and the output head."""
    if features.shape[1] != params.d:
        raise dc.DimensionError(
            f"feature width {features.shape} != decoder width {params.d}")
    if bank.dims[2] != params.d:
        raise dc.DimensionError(
            f"code width {bank.dims} != decoder width {params.d}")
    stats = DecodeStats()
    f = features
    for t in range(params.num_blocks):
        f = cross_attention_block(tape, f, bank, t, params, stats)
    out = params.head.forward(tape, f)
    local = dc.slice_cols(tape, out, 0, 3)
    conf = dc.sigmoid(tape, dc.slice_cols(tape, out, 3, 4))
    return DecodeResult(local, conf, origin, stats)


def attention_scores(params: DecoderParams, features: DTensor,
                     bank: CodeBank, block: int, code: int):
    """Per-input attention scores for one code, plus min-max normalization.

    s is column `code` of the block's attention matrix over the feature
    batch; s_norm maps [min, max] over the batch to [0, 1], with an all-zero
    result when the batch scores are constant.
    """
    idx = bank.active_rows(block)
    if code not in idx:
        raise ValueError(f"code {code} in block {block} is pruned or inactive")
    idx = _canonical_order(bank, block, idx)
    pos = np.flatnonzero(idx == code)
    tape = None
    blk = params.blocks[block]
    f = features
    for t in range(block):
        f = cross_attention_block(tape, f, bank, t, params)
    codes = dc.take_rows(tape, bank.codes[block], idx)
    w = dc.take_rows(tape, bank.scales[block], idx)
    scaled = dc.mul(tape, codes, w)
    q = dc.matmul(tape, f, blk.wq)
    k = dc.matmul(tape, scaled, blk.wk)
    logits = dc.scale(tape, dc.matmul_nt(tape, q, k), 1.0 / np.sqrt(params.d))
    attn = dc.softmax_rows(tape, logits)
    s = attn.values[:, pos[0]].copy()
    lo, hi = s.min(), s.max()
    if hi - lo == 0.0:
        return s, np.zeros_like(s)
    return s, (s - lo) / (hi - lo)


def params_to_bytes(params: DecoderParams) -> bytes:
    w = Writer()
    w.magic(WEIGHTS_MAGIC)
    w.u32(WEIGHTS_FORMAT_VERSION)
    for v in (params.d_raw, params.d, params.num_blocks,
              params.encoder_hidden, params.block_hidden, params.head_hidden):
        w.u32(v)
    named = params.named_parameters()
    w.u32(len(named))
    for name, tens in named.items():
        raw = name.encode()
        w.u32(len(raw))
        w.bytes_(raw)
        w.u32(tens.values.ndim)
        for s in tens.values.shape:
            w.u32(s)
        w.f32_array(tens.values)
    return w.getvalue()


def params_from_bytes(data: bytes) -> DecoderParams:
    r = Reader(data)
    r.expect_magic(WEIGHTS_MAGIC)
    version = r.u32("format version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise FormatError(4, f"unsupported weights format version {version}")
    d_raw = r.u32("d_raw")
    d = r.u32("d")
    num_blocks = r.u32("num_blocks")
    enc_h = r.u32("encoder hidden")
    blk_h = r.u32("block hidden")
    head_h = r.u32("head hidden")
    params = DecoderParams.init(np.random.default_rng(0), d_raw, d, num_blocks,
                                enc_h, blk_h, head_h)
    named = params.named_parameters()
    count = r.u32("parameter count")
    if count != len(named):
        raise FormatError(r.offset, f"expected {len(named)} parameters, got {count}")
    for _ in range(count):
        nlen = r.u32("name length")
        name = r.raw(nlen, "parameter name").decode()
        ndim = r.u32("ndim")
        shape = tuple(r.u32("dim") for _ in range(ndim))
        vals = r.f32_array(int(np.prod(shape)), f"values of {name}").reshape(shape)
        if name not in named:
            raise FormatError(r.offset, f"unknown parameter {name!r}")
        if named[name].values.shape != shape:
            raise FormatError(r.offset, f"shape mismatch for {name!r}")
        named[name].values[...] = vals
        named[name].zero_grad()
    r.expect_end()
    return params


def save_params(params: DecoderParams, path) -> None:
    with open(path, "wb") as f:
        f.write(params_to_bytes(params))


def load_params(path) -> DecoderParams:
    with open(path, "rb") as f:
        return params_from_bytes(f.read())
