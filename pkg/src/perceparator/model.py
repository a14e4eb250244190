"""Encoder, latent-bottleneck masking network and decoder.

Internally the masking network runs time-major ([batch, time, features]) so
that layer norms and linear maps act on the trailing axis. The public
``encode``/``decode`` keep the channel-first [F, T'] layout of the encoder.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .attention import MacCounter, PerceparatorBlockParams, init_block, perceparator_block
from .errors import InputTooShort, InvalidConfig, LayoutMismatch, ShapeMismatch
from .tensor import Tensor, map_tensors, named_tensors

OVERLAP_CHOICES = ("none", "half")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 256          # F, encoder filters and model width
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    chunk_size: int = 250        # C
    overlap: str = "none"
    latent_len: int = 32         # L
    n_blocks: int = 15           # N
    heads: int = 16
    n_latent: int = 1
    n_perceiving: int = 1
    n_speakers: int = 2
    d_ff: int = 0
    mask_ffw_width: int | None = None   # defaults to ``channels``
    share_blocks: bool = False
    norm_eps: float = 1e-5

    def __post_init__(self):
        checks = [
            (self.channels >= 1, "channels must be >= 1"),
            (self.heads >= 1 and self.channels % self.heads == 0,
             f"heads ({self.heads}) must divide channels ({self.channels})"),
            (self.kernel_size >= 1, "kernel_size must be >= 1"),
            (self.stride >= 1, "stride must be >= 1"),
            (self.padding >= 0, "padding must be >= 0"),
            (self.chunk_size >= 1, "chunk_size must be >= 1"),
            (self.overlap in OVERLAP_CHOICES, f"overlap must be one of {OVERLAP_CHOICES}"),
            (self.overlap != "half" or self.chunk_size % 2 == 0,
             "overlap=half needs an even chunk_size"),
            (self.latent_len >= 1, "latent_len must be >= 1"),
            (self.n_blocks >= 1, "n_blocks must be >= 1"),
            (self.n_latent >= 1 and self.n_perceiving >= 1,
             "n_latent and n_perceiving must be >= 1"),
            (self.n_speakers >= 2, "n_speakers must be >= 2"),
            (self.d_ff >= 0, "d_ff must be >= 0"),
            (self.mask_ffw_width is None or self.mask_ffw_width >= 1,
             "mask_ffw_width must be positive"),
            (self.norm_eps > 0, "norm_eps must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidConfig(msg)

    @property
    def ffw_width(self) -> int:
        return self.mask_ffw_width or self.channels

    @property
    def hop(self) -> int:
        return self.chunk_size // 2 if self.overlap == "half" else self.chunk_size

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ModelParams:
    encoder_w: Tensor        # [F, 1, K]
    encoder_b: Tensor        # [F]
    norm_g: Tensor
    norm_b: Tensor
    in_w: Tensor             # [F, F]
    in_b: Tensor
    latent: Tensor           # [L, F]
    blocks: list             # PerceparatorBlockParams, one per repeat (or one if shared)
    restore_seq_w: Tensor    # [L, C], latent axis -> chunk positions
    restore_seq_b: Tensor    # [C]
    restore_feat_w: Tensor   # [F, F]
    restore_feat_b: Tensor
    prelu: Tensor            # [F]
    expand_w: Tensor         # [F, N_S * F]
    expand_b: Tensor
    mask_w1: Tensor          # [N_S, F, W]
    mask_b1: Tensor          # [N_S, 1, W]
    mask_w2: Tensor          # [N_S, W, F]
    mask_b2: Tensor          # [N_S, 1, F]
    decoder_w: Tensor        # [F, 1, K]
    decoder_b: Tensor        # [1]

    def named(self):
        return list(named_tensors(self))

    def arrays(self) -> dict:
        return {name: t.data for name, t in named_tensors(self)}

    def tensors(self) -> list:
        return [t for _, t in named_tensors(self)]

    def astype(self, dtype) -> "ModelParams":
        return map_tensors(self, lambda t: Tensor(t.data.astype(dtype), requires_grad=True,
                                                  dtype=dtype))

    def load_arrays(self, arrays: dict) -> None:
        """Copy named arrays into the existing tensors (shapes must match)."""
        own = dict(named_tensors(self))
        missing = set(own) - set(arrays)
        if missing:
            raise ShapeMismatch(f"missing parameter arrays: {sorted(missing)[:5]}")
        for name, t in own.items():
            src = np.asarray(arrays[name])
            if src.shape != t.shape:
                raise ShapeMismatch(f"{name}: stored {src.shape} vs model {t.shape}")
            t.data = src.astype(t.dtype, copy=True)

    def block(self, i: int) -> PerceparatorBlockParams:
        return self.blocks[0] if len(self.blocks) == 1 else self.blocks[i]


@dataclass(frozen=True)
class ChunkLayout:
    chunk_size: int
    hop: int
    n_chunks: int
    pad_len: int
    length: int      # original T'

    @property
    def padded_length(self) -> int:
        return self.hop * (self.n_chunks - 1) + self.chunk_size


def make_layout(length: int, chunk_size: int, overlap: str = "none") -> ChunkLayout:
    if chunk_size < 1:
        raise InvalidConfig("chunk_size must be >= 1")
    if overlap == "half":
        if chunk_size % 2:
            raise InvalidConfig(f"overlap=half needs an even chunk size, got {chunk_size}")
        hop = chunk_size // 2
    elif overlap == "none":
        hop = chunk_size
    else:
        raise InvalidConfig(f"overlap must be 'none' or 'half', got {overlap!r}")
    n_chunks = -(-(max(length, chunk_size) - chunk_size) // hop) + 1
    pad_len = hop * (n_chunks - 1) + chunk_size - length
    return ChunkLayout(chunk_size, hop, n_chunks, pad_len, length)


# initialisation ----------------------------------------------------------------

def _param(array, dtype):
    return Tensor(array, requires_grad=True, dtype=dtype)


def _kaiming(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return _param(rng.uniform(-bound, bound, size=shape), dtype)


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     lo: float = -2.0, hi: float = 2.0) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> ModelParams:
    """Draw a fresh parameter set; identical seeds give identical parameters."""
    dtype = dtype or T.get_default_dtype()
    rng = np.random.default_rng(seed)
    F, K, L, C = config.channels, config.kernel_size, config.latent_len, config.chunk_size
    S, W = config.n_speakers, config.ffw_width
    zeros = lambda *shape: _param(np.zeros(shape), dtype)  # noqa: E731
    n_block_sets = 1 if config.share_blocks else config.n_blocks
    return ModelParams(
        encoder_w=_kaiming(rng, (F, 1, K), K, dtype),
        encoder_b=zeros(F),
        norm_g=_param(np.ones(F), dtype),
        norm_b=zeros(F),
        in_w=_kaiming(rng, (F, F), F, dtype),
        in_b=zeros(F),
        latent=_param(truncated_normal(rng, (L, F)), dtype),
        blocks=[init_block(rng, F, config.heads, config.n_perceiving, config.n_latent,
                           config.d_ff, dtype) for _ in range(n_block_sets)],
        restore_seq_w=_kaiming(rng, (L, C), L, dtype),
        restore_seq_b=zeros(C),
        restore_feat_w=_kaiming(rng, (F, F), F, dtype),
        restore_feat_b=zeros(F),
        prelu=_param(np.full(F, 0.25), dtype),
        expand_w=_kaiming(rng, (F, S * F), F, dtype),
        expand_b=zeros(S * F),
        mask_w1=_kaiming(rng, (S, F, W), F, dtype),
        mask_b1=zeros(S, 1, W),
        mask_w2=_kaiming(rng, (S, W, F), W, dtype),
        mask_b2=zeros(S, 1, F),
        decoder_w=_kaiming(rng, (F, 1, K), K, dtype),
        decoder_b=zeros(1),
    )


def count_params(params: ModelParams) -> int:
    return sum(t.size for _, t in named_tensors(params))


# pipeline stages -----------------------------------------------------------------

def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return T.reshape(x, (1, *x.shape)), True
    if x.ndim != rank + 1:
        raise ShapeMismatch(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")
    return x, False


def encode(x: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Waveform [1, T] (or [B, 1, T]) -> non-negative features [F, T'] ([B, F, T'])."""
    if x.shape[-1] + 2 * config.padding < config.kernel_size:
        raise InputTooShort(
            f"input length {x.shape[-1]} shorter than kernel {config.kernel_size}")
    return T.relu(T.conv1d(x, params.encoder_w, params.encoder_b,
                           stride=config.stride, padding=config.padding))


@lru_cache(maxsize=32)
def _positional_table(length: int, features: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, features, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / features)
    table = np.zeros((length, features))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : features // 2])
    table.setflags(write=False)
    return table


def positional_table(length: int, features: int) -> np.ndarray:
    """Fixed sine/cosine table [length, features]: even columns sin, odd columns cos."""
    return _positional_table(length, features)


def add_positional(h: Tensor) -> Tensor:
    """Add the intra-chunk position table to chunks [..., C, F]."""
    C, F = h.shape[-2:]
    return h + Tensor(positional_table(C, F), dtype=h.dtype)


def chunk_time_major(y: Tensor, chunk_size: int, overlap: str = "none"):
    """[..., T', D] -> ([..., N_C, C, D], layout), zero-padding on the right."""
    layout = make_layout(y.shape[-2], chunk_size, overlap)
    padded = T.pad_axis(y, -2, layout.pad_len)
    return T.frame(padded, layout.chunk_size, layout.hop), layout


def overlap_add_time_major(chunks: Tensor, layout: ChunkLayout) -> Tensor:
    """[..., N_C, C, D] -> [..., T', D]: sum at hop offsets, divide by coverage, crop."""
    if chunks.shape[-3:-1] != (layout.n_chunks, layout.chunk_size):
        raise LayoutMismatch(
            f"chunks {chunks.shape} do not match layout "
            f"({layout.n_chunks} x {layout.chunk_size})")
    summed = T.fold(chunks, layout.hop)
    if layout.hop != layout.chunk_size:
        cover = _coverage(layout.n_chunks, layout.chunk_size, layout.hop)
        summed = summed * Tensor(1.0 / cover[:, None], dtype=summed.dtype)
    if layout.pad_len:
        summed = T.getitem(summed, (Ellipsis, slice(0, layout.length), slice(None)))
    return summed


def _coverage(n_chunks: int, size: int, hop: int) -> np.ndarray:
    cover = np.zeros(hop * (n_chunks - 1) + size)
    for n in range(n_chunks):
        cover[n * hop:n * hop + size] += 1
    return cover


def chunk(y: Tensor, chunk_size: int, overlap: str = "none"):
    """Encoder-layout features [F, T'] -> (chunks [N_C, C, F], layout)."""
    return chunk_time_major(T.transpose(y, (1, 0)), chunk_size, overlap)


def overlap_add(chunks: Tensor, layout: ChunkLayout) -> Tensor:
    """Chunks [N_C, C, D] -> [D, T']; inverse of :func:`chunk`."""
    return T.transpose(overlap_add_time_major(chunks, layout), (1, 0))


def masking_forward(e: Tensor, params: ModelParams, config: ModelConfig,
                    counter: MacCounter | None = None) -> Tensor:
    """Encoded mixture [F, T'] or [B, F, T'] -> masks [N_S, F, T'] or [B, N_S, F, T']."""
    e, single = _batched(e, 2)
    B, F, length = e.shape
    if F != config.channels:
        raise ShapeMismatch(f"encoded features {F} vs configured channels {config.channels}")
    S, L, C = config.n_speakers, config.latent_len, config.chunk_size

    h = T.transpose(e, (0, 2, 1))
    h = T.layer_norm(h, params.norm_g, params.norm_b, config.norm_eps)
    h = T.linear(h, params.in_w, params.in_b)
    h, layout = chunk_time_major(h, C, config.overlap)
    h = add_positional(h)
    n = B * layout.n_chunks
    h = T.reshape(h, (n, C, F))

    lat = T.broadcast_to(params.latent, (n, L, F))
    for i in range(config.n_blocks):
        lat = perceparator_block(h, lat, params.block(i), counter, config.norm_eps)

    r = T.matmul(T.transpose(lat, (0, 2, 1)), params.restore_seq_w) + params.restore_seq_b
    r = T.linear(T.transpose(r, (0, 2, 1)), params.restore_feat_w, params.restore_feat_b)
    r = T.prelu(r, params.prelu)
    r = T.linear(r, params.expand_w, params.expand_b)
    r = T.reshape(r, (B, layout.n_chunks, C, S * F))

    y = overlap_add_time_major(r, layout)
    y = T.transpose(T.reshape(y, (B, length, S, F)), (0, 2, 1, 3))
    m = T.relu(T.matmul(y, params.mask_w1) + params.mask_b1)
    m = T.relu(T.matmul(m, params.mask_w2) + params.mask_b2)
    masks = T.transpose(m, (0, 1, 3, 2))
    return T.reshape(masks, masks.shape[1:]) if single else masks


def decode(masks: Tensor, e: Tensor, params: ModelParams, config: ModelConfig,
           length: int | None = None) -> Tensor:
    """Apply masks [(B,) N_S, F, T'] to e [(B,) F, T'] and decode to [(B,) N_S, T]."""
    e, single = _batched(e, 2)
    masks, _ = _batched(masks, 3)
    B, F, n = e.shape
    if masks.shape[0] != B or masks.shape[2:] != (F, n):
        raise ShapeMismatch(f"decode: masks {masks.shape} vs encoded {e.shape}")
    S = masks.shape[1]
    masked = T.reshape(masks * T.reshape(e, (B, 1, F, n)), (B * S, F, n))
    out = T.conv1d_transpose(masked, params.decoder_w, params.decoder_b, stride=config.stride)
    out = T.reshape(out, (B, S, out.shape[-1]))
    if config.padding:
        out = T.getitem(out, (Ellipsis, slice(config.padding, out.shape[-1] - config.padding)))
    if length is not None:
        if out.shape[-1] > length:
            out = T.getitem(out, (Ellipsis, slice(0, length)))
        elif out.shape[-1] < length:
            out = T.pad_axis(out, -1, length - out.shape[-1])
    return T.reshape(out, out.shape[1:]) if single else out


def forward(x: Tensor, params: ModelParams, config: ModelConfig,
            counter: MacCounter | None = None) -> Tensor:
    """Mixture [1, T] or [B, T] -> estimated sources [1, N_S, T] or [B, N_S, T]."""
    if x.ndim != 2:
        raise ShapeMismatch(f"forward expects [1, T] or [B, T], got {x.shape}")
    B, length = x.shape
    e = encode(T.reshape(x, (B, 1, length)), params, config)
    masks = masking_forward(e, params, config, counter)
    return decode(masks, e, params, config, length)


def separate(waveform: np.ndarray, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Convenience inference on a 1-D waveform; returns [N_S, T] float array."""
    x = Tensor(np.asarray(waveform)[None, :], dtype=params.encoder_w.dtype)
    return forward(x, params, config).data[0]
