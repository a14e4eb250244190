"""Multi-head attention, the Perceparator block, and analytic MAC accounting.

Latents act as queries. A block is one or more perceiving (cross-attention)
sublayers reading the chunk, then one or more latent (self-attention)
sublayers, all pre-LayerNorm residual.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import HeadsDoNotDivideF, InvalidConfig, ShapeMismatch
from .tensor import Tensor

CATEGORIES = ("projection", "cross_score", "cross_mix", "self_score", "self_mix", "ffn")


@dataclass
class MacCounter:
    """Multiply-accumulate tallies computed from operand shapes.

    ``tallies`` is keyed by the coarse categories in ``CATEGORIES``; ``detail``
    splits them further (e.g. ``cross.kv_projection``) and always sums to the
    same totals.
    """

    tallies: Counter = field(default_factory=Counter)
    detail: Counter = field(default_factory=Counter)

    def add(self, category: str, macs: int, detail: str | None = None) -> None:
        if category not in CATEGORIES:
            raise ValueError(f"unknown MAC category {category!r}")
        self.tallies[category] += int(macs)
        self.detail[detail or category] += int(macs)

    def merge(self, other: "MacCounter") -> "MacCounter":
        self.tallies.update(other.tallies)
        self.detail.update(other.detail)
        return self

    @property
    def total(self) -> int:
        return sum(self.tallies.values())


@dataclass
class MhaParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    heads: int = field(default=1, metadata={"static": True})

    @property
    def features(self) -> int:
        return self.w_q.shape[0]


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class SublayerParams:
    """One residual attention sublayer: norms, attention, optional feed-forward.

    ``norm_kv`` is only present for perceiving (cross) sublayers; ``norm_ff``
    and ``ff`` only when the feed-forward width is non-zero.
    """

    norm_q_g: Tensor
    norm_q_b: Tensor
    attn: MhaParams
    norm_kv_g: Tensor | None = None
    norm_kv_b: Tensor | None = None
    norm_ff_g: Tensor | None = None
    norm_ff_b: Tensor | None = None
    ff: FeedForwardParams | None = None


@dataclass
class PerceparatorBlockParams:
    perceiving: list
    latent: list


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def init_mha(rng: np.random.Generator, features: int, heads: int, dtype=None) -> MhaParams:
    if heads < 1 or features % heads:
        raise HeadsDoNotDivideF(f"{heads} heads do not divide {features} features")
    dtype = dtype or T.get_default_dtype()
    mats = {}
    for name in ("q", "k", "v", "o"):
        mats[f"w_{name}"] = _uniform(rng, (features, features), features, dtype)
        mats[f"b_{name}"] = _zeros((features,), dtype)
    return MhaParams(heads=heads, **mats)


def init_sublayer(rng, features, heads, cross: bool, d_ff: int = 0, dtype=None) -> SublayerParams:
    dtype = dtype or T.get_default_dtype()
    p = SublayerParams(
        norm_q_g=_ones((features,), dtype),
        norm_q_b=_zeros((features,), dtype),
        attn=init_mha(rng, features, heads, dtype),
    )
    if cross:
        p.norm_kv_g = _ones((features,), dtype)
        p.norm_kv_b = _zeros((features,), dtype)
    if d_ff > 0:
        p.norm_ff_g = _ones((features,), dtype)
        p.norm_ff_b = _zeros((features,), dtype)
        p.ff = FeedForwardParams(
            w1=_uniform(rng, (features, d_ff), features, dtype),
            b1=_zeros((d_ff,), dtype),
            w2=_uniform(rng, (d_ff, features), d_ff, dtype),
            b2=_zeros((features,), dtype),
        )
    return p


def init_block(rng, features: int, heads: int, n_perceiving: int = 1, n_latent: int = 1,
               d_ff: int = 0, dtype=None) -> PerceparatorBlockParams:
    if n_perceiving < 1 or n_latent < 1:
        raise InvalidConfig("a block needs at least one perceiving and one latent sublayer")
    return PerceparatorBlockParams(
        perceiving=[init_sublayer(rng, features, heads, True, d_ff, dtype)
                    for _ in range(n_perceiving)],
        latent=[init_sublayer(rng, features, heads, False, d_ff, dtype)
                for _ in range(n_latent)],
    )


def _batch_count(shape) -> int:
    return int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, f = x.shape
    x = T.reshape(x, (*lead, n, heads, f // heads))
    nd = x.ndim
    return T.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    nd = x.ndim
    x = T.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    return T.reshape(x, (*lead, n, h * d))


def multi_head_attention(q_in: Tensor, kv_in: Tensor, p: MhaParams,
                         counter: MacCounter | None = None, kind: str = "cross") -> Tensor:
    """Scaled dot-product attention of ``q_in`` [..., N_q, F] over ``kv_in`` [..., M, F].

    ``kind`` ("cross" or "self") only selects the MAC categories charged.
    """
    f = p.features
    if q_in.shape[-1] != f or kv_in.shape[-1] != f:
        raise ShapeMismatch(f"attention: inputs {q_in.shape}, {kv_in.shape} vs width {f}")
    if p.heads < 1 or f % p.heads:
        raise HeadsDoNotDivideF(f"{p.heads} heads do not divide {f} features")
    if kind not in ("cross", "self"):
        raise ValueError(f"kind must be 'cross' or 'self', got {kind!r}")
    n_q, m = q_in.shape[-2], kv_in.shape[-2]
    d_h = f // p.heads

    q = _split_heads(T.linear(q_in, p.w_q, p.b_q), p.heads)
    k = _split_heads(T.linear(kv_in, p.w_k, p.b_k), p.heads)
    v = _split_heads(T.linear(kv_in, p.w_v, p.b_v), p.heads)
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(d_h))
    weights = T.softmax(scores, axis=-1)
    out = T.linear(_merge_heads(T.matmul(weights, v)), p.w_o, p.b_o)

    if counter is not None:
        nb = max(_batch_count(q_in.shape), _batch_count(kv_in.shape))
        counter.add("projection", nb * n_q * f * f, f"{kind}.q_projection")
        counter.add("projection", nb * 2 * m * f * f, f"{kind}.kv_projection")
        counter.add("projection", nb * n_q * f * f, f"{kind}.out_projection")
        counter.add(f"{kind}_score", nb * n_q * m * f)
        counter.add(f"{kind}_mix", nb * n_q * m * f)
    return out


def feed_forward(x: Tensor, p: FeedForwardParams, counter: MacCounter | None = None) -> Tensor:
    h = T.relu(T.linear(x, p.w1, p.b1))
    if counter is not None:
        n = int(np.prod(x.shape[:-1], dtype=np.int64))
        counter.add("ffn", 2 * n * x.shape[-1] * p.w1.shape[1])
    return T.linear(h, p.w2, p.b2)


def _sublayer(latent: Tensor, source: Tensor | None, p: SublayerParams,
              counter: MacCounter | None, eps: float) -> Tensor:
    q = T.layer_norm(latent, p.norm_q_g, p.norm_q_b, eps)
    if source is None:
        latent = latent + multi_head_attention(q, q, p.attn, counter, "self")
    else:
        kv = T.layer_norm(source, p.norm_kv_g, p.norm_kv_b, eps)
        latent = latent + multi_head_attention(q, kv, p.attn, counter, "cross")
    if p.ff is not None:
        latent = latent + feed_forward(T.layer_norm(latent, p.norm_ff_g, p.norm_ff_b, eps),
                                       p.ff, counter)
    return latent


def perceparator_block(h_chunk: Tensor, latent: Tensor, p: PerceparatorBlockParams,
                       counter: MacCounter | None = None, eps: float = 1e-5) -> Tensor:
    """Update ``latent`` [..., L, F] by attending to ``h_chunk`` [..., C, F], then to itself."""
    if h_chunk.shape[-1] != latent.shape[-1]:
        raise ShapeMismatch(f"block: chunk {h_chunk.shape} vs latent {latent.shape}")
    for sub in p.perceiving:
        latent = _sublayer(latent, h_chunk, sub, counter, eps)
    for sub in p.latent:
        latent = _sublayer(latent, None, sub, counter, eps)
    return latent


# complexity probe -------------------------------------------------------------

@dataclass
class ProbeResult:
    rows: list          # (C, L, F, H, category, macs)
    exponents: dict     # series name -> fitted log-log slope in C
    chunk_exponent: float
    reference_exponent: float

    def within(self, tol: float = 0.05) -> bool:
        return (abs(self.chunk_exponent - 1.0) <= tol
                and abs(self.reference_exponent - 2.0) <= tol)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["C", "L", "F", "H", "category", "macs"])
        w.writerows(self.rows)
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'C':>6} {'L':>4} {'F':>5} {'H':>3}  {'category':<28} {'MACs':>16}"]
        for c, l, f, h, cat, macs in self.rows:
            lines.append(f"{c:>6} {l:>4} {f:>5} {h:>3}  {cat:<28} {macs:>16,d}")
        lines.append("")
        lines.append("fitted exponent in C (log-log least squares):")
        for name, slope in self.exponents.items():
            lines.append(f"  {name:<34} {slope:6.3f}")
        return "\n".join(lines)


CHUNK_SERIES = ("cross_score", "cross_mix", "cross.kv_projection")


def fit_exponent(xs, ys) -> float:
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if np.any(ys <= 0):
        return 0.0
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def complexity_probe(configs, seed: int = 0) -> ProbeResult:
    """Count MACs of one Perceparator block and of full self-attention over the chunk.

    ``configs`` is a sequence of (C, L, F, H) with at least three distinct C and
    common L, F, H. Counts come from running the real forward pass (no tape).
    """
    configs = [tuple(int(v) for v in cfg) for cfg in configs]
    if len({c[0] for c in configs}) < 3:
        raise InvalidConfig("complexity_probe needs at least 3 distinct chunk lengths")
    if len({c[1:] for c in configs}) != 1:
        raise InvalidConfig("complexity_probe varies C only; L, F, H must be fixed")
    _, L, F, H = configs[0]
    rng = np.random.default_rng(seed)
    block = init_block(rng, F, H)
    reference = init_mha(rng, F, H)
    latent = Tensor(rng.standard_normal((L, F)) * 0.02)

    rows, series = [], {}
    for C, *_ in sorted(configs):
        h = Tensor(rng.standard_normal((C, F)))
        blk, ref = MacCounter(), MacCounter()
        perceparator_block(h, latent, block, blk)
        multi_head_attention(h, h, reference, ref, "self")
        record = {**{k: blk.tallies[k] for k in CATEGORIES}, **dict(blk.detail)}
        record["chunk_dependent"] = sum(blk.detail[k] for k in CHUNK_SERIES)
        record["block_total"] = blk.total
        record["reference.self_score"] = ref.tallies["self_score"]
        record["reference.self_mix"] = ref.tallies["self_mix"]
        for name, macs in record.items():
            rows.append((C, L, F, H, name, int(macs)))
            series.setdefault(name, []).append((C, macs))

    exponents = {}
    for name in (*CHUNK_SERIES, "chunk_dependent", "self_score", "block_total",
                 "reference.self_score", "reference.self_mix"):
        cs, ms = zip(*series[name])
        exponents[name] = fit_exponent(cs, ms)
    return ProbeResult(rows, exponents, exponents["chunk_dependent"],
                       exponents["reference.self_score"])
