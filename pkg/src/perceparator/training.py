"""AdamP optimisation, step-halving learning rate, training epochs and checkpoints."""

from __future__ import annotations

import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import model_config_from_dict, model_config_to_dict, parse_kv, render_kv
from .data import SeparationBatch, iter_batches
from .errors import (
    CheckpointError,
    CorruptChecksum,
    FormatVersionMismatch,
    NonFiniteError,
    NonFiniteGradient,
    ShapeMismatch,
    TrainingDiverged,
)
from .model import ModelConfig, ModelParams, forward, init_params
from .objectives import pairwise_si_snr, perm_bruteforce, upit_loss_tensor


@dataclass
class AdamPState:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    eps: float = 1e-8
    delta: float = 0.1
    wd_ratio: float = 0.1
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    HYPER = ("beta1", "beta2", "weight_decay", "eps", "delta", "wd_ratio")


def _cosine_rows(a: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    num = np.abs((a * b).sum(axis=1))
    return num / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), eps)


def project_update(w: np.ndarray, grad: np.ndarray, update: np.ndarray, delta: float,
                   eps: float) -> tuple[np.ndarray, bool]:
    """Remove the radial component of ``update`` when ``w`` looks scale-invariant.

    Checked per output channel first, then for the tensor as a whole; the test
    is ``max |cos(w, grad)| < delta / sqrt(view width)``. Returns the
    (possibly) projected update and whether projection happened.
    """
    for rows in (w.shape[0], 1):
        wv, gv = w.reshape(rows, -1), grad.reshape(rows, -1)
        if _cosine_rows(wv, gv, eps).max() < delta / math.sqrt(wv.shape[1]):
            wn = wv / (np.linalg.norm(wv, axis=1, keepdims=True) + eps)
            uv = update.reshape(rows, -1)
            uv = uv - wn * (wn * uv).sum(axis=1, keepdims=True)
            return uv.reshape(update.shape), True
    return update, False


def adamp_step(params: dict, grads: dict, state: AdamPState, lr: float) -> dict:
    """One in-place AdamP update of every array in ``params``.

    Tensors of rank >= 2 are eligible for projection; when it triggers, weight
    decay is scaled by ``state.wd_ratio``. Returns ``{name: projected?}``.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t
    projected = {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        m = state.exp_avg.setdefault(name, np.zeros_like(w))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(w))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        denom = np.sqrt(v) / math.sqrt(bc2) + state.eps
        step_size = lr / bc1
        update = m / denom
        wd_ratio, hit = 1.0, False
        if w.ndim > 1:
            update, hit = project_update(w, g, update, state.delta, state.eps)
            if hit:
                wd_ratio = state.wd_ratio
        projected[name] = hit
        if state.weight_decay > 0:
            w *= 1 - lr * state.weight_decay * wd_ratio
        w -= step_size * update
    return projected


@dataclass
class LrSchedule:
    base_rate: float = 1e-4
    halving_interval: int = 64


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.base_rate * 2.0 ** -(epoch // schedule.halving_interval)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    si_snri: float


def _mixture_baseline(mix: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """si_snr(mixture, ref_k) for every item and speaker -> [B, N_S]."""
    b, n, t = refs.shape
    return pairwise_si_snr(np.broadcast_to(mix[:, None, :], refs.shape), refs)[:, 0, :]


def train_step(params: ModelParams, config: ModelConfig, mix: np.ndarray, refs: np.ndarray,
               state: AdamPState, lr: float, clip_norm: float = 5.0):
    """Forward, uPIT loss, backward and one AdamP update on a single batch.

    Returns ``(loss, per-item SI-SNRi array)``.
    """
    named = params.named()
    T.zero_grad(t for _, t in named)
    x = T.Tensor(mix, dtype=params.encoder_w.dtype)
    with T.Tape() as tape:
        ests = forward(x, params, config)
        loss, assignments, _ = upit_loss_tensor(ests, refs)
    T.backward(loss, tape)
    grads = {name: t.grad for name, t in named if t.grad is not None}
    if clip_norm:
        clip_grad_norm(grads, clip_norm)
    adamp_step({name: t.data for name, t in named}, grads, state, lr)
    base = _mixture_baseline(mix, refs)
    gains = []
    for b, a in enumerate(assignments):
        gains.append(a.score - float(np.mean(base[b, list(a.permutation)])))
    return float(loss.data), np.asarray(gains)


def train_epoch(params: ModelParams, config: ModelConfig, data: SeparationBatch,
                state: AdamPState, schedule: LrSchedule, epoch: int, *, seed: int = 0,
                batch_size: int = 4, clip_norm: float = 5.0) -> EpochMetrics:
    """One shuffled pass; the shuffle depends only on ``(seed, epoch)``."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    lr = lr_at(schedule, epoch)
    order = np.random.default_rng([seed, epoch]).permutation(len(data))
    losses, weights, gains = [], [], []
    for i, (mix, refs) in enumerate(iter_batches(data, batch_size, order)):
        try:
            loss, g = train_step(params, config, mix, refs, state, lr, clip_norm)
        except NonFiniteError as exc:
            raise TrainingDiverged(i, exc) from exc
        losses.append(loss)
        weights.append(len(mix))
        gains.extend(g)
    return EpochMetrics(epoch, lr, float(np.average(losses, weights=weights)),
                        float(np.mean(gains)))


def evaluate(params: ModelParams, config: ModelConfig, data: SeparationBatch,
             batch_size: int = 4) -> np.ndarray:
    """Per-item SI-SNRi (dB) under the best permutation, no gradient tracking."""
    out = []
    for mix, refs in iter_batches(data, batch_size):
        ests = forward(T.Tensor(mix, dtype=params.encoder_w.dtype), params, config).data
        scores = pairwise_si_snr(ests, refs)
        base = _mixture_baseline(mix, refs)
        for b in range(len(mix)):
            a = perm_bruteforce(scores[b])
            out.append(a.score - float(np.mean(base[b, list(a.permutation)])))
    return np.asarray(out)


# checkpoints ----------------------------------------------------------------------

MAGIC = b"PCPR"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict                 # name -> float32 array
    optimizer: AdamPState
    epoch: int = 0               # number of completed epochs
    seed: int = 0                # shuffles are a pure function of (seed, epoch)
    extra: dict = field(default_factory=dict)   # free-form key -> str

    @classmethod
    def from_training(cls, config, params: ModelParams, state: AdamPState, epoch: int,
                      seed: int, extra=None) -> "Checkpoint":
        return cls(config, {k: v.copy() for k, v in params.arrays().items()}, state,
                   epoch, seed, dict(extra or {}))

    def build_params(self) -> ModelParams:
        params = init_params(self.config, 0)
        params.load_arrays(self.params)
        return params


def _header_text(ckpt: Checkpoint) -> str:
    entries = dict(model_config_to_dict(ckpt.config))
    entries["state.epoch"] = str(ckpt.epoch)
    entries["state.seed"] = str(ckpt.seed)
    entries["adamp.step"] = str(ckpt.optimizer.step)
    for h in AdamPState.HYPER:
        entries[f"adamp.{h}"] = repr(float(getattr(ckpt.optimizer, h)))
    for k, v in ckpt.extra.items():
        entries[f"extra.{k}"] = str(v)
    return render_kv(entries)


def _u32(n):
    return struct.pack("<I", n)


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _u32(len(raw)) + raw


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"adamp.m/{k}", v) for k, v in ckpt.optimizer.exp_avg.items()]
    arrays += [(f"adamp.v/{k}", v) for k, v in ckpt.optimizer.exp_avg_sq.items()]
    parts = [MAGIC, _u32(FORMAT_VERSION), _blob(_header_text(ckpt)), _u32(len(arrays))]
    for name, arr in arrays:
        arr = np.asarray(arr)
        parts.append(_blob(name))
        parts.append(_u32(arr.ndim))
        parts.append(b"".join(struct.pack("<Q", n) for n in arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _u32(zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a crash never leaves a partial file under ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptChecksum("unexpected end of checkpoint data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def parse_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC[:len(data[:4])]:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    if len(data) < 12:
        raise CorruptChecksum(f"checkpoint truncated to {len(data)} bytes")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CorruptChecksum("checksum mismatch; file is truncated or corrupted")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    entries = parse_kv(r.text())
    model_keys = {k: v for k, v in entries.items() if "." not in k}
    config = model_config_from_dict(model_keys)
    try:
        opt = AdamPState(step=int(entries["adamp.step"]),
                         **{h: float(entries[f"adamp.{h}"]) for h in AdamPState.HYPER})
        epoch, seed = int(entries["state.epoch"]), int(entries["state.seed"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint header lacks {exc.args[0]!r}") from None
    params = {}
    for _ in range(r.u32()):
        name = r.text()
        shape = tuple(r.u64() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        kind, _, key = name.partition("/")
        {"param": params, "adamp.m": opt.exp_avg, "adamp.v": opt.exp_avg_sq}.get(
            kind, {})[key] = arr
    if r.pos != len(body):
        raise CorruptChecksum("trailing bytes after the last array")
    extra = {k[len("extra."):]: v for k, v in entries.items() if k.startswith("extra.")}
    return Checkpoint(config, params, opt, epoch, seed, extra)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
