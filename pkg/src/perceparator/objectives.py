"""SI-SNR, SI-SNR improvement and utterance-level permutation invariant training."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateReference, LengthMismatch, TooManySources
from .tensor import Tensor

EPS = 1e-8
CAP_DB = 60.0
MAX_SOURCES = 6


@dataclass(frozen=True)
class PermAssignment:
    permutation: tuple   # estimate index i is matched to reference permutation[i]
    score: float         # mean SI-SNR (dB) under that matching


def _check_pair(est_shape, ref_shape):
    if est_shape[-1] != ref_shape[-1]:
        raise LengthMismatch(f"estimate length {est_shape[-1]} vs reference {ref_shape[-1]}")
    if est_shape[-1] < 1:
        raise LengthMismatch("signals must have at least one sample")


def si_snr_tensor(est: Tensor, ref, eps: float = EPS, cap: float = CAP_DB,
                  zero_mean: bool = False) -> Tensor:
    """Differentiable SI-SNR in dB along the last axis (leading axes broadcast).

    ``ref`` is treated as a constant. The result is clamped to [-cap, cap].
    """
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=est.dtype)
    _check_pair(est.shape, ref.shape)
    if zero_mean:
        ref = ref - ref.mean(axis=-1, keepdims=True)
        est = est - T.mean(est, axis=-1, keepdims=True)
    ref_energy = (ref * ref).sum(axis=-1, keepdims=True)
    if np.any(ref_energy == 0):
        raise DegenerateReference("reference has zero energy")
    ref_t = Tensor(ref, dtype=est.dtype)
    dot = T.tsum(est * ref_t, axis=-1, keepdims=True)
    target = dot * Tensor(ref / (ref_energy + eps), dtype=est.dtype)
    noise = est - target
    num = T.tsum(T.square(target), axis=-1) + eps
    den = T.tsum(T.square(noise), axis=-1) + eps
    db = T.log(num / den) * (10.0 / math.log(10.0))
    return T.clip(db, -cap, cap)


def si_snr(est, ref, eps: float = EPS, cap: float = CAP_DB, zero_mean: bool = False):
    """SI-SNR (dB) of ``est`` against ``ref``; float for 1-D input, array otherwise."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    out = si_snr_tensor(Tensor(est, dtype=np.float64), ref, eps, cap, zero_mean).data
    return float(out) if out.ndim == 0 else out


def si_snr_improvement(est, ref, mixture, **kwargs):
    return si_snr(est, ref, **kwargs) - si_snr(mixture, ref, **kwargs)


def pairwise_si_snr_tensor(ests: Tensor, refs, **kwargs) -> Tensor:
    """[..., N, T] estimates x [..., N, T] references -> [..., N_est, N_ref] dB."""
    refs = np.asarray(refs.data if isinstance(refs, Tensor) else refs)
    if ests.shape != refs.shape:
        raise LengthMismatch(f"estimates {ests.shape} vs references {refs.shape}")
    e = T.reshape(ests, (*ests.shape[:-1], 1, ests.shape[-1]))
    r = refs[..., None, :, :]
    return si_snr_tensor(e, r, **kwargs)


def pairwise_si_snr(ests, refs, **kwargs) -> np.ndarray:
    ests = np.asarray(ests, dtype=np.float64)
    return pairwise_si_snr_tensor(Tensor(ests, dtype=np.float64), refs, **kwargs).data


def perm_bruteforce(scores) -> PermAssignment:
    """Exhaustively pick the matching maximising the mean of ``scores[i, perm[i]]``.

    Ties keep the lexicographically first permutation.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if scores.shape != (n, n):
        raise ValueError(f"score matrix must be square, got {scores.shape}")
    if n > MAX_SOURCES:
        raise TooManySources(f"{n} sources exceeds the brute-force limit of {MAX_SOURCES}")
    rows = np.arange(n)
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(n)):
        value = float(np.mean(scores[rows, list(perm)]))
        if value > best:
            best, best_perm = value, perm
    return PermAssignment(tuple(best_perm), best)


def upit_loss(ests, refs, **kwargs):
    """Negative best-permutation mean SI-SNR.

    ``ests``/``refs`` are [N_S, T] (returns ``(loss, PermAssignment)``) or
    [B, N_S, T] (returns ``(mean loss, list of PermAssignment)``).
    """
    ests = np.asarray(ests, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if ests.shape != refs.shape:
        raise LengthMismatch(f"estimates {ests.shape} vs references {refs.shape}")
    if ests.shape[-2] > MAX_SOURCES:
        raise TooManySources(f"{ests.shape[-2]} sources exceeds {MAX_SOURCES}")
    if ests.ndim == 2:
        a = perm_bruteforce(pairwise_si_snr(ests, refs, **kwargs))
        return -a.score, a
    assignments = [perm_bruteforce(m) for m in pairwise_si_snr(ests, refs, **kwargs)]
    return -float(np.mean([a.score for a in assignments])), assignments


def upit_loss_tensor(ests: Tensor, refs, **kwargs):
    """Training form of :func:`upit_loss` on [B, N_S, T] estimates.

    The permutation chosen on the forward values is held fixed for the gradient.
    Returns ``(scalar loss tensor, assignments, pairwise score array)``.
    """
    refs = np.asarray(refs, dtype=ests.dtype)
    if ests.shape[-2] > MAX_SOURCES:
        raise TooManySources(f"{ests.shape[-2]} sources exceeds {MAX_SOURCES}")
    scores = pairwise_si_snr_tensor(ests, refs, **kwargs)
    B, n = scores.shape[0], scores.shape[1]
    assignments = [perm_bruteforce(m) for m in scores.data]
    select = np.zeros(scores.shape, dtype=ests.dtype)
    for b, a in enumerate(assignments):
        select[b, np.arange(n), list(a.permutation)] = 1.0
    loss = T.tsum(scores * Tensor(select, dtype=ests.dtype)) * (-1.0 / (B * n))
    return loss, assignments, scores.data
