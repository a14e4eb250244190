"""Synthetic two-source mixtures, PCM16 WAV I/O, manifests and dataset splits."""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidConfig, TooFewItems, UnsupportedFormat

DEFAULT_RATE = 8000
DEFAULT_SPLIT = (69, 21, 10)

LOW_BAND = (100.0, 300.0)     # f0 range of the first source
HIGH_BAND = (400.0, 900.0)    # f0 range of the second source
LOW_CEILING = 390.0           # first-source partials stay below the second band


@dataclass
class SeparationBatch:
    mixtures: np.ndarray     # [B, T]
    references: np.ndarray   # [B, N_S, T]
    sample_rate: int = DEFAULT_RATE

    def __len__(self):
        return len(self.mixtures)


# synthesis -----------------------------------------------------------------------

def _tone_stack(rng, n, rate, f0, ceiling):
    t = np.arange(n) / rate
    ks = np.arange(1, max(1, int(ceiling // f0)) + 1)
    sig = np.zeros(n)
    for k in ks:
        sig += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k**2
    am_rate = rng.uniform(1.0, 4.0)
    envelope = 1.0 + 0.5 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    sig *= envelope
    return 0.5 * sig / np.max(np.abs(sig))


def synth_pair(seed: int, duration_s: float = 2.0, sample_rate: int = DEFAULT_RATE):
    """Return ``(s1, s2, mixture)``: a low and a high harmonic stack and their sum.

    Each source is a 1/k^2 harmonic series under a slow amplitude modulation,
    peak-normalised to 0.5. Partials of ``s1`` stay below 390 Hz while ``s2``'s
    fundamental is at least 400 Hz, so the two never share a frequency.
    """
    if duration_s <= 0 or sample_rate <= 0:
        raise InvalidConfig("duration and sample rate must be positive")
    n = int(round(duration_s * sample_rate))
    if n < 1:
        raise InvalidConfig(f"{duration_s} s at {sample_rate} Hz is shorter than one sample")
    rng = np.random.default_rng(seed)
    s1 = _tone_stack(rng, n, sample_rate, rng.uniform(*LOW_BAND), LOW_CEILING)
    s2 = _tone_stack(rng, n, sample_rate, rng.uniform(*HIGH_BAND), 0.45 * sample_rate)
    return s1, s2, s1 + s2


def synth_dataset(n_items: int, seed: int = 0, duration_s: float = 2.0,
                  sample_rate: int = DEFAULT_RATE, dtype=np.float32) -> SeparationBatch:
    """Stack ``n_items`` synthetic pairs; item i uses seed ``(seed, i)``."""
    pairs = [synth_pair(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                        duration_s, sample_rate) for i in range(n_items)]
    refs = np.stack([np.stack([s1, s2]) for s1, s2, _ in pairs]).astype(dtype)
    # summed after the cast so the mixture is exactly additive in the stored dtype
    return SeparationBatch(refs.sum(axis=1, dtype=dtype), refs, sample_rate)


def iter_batches(data: SeparationBatch, batch_size: int,
                 order: Sequence[int] | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    order = np.arange(len(data)) if order is None else np.asarray(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield data.mixtures[idx], data.references[idx]


# splits --------------------------------------------------------------------------

def split(items: Sequence | int, ratios: Sequence[float] = DEFAULT_SPLIT, seed: int = 0):
    """Shuffle and partition item indices by ``ratios`` with largest-remainder rounding."""
    n = items if isinstance(items, int) else len(items)
    if n < 10:
        raise TooFewItems(f"need at least 10 items to split, got {n}")
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or np.any(ratios <= 0):
        raise InvalidConfig("split ratios must be positive")
    quotas = ratios / ratios.sum() * n
    sizes = np.floor(quotas).astype(int)
    remainder = quotas - sizes
    # stable sort keeps earlier parts first on equal remainders
    for i in np.argsort(-remainder, kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(sizes)[:-1]
    return [part.tolist() for part in np.split(order, bounds)]


# WAV ------------------------------------------------------------------------------

def wav_read(path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV file; samples are scaled by 1/32768."""
    try:
        with wave.open(os.fspath(path), "rb") as wf:
            channels, width = wf.getnchannels(), wf.getsampwidth()
            rate, frames = wf.getframerate(), wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from None
    except EOFError:
        raise UnsupportedFormat(f"{path}: truncated header") from None
    if channels != 1:
        raise UnsupportedFormat(f"{path}: channels={channels}, only mono is supported")
    if width != 2:
        raise UnsupportedFormat(f"{path}: bits_per_sample={8 * width}, only 16 is supported")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def quantize(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("cannot write non-finite samples")
    x = np.clip(x, -1.0, 1.0 - 2.0**-15)
    return np.rint(x * 32768.0).astype("<i2")


def wav_write(path, samples, sample_rate: int) -> None:
    pcm = quantize(samples)
    with wave.open(os.fspath(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())


# manifests ------------------------------------------------------------------------

@dataclass
class ManifestItem:
    mixture: Path
    references: list
    estimates: list    # empty unless the line carries estimate columns


def read_manifest(path, n_speakers: int = 2) -> list[ManifestItem]:
    """Parse ``<mix>\\t<ref1>\\t<ref2>[\\t<est1>\\t<est2>]`` lines.

    Relative paths resolve against the manifest's directory. Blank lines and
    ``#`` comments are skipped.
    """
    path = Path(path)
    base = path.parent
    items = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) not in (1 + n_speakers, 1 + 2 * n_speakers):
            raise InvalidConfig(
                f"{path}:{lineno}: expected {1 + n_speakers} or {1 + 2 * n_speakers} "
                f"tab-separated columns, got {len(cols)}")
        paths = [base / c for c in cols]
        items.append(ManifestItem(paths[0], paths[1:1 + n_speakers], paths[1 + n_speakers:]))
    return items


def write_manifest(path, rows) -> None:
    Path(path).write_text("".join("\t".join(map(str, r)) + "\n" for r in rows), encoding="utf-8")


def write_synthetic_corpus(out_dir, n_items: int, seed: int = 0, duration_s: float = 2.0,
                           sample_rate: int = DEFAULT_RATE) -> Path:
    """Write synthetic pairs as WAV files plus a ``manifest.tsv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = synth_dataset(n_items, seed, duration_s, sample_rate, dtype=np.float64)
    rows = []
    for i in range(n_items):
        names = [f"item{i:04d}_mix.wav", f"item{i:04d}_s1.wav", f"item{i:04d}_s2.wav"]
        for name, sig in zip(names, [data.mixtures[i], *data.references[i]]):
            wav_write(out_dir / name, sig, sample_rate)
        rows.append(names)
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest
