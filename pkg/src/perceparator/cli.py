"""Command-line front end: ``train``, ``separate``, ``eval`` and ``bench``.

Exit codes: 0 success, 1 usage/config/input error, 2 numeric or runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attention import complexity_probe
from .config import RunConfig
from .data import (
    SeparationBatch,
    read_manifest,
    split,
    synth_dataset,
    wav_read,
    wav_write,
)
from .errors import (
    CheckpointError,
    ConfigError,
    InvalidConfig,
    NonFiniteError,
    PerceparatorError,
    UnsupportedFormat,
)
from .model import init_params, separate
from .objectives import pairwise_si_snr, perm_bruteforce
from .training import (
    AdamPState,
    Checkpoint,
    LrSchedule,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)

log = logging.getLogger("perceparator")

METRICS_HEADER = ["epoch", "lr", "loss", "si_snri"]


class UsageError(PerceparatorError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = RunConfig.from_text(path.read_text(encoding="utf-8"))
    env_seed = os.environ.get("PERCEP_SEED")
    if env_seed:
        try:
            cfg = cfg.replace(seed=int(env_seed))
        except ValueError:
            raise ConfigError(f"PERCEP_SEED: not an integer: {env_seed!r}", "seed") from None
    return cfg


def _load_training_data(cfg: RunConfig) -> SeparationBatch:
    if not cfg.manifest:
        data = synth_dataset(cfg.synth_items, cfg.seed, cfg.synth_duration, cfg.sample_rate)
    else:
        items = read_manifest(cfg.manifest, cfg.model.n_speakers)
        if not items:
            raise ConfigError(f"manifest is empty: {cfg.manifest}", "manifest")
        mixes, refs, rate = [], [], None
        for item in items:
            mix, rate = wav_read(item.mixture)
            mixes.append(mix)
            refs.append([wav_read(p)[0] for p in item.references])
        length = min(min(len(m), *(len(r) for r in rs)) for m, rs in zip(mixes, refs))
        data = SeparationBatch(
            np.stack([m[:length] for m in mixes]).astype(np.float32),
            np.stack([[r[:length] for r in rs] for rs in refs]).astype(np.float32),
            rate)
    if len(data) >= 10:
        train_idx = split(len(data), seed=cfg.seed)[0]
        data = SeparationBatch(data.mixtures[train_idx], data.references[train_idx],
                               data.sample_rate)
    return data


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    epochs = cfg.epochs if args.epochs is None else args.epochs
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model_cfg, seed, start = ckpt.config, ckpt.seed, ckpt.epoch
        params = ckpt.build_params()
        state = ckpt.optimizer
        rows = []
        # carry earlier rows over, from the output dir or from beside the checkpoint
        for prior in (metrics_path, Path(args.resume).parent / "metrics.csv"):
            if prior.exists():
                with prior.open(newline="") as fh:
                    rows = list(csv.reader(fh))[1:]
                break
        rows = rows[:start]
    else:
        model_cfg, seed, start = cfg.model, cfg.seed, 0
        params = init_params(model_cfg, seed)
        state = AdamPState(cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps,
                           cfg.delta, cfg.wd_ratio)
        rows = []
    run_cfg = cfg.replace(model=model_cfg, seed=seed)
    data = _load_training_data(run_cfg)
    schedule = LrSchedule(cfg.lr, cfg.halving_interval)

    def write_metrics():
        with metrics_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            w.writerows(rows)

    write_metrics()
    for epoch in range(start, epochs):
        m = train_epoch(params, model_cfg, data, state, schedule, epoch, seed=seed,
                        batch_size=cfg.batch_size, clip_norm=cfg.clip_norm)
        rows.append([m.epoch, repr(m.lr), repr(m.loss), repr(m.si_snri)])
        write_metrics()
        log.info("epoch %d lr %.3g loss %.4f si_snri %.3f dB", m.epoch, m.lr, m.loss, m.si_snri)
        print(f"epoch {m.epoch}: lr={m.lr:.3g} loss={m.loss:.4f} si_snri={m.si_snri:.3f} dB")
        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == epochs:
            ckpt = Checkpoint.from_training(model_cfg, params, state, done, seed,
                                            {"sample_rate": data.sample_rate})
            save_checkpoint(out_dir / f"epoch{done:04d}.pcpr", ckpt)
            save_checkpoint(out_dir / "last.pcpr", ckpt)
    return 0


def cmd_separate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    params = ckpt.build_params()
    mix, rate = wav_read(args.input)
    if len(mix) < ckpt.config.kernel_size:
        raise UnsupportedFormat(f"{args.input}: only {len(mix)} samples")
    sources = separate(mix.astype(np.float32), params, ckpt.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, src in enumerate(sources, 1):
        path = out / f"source{k}.wav"
        wav_write(path, src, rate)
        print(path)
    return 0


def score_item(ests: np.ndarray, refs: np.ndarray, mix: np.ndarray) -> float:
    """SI-SNRi (dB) of estimates [N_S, T] under the best permutation."""
    a = perm_bruteforce(pairwise_si_snr(ests, refs))
    base = pairwise_si_snr(np.broadcast_to(mix, refs.shape), refs)[0]
    return a.score - float(np.mean(base))


def cmd_eval(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    n_spk = ckpt.config.n_speakers if ckpt else args.speakers
    items = read_manifest(manifest, n_spk)
    if not items:
        raise ConfigError(f"manifest is empty: {manifest}")
    params = ckpt.build_params() if ckpt else None
    rows = []
    for item in items:
        mix, _ = wav_read(item.mixture)
        refs = np.stack([wav_read(p)[0] for p in item.references])
        if item.estimates:
            ests = np.stack([wav_read(p)[0] for p in item.estimates])
        elif params is not None:
            ests = separate(mix.astype(np.float32), params, ckpt.config).astype(np.float64)
        else:
            raise ConfigError(f"{item.mixture}: no estimate columns and no --ckpt given")
        n = min(len(mix), refs.shape[1], ests.shape[1])
        rows.append((str(item.mixture), score_item(ests[:, :n], refs[:, :n], mix[:n])))
    values = np.array([v for _, v in rows])
    for name, v in rows:
        print(f"{name}\t{v:.4f}")
    print(f"mean\t{values.mean():.4f}")
    print(f"median\t{np.median(values):.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["item", "si_snri"])
            w.writerows((name, repr(v)) for name, v in rows)
            w.writerow(["mean", repr(float(values.mean()))])
            w.writerow(["median", repr(float(np.median(values)))])
    return 0


def cmd_bench(args) -> int:
    try:
        chunks = [int(c) for c in args.chunks.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--chunks must be comma-separated integers, got {args.chunks!r}") from None
    result = complexity_probe([(c, args.latent, args.feat, args.heads) for c in chunks])
    print(result.to_text())
    ok = result.within(0.05)
    print(f"\nchunk-dependent exponent {result.chunk_exponent:.3f} (expect 1.00 +/- 0.05), "
          f"full self-attention exponent {result.reference_exponent:.3f} (expect 2.00 +/- 0.05): "
          f"{'PASS' if ok else 'FAIL'}")
    if args.csv:
        Path(args.csv).write_text(result.to_csv(), encoding="utf-8")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="perceparator", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a key = value config")
    t.add_argument("--config", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate a mono WAV mixture")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_separate)

    e = sub.add_parser("eval", help="SI-SNRi over a manifest")
    e.add_argument("--ckpt")
    e.add_argument("--manifest", required=True)
    e.add_argument("--csv")
    e.add_argument("--speakers", type=int, default=2, help="used when no --ckpt is given")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="attention MAC scaling in chunk length")
    b.add_argument("--chunks", default="125,250,500,1000")
    b.add_argument("--latent", type=int, default=32)
    b.add_argument("--feat", type=int, default=256)
    b.add_argument("--heads", type=int, default=16)
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, InvalidConfig, UnsupportedFormat, CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PerceparatorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
