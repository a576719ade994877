"""Command-line interface wiring the full pipeline.

Subcommands:

    synth      generate a synthetic cohort directory (.rec files + manifest)
    pretrain   train from random init on a cohort, write a checkpoint
    finetune   adapt a pretrained checkpoint under a transfer regime
    eval       fused inference + metrics report for a checkpoint on a cohort
    loso       leave-one-subject-out cross-validation of one regime
    spectro    debug dump of one epoch's log-power image as CSV

Shared flags: ``--config`` (flat key=value file; command-line flags override
it), ``--seed`` (root seed; init / shuffle / dropout / split substreams are
derived from it), ``--jobs``, ``--out``. Defaults marked "[reference protocol]"
follow the published SeqSleepNet transfer-learning protocol; the rest are
repo choices. Every command is bit-reproducible given identical flags, seed,
and thread count.

Example:

    sleepseq synth --subjects 5 --epochs-per-subject 200 --seed 7 --out src_dir
    sleepseq synth --subjects 5 --epochs-per-subject 200 --seed 8 \\
        --mismatch warp=1.3,floor=0.5 --out tgt_dir
    sleepseq pretrain --cohort src_dir --out model.ckpt --seed 1
    sleepseq finetune --init model.ckpt --train-cohort tgt_dir \\
        --regime softmax-arnn --out tuned.ckpt
    sleepseq eval --init tuned.ckpt --cohort tgt_dir --out report
    sleepseq loso --init model.ckpt --cohort tgt_dir --regime all --out results/
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, network, spectrogram, training, transfer

_PROTOCOL = "[reference protocol]"


def _load_config(path) -> dict[str, str]:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line is not key=value: {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _peek_config(argv) -> dict[str, str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return _load_config(argv[i + 1])
        if tok.startswith("--config="):
            return _load_config(tok.split("=", 1)[1])
    return {}


class _Defaults:
    """Hard defaults, overridable by a config file."""

    def __init__(self, overrides: dict[str, str]):
        self.overrides = overrides

    def get(self, key: str, fallback, cast=str):
        if key in self.overrides:
            raw = self.overrides[key]
            if cast is bool:
                return raw.lower() in ("1", "true", "yes")
            return cast(raw)
        return fallback


def parse_mismatch(text: str | None, n_bands: int = 5) -> dataio.DomainShift:
    """Parse 'warp=1.3,floor=0.5,mix=0.4' into a DomainShift.

    ``mix`` blends the identity with a one-step cyclic band shift:
    B = (1-mix)*I + mix*shift.
    """
    if not text:
        return dataio.DomainShift.identity()
    warp, floor, mix = 1.0, 0.0, 0.0
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"mismatch component is not key=value: {part!r}")
        key, value = part.split("=", 1)
        key = key.strip()
        if key == "warp":
            warp = float(value)
        elif key == "floor":
            floor = float(value)
        elif key == "mix":
            mix = float(value)
        else:
            raise ValueError(f"unknown mismatch component {key!r} (warp/floor/mix)")
    mixing = None
    if mix != 0.0:
        shift = np.roll(np.eye(n_bands), 1, axis=0)
        mixing = (1.0 - mix) * np.eye(n_bands) + mix * shift
    return dataio.DomainShift(freq_warp=warp, band_mixing=mixing, noise_floor=floor)


def _add_common(p: argparse.ArgumentParser, d: _Defaults) -> None:
    p.add_argument("--config", type=str, default=None,
                   help="flat key=value config file; flags override it")
    p.add_argument("--seed", type=int, default=d.get("seed", 0, int),
                   help="root seed for all random substreams")
    p.add_argument("--jobs", type=int, default=d.get("jobs", 1, int),
                   help="parallel worker processes (loso folds)")


def _add_model_flags(p: argparse.ArgumentParser, d: _Defaults) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--filters", type=int, default=d.get("filters", 32, int),
                   help="filterbank size M (must be < 129)")
    g.add_argument("--ernn-hidden", type=int, default=d.get("ernn_hidden", 64, int),
                   help="epoch-level GRU units per direction")
    g.add_argument("--seqrnn-hidden", type=int, default=d.get("seqrnn_hidden", 64, int),
                   help="sequence-level GRU units per direction")
    g.add_argument("--seq-len", type=int, default=d.get("seq_len", 20, int),
                   help=f"epochs per input sequence L {_PROTOCOL}")
    g.add_argument("--dropout", type=float, default=d.get("dropout", 0.25, float),
                   help="dropout rate on filterbank/attention/sequence outputs")
    g.add_argument("--l2-lambda", type=float, default=d.get("l2_lambda", 1e-3, float),
                   help="L2 penalty weight on trainable parameters")


def _add_train_flags(p: argparse.ArgumentParser, d: _Defaults) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=d.get("epochs", 10, int),
                   help=f"training epochs {_PROTOCOL}")
    g.add_argument("--batch-size", type=int, default=d.get("batch_size", 32, int),
                   help=f"sequences per minibatch {_PROTOCOL}")
    g.add_argument("--lr", type=float, default=d.get("lr", 1e-4, float),
                   help=f"Adam learning rate {_PROTOCOL}")
    g.add_argument("--patience", type=int, default=d.get("patience", 50, int),
                   help=f"early-stop patience in steps {_PROTOCOL}")
    g.add_argument("--eval-every", type=int, default=d.get("eval_every", 10, int),
                   help="steps between validation evaluations")
    g.add_argument("--log", type=str, default=None,
                   help="write the tab-separated training log to this file")


def _hp_from_args(args) -> network.HyperParams:
    return network.HyperParams(
        n_filters=args.filters,
        ernn_hidden=args.ernn_hidden,
        seqrnn_hidden=args.seqrnn_hidden,
        seq_len=args.seq_len,
        dropout=args.dropout,
        l2_lambda=args.l2_lambda,
    )


def _cfg_from_args(args) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        early_stop_patience=args.patience,
        eval_every=args.eval_every,
        seed=args.seed,
    )


def _log_writer(path):
    if path is None:
        return None
    fh = open(path, "w", encoding="utf-8")
    return lambda line: (fh.write(line + "\n"), fh.flush())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    mismatch = parse_mismatch(args.mismatch)
    cfg = dataio.SyntheticCohortConfig(
        n_subjects=args.subjects,
        epochs_per_subject=args.epochs_per_subject,
        rng_seed=args.seed,
        mismatch=mismatch,
        subject_prefix=args.prefix,
        channel_name=args.channel,
    )
    recordings = dataio.generate_synthetic_cohort(cfg)
    dataio.save_cohort(recordings, args.out)
    print(f"wrote {len(recordings)} recordings to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cohort = dataio.load_cohort(args.cohort)
    hp = _hp_from_args(args)
    cfg = _cfg_from_args(args)
    params = training.pretrain(cohort, hp, cfg, log_fn=_log_writer(args.log))
    network.save_checkpoint(args.out, params)
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_finetune(args) -> int:
    params = network.load_checkpoint(args.init)
    regime = transfer.Regime.from_cli(args.regime)
    cfg = _cfg_from_args(args)
    train_cohort = dataio.load_cohort(args.train_cohort)
    if regime is transfer.Regime.DIRECT_TRANSFER:
        adapted = params
    else:
        if args.val_cohort:
            val_cohort = dataio.load_cohort(args.val_cohort)
        else:
            # seeded proportional split of the training cohort by subject
            ids = sorted(r.subject_id for r in train_cohort)
            rng = training.substream(args.seed, training.STREAM_SPLIT)
            order = rng.permutation(len(ids))
            n_val = max(1, round(args.val_frac * len(ids)))
            if n_val >= len(ids):
                raise ValueError("validation split would consume the whole cohort")
            val_ids = {ids[i] for i in order[:n_val]}
            val_cohort = [r for r in train_cohort if r.subject_id in val_ids]
            train_cohort = [r for r in train_cohort if r.subject_id not in val_ids]
        adapted = training.finetune(
            params,
            transfer.mask_for(regime, params.hp),
            train_cohort,
            val_cohort,
            cfg,
            log_fn=_log_writer(args.log),
        )
    network.save_checkpoint(args.out, adapted)
    print(f"wrote checkpoint {args.out}")
    return 0


def _write_report(report: evaluation.EvalReport, prefix: Path) -> None:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(str(prefix) + ".txt").write_text(report.to_text(), encoding="utf-8")
    Path(str(prefix) + ".json").write_text(report.to_json() + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    params = network.load_checkpoint(args.init)
    cohort = dataio.load_cohort(args.cohort)
    report, predictions = evaluation.evaluate_cohort(params, cohort)
    _write_report(report, Path(args.out))
    if args.dump_hypnograms:
        hyp_dir = Path(args.dump_hypnograms)
        hyp_dir.mkdir(parents=True, exist_ok=True)
        for rec_id, (_, labels) in predictions.items():
            (hyp_dir / f"{rec_id}.hyp").write_text(
                "\n".join(str(int(l)) for l in labels) + "\n", encoding="utf-8"
            )
    print(report.to_text(), end="")
    return 0


def cmd_loso(args) -> int:
    params = network.load_checkpoint(args.init)
    cohort = dataio.load_cohort(args.cohort)
    regime = transfer.Regime.from_cli(args.regime)
    cfg = _cfg_from_args(args)
    fold_reports, pooled = evaluation.loso_cv(
        cohort, params, regime, cfg, jobs=args.jobs, log_fn=print
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for test_id, report in fold_reports:
        _write_report(report, out_dir / f"fold_{test_id}")
    _write_report(pooled, out_dir / "pooled")
    print(f"wrote {len(fold_reports)} fold reports + pooled report to {out_dir}")
    return 0


def cmd_spectro(args) -> int:
    rec = dataio.load_recording(args.rec)
    if not 0 <= args.epoch < rec.n_epochs:
        raise ValueError(f"epoch index {args.epoch} outside 0..{rec.n_epochs - 1}")
    image = spectrogram.stft_logpower(rec.epoch(args.epoch), args.epoch)
    spectrogram.dump_image_csv(image, args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser(overrides: dict[str, str] | None = None) -> argparse.ArgumentParser:
    d = _Defaults(overrides or {})
    parser = argparse.ArgumentParser(
        prog="sleepseq",
        description="Sequence-to-sequence sleep staging with transfer learning",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p, d)
    p.add_argument("--subjects", type=int, default=d.get("subjects", 5, int))
    p.add_argument("--epochs-per-subject", type=int,
                   default=d.get("epochs_per_subject", 200, int))
    p.add_argument("--mismatch", type=str, default=d.get("mismatch", None),
                   help="channel-mismatch spec, e.g. warp=1.3,floor=0.5,mix=0.4")
    p.add_argument("--prefix", type=str, default=d.get("prefix", "subj"),
                   help="subject id prefix")
    p.add_argument("--channel", type=str, default=d.get("channel", "synthetic"))
    p.add_argument("--out", type=str, required=True, help="cohort directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train from scratch on a cohort",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p, d)
    _add_model_flags(p, d)
    _add_train_flags(p, d)
    p.add_argument("--cohort", type=str, required=True)
    p.add_argument("--out", type=str, required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune a checkpoint under a regime",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p, d)
    _add_train_flags(p, d)
    p.add_argument("--init", type=str, required=True, help="pretrained checkpoint")
    p.add_argument("--train-cohort", type=str, required=True)
    p.add_argument("--val-cohort", type=str, default=None,
                   help="validation cohort; defaults to a seeded split of --train-cohort")
    p.add_argument("--val-frac", type=float, default=d.get("val_frac", 0.21, float),
                   help="validation fraction when splitting --train-cohort")
    p.add_argument("--regime", type=str, default=d.get("regime", "all"),
                   choices=[r.value for r in transfer.Regime])
    p.add_argument("--out", type=str, required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cohort",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p, d)
    p.add_argument("--init", type=str, required=True, help="checkpoint path")
    p.add_argument("--cohort", type=str, required=True)
    p.add_argument("--out", type=str, required=True,
                   help="report path prefix (.txt and .json are written)")
    p.add_argument("--dump-hypnograms", type=str, default=None,
                   help="directory for per-recording predicted label files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loso", help="leave-one-subject-out cross-validation",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p, d)
    _add_train_flags(p, d)
    p.add_argument("--init", type=str, required=True, help="pretrained checkpoint")
    p.add_argument("--cohort", type=str, required=True)
    p.add_argument("--regime", type=str, default=d.get("regime", "all"),
                   choices=[r.value for r in transfer.Regime])
    p.add_argument("--out", type=str, required=True, help="report directory")
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("spectro", help="dump one epoch's log-power image as CSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p, d)
    p.add_argument("--rec", type=str, required=True, help=".rec file")
    p.add_argument("--epoch", type=int, default=0, help="epoch index")
    p.add_argument("--out", type=str, required=True, help="CSV path")
    p.set_defaults(func=cmd_spectro)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        overrides = _peek_config(argv)
        parser = build_parser(overrides)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
