"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, verifier
from .config import BUILTIN_DATASET, RunConfig, load_config
from .data import collate, decode, encode, load_dataset, make_copy_task, prompt_text, save_dataset
from .errors import ConfigError, NoiseFitError, UsageError
from .io import RunDirLock, atomic_write_text
from .model import GenerationConfig, build_model, generate
from .snr import profile
from .tensor import Rng, no_grad
from .trainer import calibration_batches, checkpoint_load, exact_match, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("noisefit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p, config_required: bool = False):
    p.add_argument("--config", required=config_required, help="INI run configuration")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--out", help="output / run directory")


def _overrides(p):
    p.add_argument("--sigma-base", type=float)
    p.add_argument("--k-layers", type=int)
    p.add_argument("--snr-mode", choices=("highest", "lowest"))
    p.add_argument("--steps", type=int, help="cap on optimizer steps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisefit", description="SNR-guided adaptive noise fine-tuning (toy scale)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", help="fine-tune and write a run directory")
    _common(p, config_required=True)
    _overrides(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("profile-snr", help="per-layer SNR report and layer selection")
    _common(p)
    _overrides(p)
    p.add_argument("--checkpoint", help="profile trained weights instead of a fresh model")

    p = sub.add_parser("verify", help="run the empirical theory checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for report.txt and report.csv")
    p.add_argument("--quick", action="store_true", help="smaller sample sizes")

    p = sub.add_parser("generate", help="sample a response from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=0)
    d = GenerationConfig()
    p.add_argument("--max-new-tokens", type=int, default=d.max_new_tokens)
    p.add_argument("--temperature", type=float, default=d.temperature)
    p.add_argument("--top-p", type=float, default=d.top_p)
    p.add_argument("--top-k", type=int, default=d.top_k)
    p.add_argument("--repetition-penalty", type=float, default=d.repetition_penalty)

    p = sub.add_parser("diagnose", help="layer-wise metrics on a probe batch")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--zero-tol", type=float, default=1e-6)

    p = sub.add_parser("stats", help="Epps-Singleton comparisons with Holm correction")
    p.add_argument("files", nargs="+", help="experiment CSV files followed by the baseline CSV")
    p.add_argument("--column", help="score column (default: first numeric column)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", help="write the table as CSV here too")

    p = sub.add_parser("make-dataset", help="write the bundled copy task as JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=832)
    p.add_argument("--n-test", type=int, default=208)
    return parser


# -- helpers ------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "sigma_base", None) is not None:
        cfg = dataclasses.replace(cfg, noise=dataclasses.replace(cfg.noise, sigma_base=args.sigma_base))
    train_over = {}
    if getattr(args, "k_layers", None) is not None:
        train_over["k_layers"] = args.k_layers
    if getattr(args, "snr_mode", None) is not None:
        train_over["snr_mode"] = args.snr_mode
    if getattr(args, "steps", None) is not None:
        train_over["max_steps"] = args.steps
    if train_over:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train_over))
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, out_dir=args.out))
    return cfg


def _datasets(cfg: RunConfig):
    if cfg.run.dataset == BUILTIN_DATASET:
        train_r, test_r = make_copy_task(seed=0)
        return train_r, test_r
    train_r = load_dataset(cfg.run.dataset)
    test_r = load_dataset(cfg.run.test_dataset) if cfg.run.test_dataset else []
    return train_r, test_r


def _fresh_model(cfg: RunConfig):
    return build_model(cfg.model, seed=cfg.seed, mode=cfg.train.finetune_mode)


# -- commands -----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_r, test_r = _datasets(cfg)
    run_dir = Path(cfg.run.out_dir)
    with RunDirLock(run_dir):
        atomic_write_text(run_dir / "config.ini", cfg.to_ini())
        model = _fresh_model(cfg)
        state = train(model, train_r, cfg.train, cfg.noise, cfg.loss, run_dir=run_dir, resume_from=args.resume)
        summary = {"steps": state.step, "selected_layers": state.selected_layers,
                   "final": state.metrics[-1] if state.metrics else None}
        if test_r:
            summary["exact_match"] = exact_match(model, test_r)
        atomic_write_text(run_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = _run_config(args)
    train_r, _ = _datasets(cfg)
    model = checkpoint_load(args.checkpoint)[0].model if args.checkpoint else _fresh_model(cfg)
    batches = calibration_batches(train_r, cfg.train, model.config.max_seq_len)
    report = profile(model, batches, cfg.noise, cfg.train.profile_passes, k=cfg.train.k_layers,
                     mode=cfg.train.snr_mode, seed=cfg.seed)
    text = report.to_text()
    if args.out:
        with RunDirLock(args.out):
            atomic_write_text(Path(args.out) / "snr_report.txt", text)
            atomic_write_text(Path(args.out) / "snr_report.json", json.dumps(report.to_dict(), indent=2) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verifier.run_all(seed=args.seed, quick=args.quick)
    if args.out:
        with RunDirLock(args.out):
            atomic_write_text(Path(args.out) / "report.txt", report.to_text())
            atomic_write_text(Path(args.out) / "report.csv", report.to_csv())
    sys.stdout.write(report.to_text())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_generate(args) -> int:
    model = checkpoint_load(args.checkpoint)[0].model
    gen = GenerationConfig(args.max_new_tokens, args.temperature, args.top_p, args.top_k,
                           args.repetition_penalty)
    ids = generate(model, encode(prompt_text(args.prompt)), gen, Rng(args.seed).child("generate"))
    text = decode(ids)
    stop = gen.stop.decode()
    print(text.split(stop)[0])
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.zero_tol < 0:
        raise ConfigError("--zero-tol must be >= 0")
    cfg = _run_config(args)
    train_r, _ = _datasets(cfg)
    model = checkpoint_load(args.checkpoint)[0].model if args.checkpoint else _fresh_model(cfg)
    probe = collate(train_r[:cfg.train.batch_size], model.config.max_seq_len).inputs
    with no_grad():
        trace = model.forward(probe, keep_attention=True)
    metrics = analysis.layer_metrics(trace, args.zero_tol)
    rows = metrics.to_rows()
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        with RunDirLock(args.out):
            atomic_write_text(Path(args.out) / "layer_metrics.txt", metrics.to_text())
            atomic_write_text(Path(args.out) / "layer_metrics.csv", buf.getvalue())
    sys.stdout.write(metrics.to_text())
    return EXIT_OK


def read_scores(path, column: str | None = None) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{path}: no rows")
    names = list(rows[0])
    if column is None:
        for name in names:
            try:
                float(rows[0][name])
            except (TypeError, ValueError):
                continue
            column = name
            break
        if column is None:
            raise UsageError(f"{path}: no numeric column")
    if column not in names:
        raise UsageError(f"{path}: no column {column!r} (have {names})")
    try:
        return np.array([float(r[column]) for r in rows])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: non-numeric value in column {column!r}: {exc}") from None


def cmd_stats(args) -> int:
    if len(args.files) < 2:
        raise UsageError("stats needs at least one experiment file and a baseline file")
    *exp_files, base_file = args.files
    baseline = read_scores(base_file, args.column)
    experiments = {Path(f).stem: read_scores(f, args.column) for f in exp_files}
    rows = analysis.compare_families(experiments, baseline, args.alpha)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        atomic_write_text(args.out, buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    train_r, test_r = make_copy_task(args.n_train, args.n_test, seed=args.seed)
    out = Path(args.out)
    save_dataset(train_r, out / "train.jsonl")
    save_dataset(test_r, out / "test.jsonl")
    print(f"wrote {len(train_r)} train and {len(test_r)} test records to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "profile-snr": cmd_profile, "verify": cmd_verify, "generate": cmd_generate,
            "diagnose": cmd_diagnose, "stats": cmd_stats, "make-dataset": cmd_make_dataset}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NoiseFitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
