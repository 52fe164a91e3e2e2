"""``langseg`` command line: synth, train, eval, ablate, gradcheck.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure,
4 checkpoint/config mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import plotting
from .ablation import VARIANTS, ablation_table, run_ablation, write_table
from .config import RunConfig, from_dict, load_config, save_config
from .errors import ArtifactMismatchError, ConfigError, DataError, FormatError, LangSegError, NumericError
from .gradcheck import micro_model_checks
from .metrics import evaluate_masks, predict_hard_masks
from .model import ModelConfig, init_params
from .pnm import write_pgm
from .synth import SCENARIOS, generate_dataset, holdout_split, load_dataset, write_dataset
from .text_encoder import Vocabulary, default_vocabulary
from .trainer import Checkpoint, model_config_from_dict, train

log = logging.getLogger("langseg")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4


class UsageError(LangSegError):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config.json; flags below override its values")
    group = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=argparse.SUPPRESS,
                           metavar=f.name.upper())


def _run_config(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if hasattr(args, f.name)}
    cfg = load_config(args.config, overrides) if args.config else from_dict(overrides)
    return cfg.validate()


def _vocab(cfg: RunConfig) -> Vocabulary:
    if cfg.vocab and not Path(cfg.vocab).is_file():
        raise UsageError(f"vocabulary file not found: {cfg.vocab}")
    return cfg.vocabulary()


def _load_split(cfg: RunConfig):
    if not cfg.dataset:
        raise UsageError("no dataset given (set 'dataset' in the config or pass --dataset)")
    if not Path(cfg.dataset).is_dir():
        raise UsageError(f"dataset directory not found: {cfg.dataset}")
    samples = load_dataset(cfg.dataset)
    if cfg.test_dataset:
        if not Path(cfg.test_dataset).is_dir():
            raise UsageError(f"dataset directory not found: {cfg.test_dataset}")
        return samples, load_dataset(cfg.test_dataset)
    return holdout_split(samples, cfg.holdout_fraction)


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    scenarios = tuple(s.strip() for s in args.scenarios.split(",") if s.strip())
    bad = [s for s in scenarios if s not in SCENARIOS]
    if bad or not scenarios:
        raise UsageError(f"unknown scenarios {bad}; choose from {SCENARIOS}")
    if args.height % 4 or args.width % 4:
        raise UsageError("canvas sides must be multiples of 4")
    samples = generate_dataset(args.n, args.seed, args.height, args.width, scenarios)
    try:
        write_dataset(samples, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from None
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = _run_config(args)
    vocab = _vocab(cfg)
    train_set, _ = _load_split(cfg)
    model = cfg.model_config(len(vocab)).validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    tc = cfg.train_config()
    if args.resume:
        ck = Checkpoint.load(args.resume, expect_hash=model.digest())
        if ck.step >= tc.steps:
            raise UsageError(f"checkpoint is at step {ck.step}, nothing left of {tc.steps} steps")
        result = train(tc, train_set, ck.params, model, vocab, adam=ck.adam, start_step=ck.step, out_dir=out)
    else:
        result = train(tc, train_set, init_params(model, cfg.param_seed), model, vocab, out_dir=out)
    plotting.loss_curves(result.log, out / "loss_curves.png")
    final = out / f"ckpt_{result.step}.bin"
    print(final)
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _checkpoint_model(ck: Checkpoint, args) -> ModelConfig:
    model = model_config_from_dict(ck.model)
    if args.config:
        cfg = _run_config(args)
        expected = cfg.model_config(model.vocab_size).digest()
        if expected != ck.config_hash:
            raise ArtifactMismatchError(
                f"checkpoint {args.checkpoint} was trained with config hash {ck.config_hash}, "
                f"config {args.config} describes {expected}")
    if model.digest() != ck.config_hash:
        raise ArtifactMismatchError(f"checkpoint {args.checkpoint}: stored model does not match its hash")
    return model


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    model = _checkpoint_model(ck, args)
    vocab = Vocabulary.load(args.vocab) if args.vocab else default_vocabulary()
    if len(vocab) != model.vocab_size:
        raise ArtifactMismatchError(f"vocabulary has {len(vocab)} tokens, checkpoint expects {model.vocab_size}")
    if not Path(args.dataset).is_dir():
        raise UsageError(f"dataset directory not found: {args.dataset}")
    samples = load_dataset(args.dataset)
    if args.heldout:
        samples = holdout_split(samples, args.holdout_fraction)[1]
    if args.scenarios:
        wanted = {s.strip() for s in args.scenarios.split(",")}
        samples = [s for s in samples if s.scenario in wanted]
    if not samples:
        raise UsageError("no samples left after filtering")

    preds = predict_hard_masks(ck.params, model, samples, vocab)
    report = evaluate_masks(preds, samples, model.classes)
    out = Path(args.out) if args.out else Path(args.dataset) / "eval"
    (out / "pred_masks").mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(preds):
        write_pgm(out / "pred_masks" / f"{i:06d}.pgm", p)

    payload = report.to_json()
    payload["checkpoint"] = str(args.checkpoint)
    payload["step"] = ck.step
    payload["samples"] = len(samples)
    payload["class_iou_aggregate"] = "unweighted mean over classes present in ground truth"
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    write_table(out / "report.csv", [{"variant": args.name, "mIoU": report.miou,
                                      "pixel_accuracy": report.pixel_accuracy,
                                      "mean_class_iou": report.mean_class_iou}])
    rows = plotting.scenario_rows(report)
    write_table(out / "scenarios.csv", rows, ("scenario", "mIoU", "pixel_accuracy", "mean_class_iou"))
    plotting.scenario_bars(report, out / "scenarios.png")
    plotting.mask_examples(samples, preds, out / "examples.png")
    print(f"mIoU {report.miou:.4f}  PA {report.pixel_accuracy:.4f}  ({len(samples)} samples)")
    for r in rows:
        print(f"  {r['scenario']:<10s} mIoU {r['mIoU']:.4f}  PA {r['pixel_accuracy']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- ablate

def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    vocab = _vocab(cfg)
    train_set, test_set = _load_split(cfg)
    if not test_set:
        raise UsageError("held-out split is empty; raise holdout_fraction or pass test_dataset")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = run_ablation(cfg, train_set, test_set, vocab, VARIANTS, seeds, out)
    rows = ablation_table(runs)
    write_table(out / "ablation.csv", rows)
    detail = [{"variant": r.variant, "seed": r.seed, **r.report.to_json()} for r in runs]
    (out / "ablation.json").write_text(json.dumps({"seeds": seeds, "table": rows, "runs": detail}, indent=2) + "\n")
    plotting.metric_bars(rows, out / "ablation.png", title="ablation (held-out)")
    for r in rows:
        print(f"{r['variant']:<22s} mIoU {r['mIoU']:.4f}  PA {r['pixel_accuracy']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    reports = micro_model_checks(args.seed, h=args.h, tol=args.tol)
    ok = True
    for name, rep in reports.items():
        ok &= rep.passed
        print(f"{name:<12s} max rel err {rep.overall_max:.3e}  {'PASS' if rep.passed else 'FAIL'}")
    worst = max(r.overall_max for r in reports.values())
    print(f"{'PASS' if ok else 'FAIL'}: max rel err {worst:.3e} (tol {args.tol:g}, h {args.h:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="langseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--scenarios", default="clean", help="comma-separated, assigned round-robin")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="refuse to run if the checkpoint was trained with another architecture")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--scenarios", help="comma-separated scenario filter")
    p.add_argument("--heldout", action="store_true", help="score only the held-out tail of the dataset")
    p.add_argument("--holdout-fraction", type=float, default=0.2)
    p.add_argument("--name", default="model", help="row label in report.csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the four ablation variants")
    _add_config_flags(p)
    p.add_argument("--seeds", help="comma-separated seeds; metrics are averaged")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss on a micro model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ArtifactMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DataError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
