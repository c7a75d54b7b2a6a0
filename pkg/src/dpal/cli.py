"""Command line for distillation pretraining, ablations, probes and corpus tooling.

Exit codes: 0 success, 1 validation/usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import CorpusConfig, SyntheticCorpus, write_ppm
from .losses import ValidationError
from .teacher import WARM_STEPS
from .tensor import DimensionError, NumericError, UsageError

log = logging.getLogger("dpal")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
DEFAULT_CACHE = Path(os.environ.get("DPAL_CACHE", Path.home() / ".cache" / "dpal"))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _single_thread(enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _load_run(args):
    from .train import RunConfig

    run = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    optim = {}
    if getattr(args, "hard_routing", False):
        optim["routing"] = "hard"
    if getattr(args, "kl_reverse", False):
        optim["kl_reverse"] = True
    if getattr(args, "squared_mse", False):
        optim["squared_mse"] = True
    if getattr(args, "seed", None) is not None:
        optim["seed"] = args.seed
    if getattr(args, "steps_per_epoch", None):
        optim["steps_per_epoch"] = args.steps_per_epoch
    if optim:
        run.optim = replace(run.optim, **optim)
    if getattr(args, "teacher", None):
        run.teacher = args.teacher
    if getattr(args, "teacher_relation", None):
        run.teacher_relation = args.teacher_relation
    if getattr(args, "output_dir", None):
        run.output_dir = args.output_dir
    if getattr(args, "image_dir", None):
        run.data = replace(run.data, image_dir=args.image_dir)
    return run


def _teacher(run, cache_dir):
    from .teacher import resolve_teacher

    return resolve_teacher(run.teacher, run.teacher_arch, cache_dir=cache_dir, relation_mode=run.teacher_relation)


# -- subcommands -------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .train import Trainer

    run = _load_run(args)
    out = Path(run.output_dir or "runs/pretrain")
    out.mkdir(parents=True, exist_ok=True)
    teacher = _teacher(run, args.cache_dir)
    if args.resume:
        tr = Trainer.from_checkpoint(args.resume, teacher=teacher)
    else:
        tr = Trainer(run, teacher=teacher)
    run.save(out / "run.json")
    steps = args.steps if args.steps is not None else tr.total_steps - tr.step
    steps = min(steps, tr.total_steps - tr.step)
    metrics = out / "metrics.jsonl"
    if not args.resume and metrics.exists():
        metrics.unlink()
    tr.fit(steps, metrics_path=metrics, log_every=args.log_every)
    ckpt = tr.save_checkpoint(out / "checkpoint")
    print(json.dumps({"steps": tr.step, "metrics": str(metrics), "checkpoint": str(ckpt)}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import grid_configs, run_ablation, write_csv

    run = _load_run(args)
    teacher = _teacher(run, args.cache_dir)
    configs = grid_configs(args.grid)
    out = Path(args.out or (Path(run.output_dir or "runs") / f"ablation_{args.grid}.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(configs, args.seeds, run, teacher, steps=args.steps, csv_path=out)
    write_csv(out, rows)
    print(out.read_text(), end="")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .probes import run_probes
    from .train import Trainer

    tr = Trainer.from_checkpoint(args.checkpoint, cache_dir=args.cache_dir)
    rep = run_probes(tr.student, tr.decoder, seed=args.seed, num_identities=args.identities,
                     num_scenes=args.scenes, fingerprint=tr.run.fingerprint())
    text = json.dumps(rep.to_dict())
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import check_full_objective

    if not args.micro:
        raise UsageError("grad-check currently supports only --micro")
    err, n = check_full_objective(seed=args.seed, coords_per_tensor=args.coords,
                                  routing="hard" if args.hard_routing else "soft")
    print(f"max relative error {err:.3e} over {n} parameter tensors (tolerance {args.tol:g})")
    return EXIT_OK if err < args.tol else EXIT_NUMERIC


def cmd_export(args) -> int:
    src = Path(args.metrics)
    rows = [json.loads(line) for line in src.read_text().splitlines() if line.strip()]
    out = Path(args.out) if args.out else src.with_suffix(".csv")
    cols = ["step", "lr", "loss_g", "loss_l", "loss_r", "loss_total", "wallclock_ms"]
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    print(f"{len(rows)} rows -> {out}")
    return EXIT_OK


def cmd_render_corpus(args) -> int:
    corpus = SyntheticCorpus(CorpusConfig(num_identities=args.identities, poses_per_identity=args.poses,
                                          seed=args.seed))
    out = Path(args.out)
    (out / "persons").mkdir(parents=True, exist_ok=True)
    for i in range(len(corpus)):
        ident, pose = corpus.locate(i)
        write_ppm(out / "persons" / f"id{ident:06d}_p{pose}.ppm", corpus.person(i).image)
    if args.scenes:
        (out / "scenes").mkdir(exist_ok=True)
        for k in range(args.scenes):
            scene = corpus.scene(k)
            write_ppm(out / "scenes" / f"scene{k:05d}.ppm", scene.image)
            np.save(out / "scenes" / f"scene{k:05d}_instances.npy", scene.instance_map)
    print(f"wrote {len(corpus)} persons and {args.scenes} scenes to {out}")
    return EXIT_OK


def cmd_make_teacher(args) -> int:
    from .teacher import make_synthetic_teacher

    teacher = make_synthetic_teacher(args.seed, warm_steps=args.warm_steps, relation_mode=args.teacher_relation)
    teacher.save(args.out)
    print(f"teacher ({teacher.encoder.num_parameters()} parameters) -> {args.out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def _common_run_flags(p):
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--teacher", help="synthetic:SEED or a teacher checkpoint directory")
    p.add_argument("--teacher-relation", choices=["attn", "sim"])
    p.add_argument("--hard-routing", action="store_true")
    p.add_argument("--kl-reverse", action="store_true")
    p.add_argument("--squared-mse", action="store_true")
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--image-dir", help="train on the PPM files in this directory instead of rendered persons")
    p.add_argument("--single-thread", action="store_true", help="pin BLAS to one thread (bitwise reproducible)")
    p.add_argument("--cache-dir", default=str(DEFAULT_CACHE))
    p.add_argument("--log-every", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dpal", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="distillation pretraining")
    _common_run_flags(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("ablate", help="pretrain + probe over a configuration grid")
    _common_run_flags(p)
    p.add_argument("--grid", required=True, help="table3 | table4 | table5 | single")
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    p.add_argument("--out", help="CSV path")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("probe", help="frozen-feature probes on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identities", type=int, default=256)
    p.add_argument("--scenes", type=int, default=64)
    p.add_argument("--out")
    p.add_argument("--cache-dir", default=str(DEFAULT_CACHE))
    p.add_argument("--single-thread", action="store_true")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    p.add_argument("--micro", action="store_true", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=4, help="coordinates sampled per parameter tensor")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--hard-routing", action="store_true")
    p.add_argument("--single-thread", action="store_true")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("export", help="JSONL metrics -> plot-ready CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("render-corpus", help="write the synthetic corpus as PPM files")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=16)
    p.add_argument("--poses", type=int, default=2)
    p.add_argument("--scenes", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_render_corpus)

    p = sub.add_parser("make-teacher", help="build and save a synthetic teacher")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warm-steps", type=int, default=WARM_STEPS)
    p.add_argument("--teacher-relation", choices=["attn", "sim"], default="attn")
    p.set_defaults(fn=cmd_make_teacher)
    return ap


def main(argv: list[str] | None = None) -> int:
    from .train import TrainingDiverged

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _single_thread(getattr(args, "single_thread", False)):
            return args.fn(args)
    except (TrainingDiverged, NumericError) as exc:
        print(f"dpal: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValidationError, DimensionError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"dpal: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
