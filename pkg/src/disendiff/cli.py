"""Command-line entry point: ``disendiff <command> [--flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationConfig

log = logging.getLogger("disendiff")

METRIC_COLUMNS = ("attn_iou", "leakage", "presence", "color_error", "combined_presence")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        kwargs.setdefault("add_help", False)
        super().__init__(*args, **kwargs)
        self.add_argument("--help", action="help", help="show this message and exit")


# ---------------------------------------------------------------- manifests


def write_manifest(out_dir, command: str, argv, config: dict, seed, inputs=(), outputs=()) -> Path:
    """Config snapshot, seed and git-style blob hashes of inputs/outputs, next to the outputs."""
    from .checkpoint import file_hash

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": config,
        "inputs": {str(p): file_hash(p) for p in inputs if Path(p).exists()},
        "outputs": {str(p): file_hash(p) for p in outputs if Path(p).exists()},
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "precision": os.environ.get("DISENDIFF_PRECISION", "f32"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


# ---------------------------------------------------------------- shared flag groups


def add_calibration_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("calibration")
    g.add_argument("--no-bind", action="store_true", help="drop the bind term")
    g.add_argument("--no-ss", action="store_true", help="drop the separate-and-strengthen term")
    g.add_argument("--separate-only", action="store_true", help="use the plain separate term instead of s&s")
    g.add_argument("--no-suppress", action="store_true", help="skip A*A suppression")
    g.add_argument("--double-suppress", action="store_true", help="apply suppression twice")
    g.add_argument("--no-gaussian", action="store_true", help="skip Gaussian smoothing")
    g.add_argument("--all-scales", action="store_true", help="average maps over every resolution")
    g.add_argument("--no-calibration", action="store_true", help="plain fine-tuning baseline")
    g.add_argument("--lambda-bind", type=float, default=0.01)
    g.add_argument("--lambda-ss", type=float, default=0.01)
    g.add_argument("--iou-kind", choices=("minmax", "product"), default="minmax")


def calibration_from_args(args) -> CalibrationConfig:
    if args.no_suppress and args.double_suppress:
        raise UsageError("--no-suppress and --double-suppress are mutually exclusive")
    if args.no_calibration:
        return CalibrationConfig.disabled()
    return CalibrationConfig(
        lambda_bind=args.lambda_bind, lambda_ss=args.lambda_ss,
        use_bind=not args.no_bind, use_ss=not args.no_ss, separate_only=args.separate_only,
        suppression_count=0 if args.no_suppress else 2 if args.double_suppress else 1,
        use_gaussian=not args.no_gaussian, resolution="all" if args.all_scales else 16,
        iou_kind=args.iou_kind)


def add_task_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_argument_group("target")
    g.add_argument("--scene-seed", type=int, help="procedural two-concept target with ground truth")
    g.add_argument("--task", type=Path, help="task.json written by personalize")
    g.add_argument("--image", type=Path, help="target PPM (needs --classes)")
    g.add_argument("--classes", help="comma-separated class nouns in the image, e.g. disc,square")


def task_from_args(args):
    from .diffusion import read_ppm
    from .experiments import task_for_seed
    from .train import PersonalizationTask

    given = [x is not None for x in (args.scene_seed, args.task, args.image)]
    if sum(given) != 1:
        raise UsageError("give exactly one of --scene-seed, --task, --image")
    if args.scene_seed is not None:
        return task_for_seed(args.scene_seed)
    if args.task is not None:
        return load_task(args.task)
    if not args.classes:
        raise UsageError("--image needs --classes")
    img = read_ppm(args.image).astype(np.float32) / 127.5 - 1.0
    if img.shape != (32, 32, 3):
        raise ValueError(f"target image must be 32x32 RGB, got {img.shape}")
    return PersonalizationTask(img, args.classes.split(","))


def task_to_dict(task) -> dict:
    d = {"classes": task.classes, "modifiers": task.modifiers, "scene": None}
    if task.scene_truth is not None:
        spec = task.scene_truth
        d["scene"] = {"background": spec.background,
                      "instances": [dataclasses.asdict(i) for i in spec.instances]}
    return d


def load_task(path):
    from .diffusion import read_ppm
    from .scenes import ConceptInstance, SceneSpec
    from .train import PersonalizationTask

    path = Path(path)
    d = json.loads(path.read_text())
    if d.get("scene"):
        insts = [ConceptInstance(**{**i, "color": tuple(i["color"]), "center": tuple(i["center"])})
                 for i in d["scene"]["instances"]]
        task = PersonalizationTask.from_scene(SceneSpec(insts, d["scene"]["background"]))
        task.modifiers = d["modifiers"]
        return task
    img = read_ppm(path.with_name("target.ppm")).astype(np.float32) / 127.5 - 1.0
    return PersonalizationTask(img, d["classes"], d["modifiers"])


# ---------------------------------------------------------------- commands


def cmd_pretrain(args, argv) -> int:
    from .checkpoint import cfg_path, save_model
    from .config import load_kv
    from .train import TrainConfig, pretrain
    from .unet import Denoiser, DenoiserConfig

    values = load_kv(args.config) if args.config else {}
    cfg = TrainConfig.from_flat({**{k: v for k, v in values.items() if not k.startswith("model.")},
                                 "seed": args.seed})
    model_cfg = DenoiserConfig(**{k[6:]: v for k, v in values.items() if k.startswith("model.")})
    steps = args.steps if args.steps is not None else cfg.pretrain_steps
    model = Denoiser.create(model_cfg, seed=args.seed)
    partial = args.out.with_name(args.out.name + ".partial")
    result = pretrain(model, cfg, steps=steps, log_every=args.log_every, checkpoint_path=partial,
                      checkpoint_every=args.checkpoint_every)
    save_model(args.out, result.model)
    for p in (partial, cfg_path(partial)):
        p.unlink(missing_ok=True)
    print(f"val mse {result.val_mse_init:.4f} -> {result.val_mse_final:.4f} "
          f"(predict-zero baseline {result.zero_baseline:.4f})")
    write_manifest(args.out.parent, "pretrain", argv, {**cfg.to_flat(), "steps": steps,
                   "model": model_cfg.to_dict()}, args.seed,
                   inputs=[args.config] if args.config else [], outputs=[args.out])
    return 0


def cmd_personalize(args, argv) -> int:
    from .checkpoint import load_model, save_model
    from .diffusion import write_ppm
    from .train import TrainConfig, personalize

    task = task_from_args(args)
    cfg = TrainConfig(personalize_steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                      reg_set_size=args.reg_size, calibration=calibration_from_args(args),
                      train_wq=args.train_wq, seed=args.seed)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "target.ppm", task.target_image)
    (out / "task.json").write_text(json.dumps(task_to_dict(task), indent=2) + "\n")
    result = personalize(load_model(args.pretrained), task, cfg, log_path=out / "train_log.csv")
    save_model(out / "personalized.dsdf", result.model)
    last = result.log_rows[-1] if result.log_rows else {}
    print(f"personalized '{task.prompt}' for {cfg.personalize_steps} steps; final total loss "
          f"{last.get('total', float('nan')):.4f}")
    write_manifest(out, "personalize", argv, cfg.to_flat(), args.seed, inputs=[args.pretrained],
                   outputs=[out / "personalized.dsdf", out / "train_log.csv", out / "target.ppm"])
    return 0


def cmd_sample(args, argv) -> int:
    from .checkpoint import load_model
    from .diffusion import ddim_sample, write_ppm

    model = load_model(args.checkpoint)
    images = ddim_sample(model, args.prompt, steps=args.steps, guidance=args.guidance, seed=args.seed,
                         n=args.n, return_all=True)
    outs = []
    if args.n == 1:
        write_ppm(args.out, images[0])
        outs.append(args.out)
    else:
        for i, img in enumerate(images):
            p = args.out.with_name(f"{args.out.stem}_{i:02d}{args.out.suffix}")
            write_ppm(p, img)
            outs.append(p)
    print("\n".join(str(p) for p in outs))
    write_manifest(args.out.parent, "sample", argv, {"prompt": args.prompt, "steps": args.steps,
                   "guidance": args.guidance, "n": args.n}, args.seed, inputs=[args.checkpoint],
                   outputs=outs)
    return 0


def cmd_inspect_attn(args, argv) -> int:
    from . import autodiff as ad
    from .attention import select_maps, write_pgm
    from .autodiff import Tensor
    from .checkpoint import load_model
    from .diffusion import NoiseSchedule, forward_noise
    from .tokens import tokenize

    model = load_model(args.checkpoint)
    task = task_from_args(args)
    prompt = args.prompt or task.prompt
    seq = tokenize(prompt, model.vocab)
    rng = np.random.default_rng(args.seed)
    eps = rng.standard_normal(task.target_image.shape).astype(np.float32)
    z = forward_noise(task.target_image, args.t, eps, NoiseSchedule(model.cfg.num_timesteps))
    with ad.no_grad():
        _, record = model(Tensor(z[None], dtype=np.float32), args.t, model.encode([seq]), [seq])
    res = "all" if args.resolution == "all" else int(args.resolution)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for role in seq.roles:
        if role is None:
            continue
        m = select_maps(record, role, res).data[0]
        p = out / f"attn_{role}_t{args.t}.pgm".replace("*", "")
        write_pgm(p, m)
        written.append(p)
        print(f"{str(role):<10} mass {m.sum():7.3f} peak {m.max():.3f} -> {p}")
    if task.scene_truth is not None:
        for cls, mask in zip(task.scene_truth.classes, task.scene_truth.masks()):
            p = out / f"mask_{cls}.pgm"
            write_pgm(p, mask.astype(np.float32))
            written.append(p)
    write_manifest(out, "inspect-attn", argv, {"prompt": prompt, "t": args.t, "resolution": args.resolution},
                   args.seed, inputs=[args.checkpoint], outputs=written)
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .gradsuite import CHECKS, TOLERANCE, run_suite

    analytic = os.environ.get("DISENDIFF_PRECISION", "f64")
    if analytic not in ("f32", "f64"):
        raise UsageError(f"DISENDIFF_PRECISION must be f32 or f64, got {analytic!r}")
    names = args.checks.split(",") if args.checks else list(CHECKS)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise UsageError(f"unknown checks {sorted(unknown)}; choose from {sorted(CHECKS)}")
    t0 = time.time()
    results = run_suite(args.seeds, names, analytic=analytic)
    ok = True
    for name, (err, seed) in results.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:<18} max rel err {err:.3e} (worst seed {seed:3d})  {'ok' if passed else 'FAIL'}")
    print(f"{len(names)} checks x {args.seeds} seeds, {analytic} analytic, {time.time() - t0:.1f}s")
    return 0 if ok else 1


def cmd_eval(args, argv) -> int:
    from .checkpoint import load_model
    from .evaluation import eval_disentanglement

    task = task_from_args(args)
    model = load_model(args.checkpoint)
    report = eval_disentanglement(model, task, n_samples=args.samples, seed=args.seed, steps=args.steps,
                                  guidance=args.guidance)
    report.save(args.out)
    if task.scene_truth is not None:
        from .attention import write_pgm
        for cls, mask in zip(task.scene_truth.classes, task.scene_truth.masks()):
            write_pgm(args.out / f"mask_{cls}.pgm", mask.astype(np.float32))
    print(report.summary())
    write_manifest(args.out, "eval", argv, {"samples": args.samples, "steps": args.steps,
                   "guidance": args.guidance, "task": task_to_dict(task)}, args.seed,
                   inputs=[args.checkpoint], outputs=[args.out / "metrics.csv"])
    return 0


def cmd_ablate(args, argv) -> int:
    from .experiments import BASELINE, DEFAULT_VARIANTS, OPTIONAL_VARIANTS, Runner, aggregate

    extra = [v for v in (args.include or "").split(",") if v]
    bad = set(extra) - set(OPTIONAL_VARIANTS) - {BASELINE}
    if bad:
        raise UsageError(f"--include accepts {', '.join(OPTIONAL_VARIANTS + (BASELINE,))}; got {sorted(bad)}")
    variants = list(DEFAULT_VARIANTS) + extra
    seeds = [int(s) for s in args.seeds.split(",")]
    runner = Runner(args.pretrained, args.cache or args.out / "runs", n_samples=args.samples,
                    steps=args.steps, guidance=args.guidance)
    results = runner.suite(variants, seeds)
    means = aggregate(results)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant", "seeds") + METRIC_COLUMNS)
        for v in variants:
            w.writerow([v, means[v]["seeds"]] + [f"{means[v][k]:.4f}" for k in METRIC_COLUMNS])
    with (out / "ablation_per_seed.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(results[0].row()))
        w.writeheader()
        for r in results:
            w.writerow(r.row())
    print((out / "ablation.csv").read_text(), end="")
    write_manifest(out, "ablate", argv, {"variants": variants, "seeds": seeds, "samples": args.samples,
                   "steps": args.steps, "guidance": args.guidance}, seeds, inputs=[args.pretrained],
                   outputs=[out / "ablation.csv", out / "ablation_per_seed.csv"])
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> Parser:
    parser = Parser(prog="disendiff", description="Toy multi-concept personalization with attention calibration.")
    parser.add_argument("--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("pretrain", help="train the base denoiser on the procedural corpus")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path (.dsdf)")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="key = value file of training (and model.*) settings")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("personalize", help="learn modifier tokens for a single target image")
    p.add_argument("--pretrained", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=8e-5)
    p.add_argument("--reg-size", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-wq", action="store_true", help="also train the query projections")
    add_task_flags(p)
    add_calibration_flags(p)
    p.set_defaults(fn=cmd_personalize)

    p = sub.add_parser("sample", help="DDIM sampling with classifier-free guidance")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=6.0)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("sample.ppm"))
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("inspect-attn", help="dump per-token cross-attention maps as PGM")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--prompt", help="defaults to the task prompt")
    p.add_argument("--t", type=int, default=200)
    p.add_argument("--resolution", default="16", choices=("8", "16", "all"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    add_task_flags(p)
    p.set_defaults(fn=cmd_inspect_attn)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the calibration gradients")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--checks", help="comma-separated subset")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("eval", help="oracle-detector metrics for a personalized checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    add_task_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the calibration ablation matrix and write a combined CSV")
    p.add_argument("--pretrained", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--include", help=f"extra variants: {','.join(['all-scales', 'train-wq', 'no-calibration'])}")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=6.0)
    p.add_argument("--cache", type=Path, help="directory of cached per-run results")
    p.set_defaults(fn=cmd_ablate)
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"disendiff {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic, no traceback
        log.debug("failure", exc_info=True)
        print(f"disendiff {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
