"""Command-line interface.

Every run writes a JSON config echo into --out-dir; any run can be
re-executed bit for bit with --from-echo.  Exit codes: 0 success, 1 usage
or configuration error, 2 numeric or file-format failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .tensor import ConfigError, DimensionError, NumericError
from . import ablate as ablate_mod
from . import data as data_mod
from . import fileio
from .diffusion import build_schedule, schedule_table
from .gradcheck import run_gradient_suite
from .pdam import PdamParams, PseudoDepthSet, aggregate
from .train import TrainConfig, evaluate, rebuild_from_checkpoint, train

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; this tool reserves 2 for
    # numeric/IO failures and reports usage as 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=sorted(_DTYPES), default="f32")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--from-echo", default=None,
                   help="re-run with the configuration stored in a config echo file")
    return p


def _write_echo(args, command: str) -> dict:
    os.makedirs(args.out_dir, exist_ok=True)
    skip = {"out_dir", "from_echo", "func"}
    payload = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    payload["command"] = command
    path = os.path.join(args.out_dir, f"{command.replace('-', '_')}_config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return payload


def _apply_echo(args) -> None:
    with open(args.from_echo, "r", encoding="utf-8") as f:
        echo = json.load(f)
    if not isinstance(echo, dict):
        raise ConfigError("config echo must be a JSON object")
    for key, value in echo.items():
        if key in ("command", "out_dir", "from_echo", "func"):
            continue
        setattr(args, key, value)


# gen-data --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    _write_echo(args, "gen-data")
    known = data_mod.default_profiles()
    bad = [p for p in args.profiles if p not in known]
    if bad:
        raise ConfigError(f"unknown profiles {bad}; available {sorted(known)}")
    config = data_mod.SceneConfig(
        image_size=args.image_size, num_classes=args.num_classes,
        objects_min=args.objects_min, objects_max=args.objects_max,
        texture_noise=args.texture_noise, seed=args.seed)
    profiles = [known[p] for p in args.profiles]
    manifest = data_mod.build_dataset(args.out_dir, config, args.num_train,
                                      args.num_test, profiles)
    print(f"wrote {args.num_train}+{args.num_test} scenes to {manifest}")
    return 0


# aggregate -------------------------------------------------------------------


def cmd_aggregate(args) -> int:
    _write_echo(args, "aggregate")
    planes = [fileio.read_pfm(p) for p in args.maps]
    for path, plane in zip(args.maps, planes):
        if plane.ndim != 2:
            raise ConfigError(f"{path} must be a single-channel PFM")
    tags = [os.path.splitext(os.path.basename(p))[0] for p in args.maps]
    dtype = _DTYPES[args.dtype]
    pd_set = PseudoDepthSet.from_planes(planes, tags, dtype=dtype)
    num_maps = pd_set.num_maps
    if args.params:
        meta, arrays = fileio.load_checkpoint(args.params)
        pdam_arrays = {k: v for k, v in arrays.items() if k.startswith("pdam.")}
        if not pdam_arrays:
            raise ConfigError(f"checkpoint {args.params} holds no PDAM parameters")
        params = PdamParams(np.random.default_rng(args.seed), num_maps,
                            lambda_c=args.lambda_c, lambda_s=args.lambda_s,
                            dtype=dtype)
        named = dict(params.named_parameters())
        if set(named) != set(pdam_arrays):
            raise ConfigError(
                f"checkpoint PDAM was built for a different map count")
        for k, t in named.items():
            t.data = np.asarray(pdam_arrays[k], dtype=dtype).copy()
    else:
        params = PdamParams.zero_initialized(num_maps, lambda_c=args.lambda_c,
                                             lambda_s=args.lambda_s, dtype=dtype)
    out = aggregate(pd_set, params)
    stem = os.path.join(args.out_dir, args.out)
    fileio.write_tensor(stem + ".dftn", out)
    plane = out.data[0].mean(axis=0)
    lo, hi = float(plane.min()), float(plane.max())
    if hi - lo < 1e-12:
        hi = lo + 1.0
    fileio.write_depth_pgm16(stem + ".pgm", plane, lo=lo, hi=hi)
    print(f"aggregated {num_maps} maps -> {stem}.dftn, {stem}.pgm")
    return 0


# gradcheck -------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    if args.dtype != "f64":
        raise ConfigError("gradient checking is defined in f64; pass --dtype f64")
    _write_echo(args, "gradcheck")
    results = run_gradient_suite(num_seeds=args.seeds, tol=args.tol,
                                 max_coords=args.max_coords, progress=print)
    failed = [r for r in results if not r.passed]
    worst = max(r.max_rel_err for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"(worst rel err {worst:.3e})")
    if failed:
        raise NumericError(f"{len(failed)} gradient checks failed")
    return 0


# schedule --------------------------------------------------------------------


def cmd_schedule(args) -> int:
    _write_echo(args, "schedule")
    sched = build_schedule(timesteps=args.timesteps, beta_start=args.beta_start,
                           beta_end=args.beta_end, kind=args.kind)
    table = schedule_table(sched, stride=args.stride)
    print(table)
    path = os.path.join(args.out_dir, "schedule.txt")
    with open(path, "w", encoding="ascii") as f:
        f.write(table + "\n")
    return 0


# train -----------------------------------------------------------------------


def _train_config_from(args) -> TrainConfig:
    return TrainConfig(
        iterations=args.iterations, batch_size=args.batch_size,
        lr_backbone=args.lr_backbone, lr_rest=args.lr_rest,
        weight_decay=args.weight_decay, lr_decay_step=args.lr_decay_step,
        lr_decay_factor=args.lr_decay_factor, seed=args.seed,
        fusion_mode=args.fusion_mode, pd_source=args.pd_source,
        pd_profile=args.pd_profile, t=tuple(args.t), w_rgb=args.w_rgb,
        w_pd=args.w_pd, lambda_c=args.lambda_c, lambda_s=args.lambda_s,
        base_width=args.base_width, crop_size=args.crop_size,
        augment=not args.no_augment, ce_weight=args.ce_weight,
        dice_weight=args.dice_weight, eval_interval=args.eval_interval)


def _add_train_config_flags(p) -> None:
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--lr-backbone", type=float, default=1e-3)
    p.add_argument("--lr-rest", type=float, default=2e-3)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--lr-decay-step", type=int, default=0)
    p.add_argument("--lr-decay-factor", type=float, default=0.1)
    p.add_argument("--fusion-mode", default="structured",
                   choices=["rgb_only", "gaussian", "structured", "manual"])
    p.add_argument("--pd-source", default="pdam",
                   choices=["none", "single", "addition", "pdam"])
    p.add_argument("--pd-profile", default="sharp")
    p.add_argument("--t", type=int, nargs="+", default=[0])
    p.add_argument("--w-rgb", type=float, default=0.95)
    p.add_argument("--w-pd", type=float, default=0.05)
    p.add_argument("--lambda-c", type=float, default=0.5)
    p.add_argument("--lambda-s", type=float, default=0.5)
    p.add_argument("--base-width", type=int, default=32)
    p.add_argument("--crop-size", type=int, default=64)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--ce-weight", type=float, default=1.0)
    p.add_argument("--dice-weight", type=float, default=1.0)
    p.add_argument("--eval-interval", type=int, default=500)


def cmd_train(args) -> int:
    _write_echo(args, "train")
    config = _train_config_from(args)
    train_samples, test_samples = data_mod.load_manifest(args.manifest)
    result = train(train_samples, test_samples, config)
    os.makedirs(args.out_dir, exist_ok=True)
    trace_path = os.path.join(args.out_dir, "trace.csv")
    with open(trace_path, "w", encoding="ascii") as f:
        f.write(result.trace_csv())
    meta = {
        "command": "train",
        "config": dataclasses.asdict(config),
        "num_classes": result.num_classes,
        "pd_names": result.pd_names,
        "aborted": result.aborted,
        "skipped_steps": result.skipped_steps,
    }
    ckpt_path = os.path.join(args.out_dir, "checkpoint.ckpt")
    fileio.save_checkpoint(ckpt_path, result.model.build_store(), meta)
    if result.aborted:
        print("training aborted on a numeric failure; "
              "checkpoint holds the last good snapshot")
    if result.final_scores:
        s = result.final_scores
        print(f"final: pa={s.pixel_accuracy:.4f} ma={s.mean_accuracy:.4f} "
              f"miou={s.mean_iou:.4f}")
    print(f"wrote {ckpt_path} and {trace_path}")
    return 0


# eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    _write_echo(args, "eval")
    model, config, pd_names = rebuild_from_checkpoint(args.checkpoint)
    _, test_samples = data_mod.load_manifest(args.manifest)
    if not test_samples:
        raise ConfigError("manifest has no test samples")
    scores = evaluate(model, test_samples, pd_names, multiscale=args.multiscale)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "scores.csv")
    with open(path, "w", encoding="ascii") as f:
        f.write("pa,ma,miou,multiscale\n")
        f.write(f"{scores.pixel_accuracy:.6f},{scores.mean_accuracy:.6f},"
                f"{scores.mean_iou:.6f},{int(args.multiscale)}\n")
    print(f"pa={scores.pixel_accuracy:.4f} ma={scores.mean_accuracy:.4f} "
          f"miou={scores.mean_iou:.4f} ({'multi' if args.multiscale else 'single'}-scale)")
    return 0


# ablate ----------------------------------------------------------------------


def cmd_ablate(args) -> int:
    _write_echo(args, "ablate")
    base = _train_config_from(args)
    train_samples, test_samples = data_mod.load_manifest(args.manifest)
    results = ablate_mod.run_grid(args.grid, train_samples, test_samples, base,
                                  seeds=args.grid_seeds,
                                  multiscale=args.multiscale, log=print)
    csv_text = ablate_mod.rows_to_csv(results)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, f"ablate_{args.grid.replace('-', '_')}.csv")
    with open(path, "w", encoding="ascii") as f:
        f.write(csv_text)
    print(csv_text, end="")
    print(f"wrote {path}")
    return 0


# wiring ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = _Parser(prog="pdseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="write a synthetic dataset plus manifest")
    p.add_argument("--num-train", type=int, default=40)
    p.add_argument("--num-test", type=int, default=20)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=6)
    p.add_argument("--objects-min", type=int, default=3)
    p.add_argument("--objects-max", type=int, default=7)
    p.add_argument("--texture-noise", type=float, default=0.05)
    p.add_argument("--profiles", nargs="+",
                   default=["sharp", "smooth", "quantized", "sensor"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("aggregate", parents=[common],
                       help="fuse PFM pseudo-depth maps with PDAM")
    p.add_argument("maps", nargs="+", help="single-channel PFM files")
    p.add_argument("--params", default=None,
                   help="checkpoint with trained PDAM weights (default zero-init)")
    p.add_argument("--lambda-c", type=float, default=0.5)
    p.add_argument("--lambda-s", type=float, default=0.5)
    p.add_argument("--out", default="aggregate")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference verification of the engine")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck, dtype="f64")

    p = sub.add_parser("schedule", parents=[common],
                       help="print a noise schedule table")
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=0.00085)
    p.add_argument("--beta-end", type=float, default=0.012)
    p.add_argument("--kind", choices=["linear", "scaled_linear"],
                   default="scaled_linear")
    p.add_argument("--stride", type=int, default=100)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--manifest", required=True)
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint on the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--multiscale", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", choices=list(ablate_mod.GRID_NAMES), required=True)
    p.add_argument("--grid-seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--multiscale", action="store_true")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.from_echo:
            _apply_echo(args)
        return args.func(args)
    except ConfigError as e:
        print(f"pdseg: configuration error: {e}", file=sys.stderr)
        return 1
    except (NumericError, fileio.ParseError, DimensionError, OSError, ValueError) as e:
        print(f"pdseg: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
