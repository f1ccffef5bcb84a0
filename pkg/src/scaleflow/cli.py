"""Command line entry point.

Subcommands: gen-data (synthetic pairs + manifest), train, predict, eval,
viz (flow to colour image), gradcheck (finite-difference suites).  Every run
prints its resolved configuration before acting and reports failures as a
single ``error: ...`` line on stderr.  Exit codes: 0 ok, 1 usage, 2 data
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluator as E
from .model import ModelParams, preset_config, read_model_config
from .tensor import Tensor
from .trainer import (LrSchedule, NonFiniteGradient, NonFiniteLoss, TrainConfig, train)
from .verify import gradient_suite, suite_thresholds

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _print_config(args: argparse.Namespace) -> None:
    for key in sorted(vars(args)):
        if key in ("func", "command"):
            continue
        print(f"config {key} = {getattr(args, key)}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scaleflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate synthetic pairs and a manifest")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, default=50)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--max-shift", type=float, default=6.0)
    gen.add_argument("--mode", choices=("translation", "affine"), default="translation")
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train on a manifest of pairs")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--preset", choices=("default", "tiny", "micro"), default="tiny")
    tr.add_argument("--config", help="model config file (overrides --preset)")
    tr.add_argument("--iters", type=int, default=1000)
    tr.add_argument("--batch", type=int, default=4)
    tr.add_argument("--scale-factor", type=float, default=0.01,
                    help="schedule breakpoint scale (1.0 = full-length schedule)")
    tr.add_argument("--lambda", dest="lambda_rec", type=float, default=0.005,
                    help="reconstruction weight used once phase 2 starts")
    tr.add_argument("--phase2-start", type=int, default=None)
    tr.add_argument("--fixed-lr", type=float, default=None)
    tr.add_argument("--eval-every", type=int, default=250)
    tr.add_argument("--checkpoint-every", type=int, default=500)
    tr.add_argument("--augment", action="store_true")
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="estimate flow for one image pair")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--config", required=True, help="model config written by train")
    pr.add_argument("--image-a", required=True)
    pr.add_argument("--image-b", required=True)
    pr.add_argument("--out", required=True, help="output .flo path")
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="compare predicted .flo files against ground truth")
    ev.add_argument("--pred-dir", required=True)
    ev.add_argument("--gt-dir", required=True)
    ev.add_argument("--out", required=True, help="report directory")
    ev.set_defaults(func=cmd_eval)

    vz = sub.add_parser("viz", help="render a .flo file as a colour PPM")
    vz.add_argument("--flow", required=True)
    vz.add_argument("--out", required=True)
    vz.add_argument("--max-magnitude", type=float, default=None)
    vz.set_defaults(func=cmd_viz)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    return parser


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    triples = []
    for i in range(args.count):
        if args.mode == "translation":
            rng = np.random.default_rng((args.seed, i))
            tx, ty = rng.uniform(-args.max_shift, args.max_shift, size=2)
            spec = D.MotionSpec.translation(tx, ty)
        else:
            spec = D.MotionSpec(max_shift=args.max_shift, max_rotate_deg=8.0,
                                max_scale_delta=0.08)
        pair = D.generate_synthetic_pair((args.seed, i, 1), args.size, spec)
        a_name, b_name, f_name = (f"{i:05d}_a.ppm", f"{i:05d}_b.ppm", f"{i:05d}.flo")
        D.write_image(out / a_name, pair.image_a)
        D.write_image(out / b_name, pair.image_b)
        D.write_flo(out / f_name, pair.flow)
        triples.append((a_name, b_name, f_name))
    D.write_manifest(out / "manifest.txt", triples)
    print(f"wrote {args.count} pairs to {out} (manifest.txt)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .figures import save_loss_curve

    model_cfg = read_model_config(args.config) if args.config else preset_config(args.preset)
    pairs = D.load_manifest_pairs(args.manifest)
    cfg = TrainConfig(
        batch_size=args.batch,
        max_iters=args.iters,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        eval_every=args.eval_every,
        schedule=LrSchedule(scale=args.scale_factor),
        fixed_lr=args.fixed_lr,
        phase2_start=args.phase2_start,
        lambda_rec=args.lambda_rec,
        augment=D.AugmentPolicy() if args.augment else None,
    )
    t0 = time.time()
    result = train(pairs, model_cfg, cfg, out_dir=args.out)
    save_loss_curve(result.history, Path(args.out) / "loss_curve.png")
    epe = "n/a" if result.final_val_epe is None else f"{result.final_val_epe:.4f}"
    print(f"trained {args.iters} iterations in {time.time() - t0:.1f}s; "
          f"final validation EPE {epe}; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model_cfg = read_model_config(args.config)
    params = ModelParams.load(args.checkpoint)
    from .model import forward, to_model_input

    image_a = D.read_image(args.image_a)
    image_b = D.read_image(args.image_b)
    ia = Tensor(to_model_input(image_a)[None].astype(np.float32))
    ib = Tensor(to_model_input(image_b)[None].astype(np.float32))
    out = forward(ia, ib, params, model_cfg)
    D.write_flo(args.out, out.flow.data[0])
    print(f"wrote flow {tuple(out.flow.data[0].shape)} to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .figures import save_epe_bin_chart

    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    names = sorted(p.name for p in pred_dir.glob("*.flo"))
    names = [n for n in names if (gt_dir / n).exists()]
    if not names:
        raise D.FileFormatError(f"no matching .flo files between {pred_dir} and {gt_dir}")
    triples = [(D.read_flo(pred_dir / n), D.read_flo(gt_dir / n), None) for n in names]
    report = E.evaluate_many(triples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.kv").write_text("\n".join(E.report_kv_lines(report)) + "\n")
    (out / "report.txt").write_text(E.report_table(report) + "\n")
    save_epe_bin_chart(report, out / "epe_bins.png")
    print(E.report_table(report))
    print(f"evaluated {len(names)} fields; reports in {out}")
    return EXIT_OK


def cmd_viz(args) -> int:
    flow = D.read_flo(args.flow)
    D.write_image(args.out, D.flow_to_color(flow, args.max_magnitude))
    print(f"rendered {args.flow} -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = gradient_suite(seed=args.seed)
    thresholds = suite_thresholds()
    failed = []
    for name, err in errors.items():
        tol = thresholds[name]
        status = "ok" if err < tol else "FAIL"
        print(f"{name:<28} max_rel_err={err:.3e}  (tol {tol:g})  {status}")
        if err >= tol:
            failed.append(name)
    print(f"overall max relative error: {max(errors.values()):.3e}")
    if failed:
        print(f"error: gradient checks failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _print_config(args)
    try:
        return args.func(args)
    except (D.FileFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, NonFiniteGradient, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
