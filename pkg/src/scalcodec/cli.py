"""Command-line front end: training, coding, estimation, and analysis runs.

Exit codes: 0 success, 1 usage or state errors, 2 malformed data files.
"""

import os
import sys

# thread cap must be in place before numpy is first imported anywhere
_threads = os.environ.get("SCALCODEC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse

import numpy as np

from . import config as cfg
from . import data, info_bounds, io, metrics
from . import pipelines as pl
from . import range_coder as rc
from . import training
from .errors import ContractError, DivergenceError, FormatError

_KIND_NAMES = {
    rc.LAYER_BASE: "base",
    rc.LAYER_CONDITIONAL: "conditional",
    rc.LAYER_RESIDUAL: "residual",
    rc.LAYER_STANDALONE: "standalone",
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for bad data files
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _settings(args):
    if args.config is None:
        return cfg.parse_settings("")
    return cfg.load_settings(args.config)


def _load_base(settings, path):
    base = pl.BasePipeline(settings.pipeline, seed=settings.schedule.seed)
    base.store.load_arrays(io.load_checkpoint(path), strict=True)
    return base


def _load_enh(settings, mode, path, base=None):
    enh = pl.EnhancementPipeline(settings.pipeline, mode,
                                 seed=settings.schedule.seed, base=base)
    enh.store.load_arrays(io.load_checkpoint(path), strict=True)
    return enh


def _train_images(settings):
    images = data.make_images(settings.train_count, settings.train_size,
                              seed=settings.train_seed)
    return images


def _eval_images(settings):
    return data.make_images(settings.eval_count, settings.eval_size,
                            seed=settings.eval_seed)


def _report_training(result, name):
    print(f"{name}: {len(result.history)} epochs, "
          f"best validation loss {result.best_val:.6f}, "
          f"stopped by {result.stop_reason}")


def _print_layer_stats(stats, pixels):
    for i, st in enumerate(stats):
        bpp = st.payload_bits / pixels
        print(f"layer {i} ({_KIND_NAMES[st.kind]}): "
              f"{st.payload_bits} bits ({bpp:.4f} bpp), "
              f"estimate {st.estimated_bits:.1f} bits")


def cmd_train_base(args):
    settings = _settings(args)
    images = _train_images(settings)
    targets = data.palette_targets(images, settings.pipeline.palette_size)
    base = pl.BasePipeline(settings.pipeline, seed=settings.schedule.seed)
    if args.warm_start:
        base.store.load_arrays(io.load_checkpoint(args.warm_start), strict=True)
    result = training.train(base, (images, targets), settings.schedule)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "base.ckpt")
    io.save_checkpoint(ckpt, base.store.state_arrays())
    hist = os.path.join(args.out_dir, "base_history.csv")
    with open(hist, "w", encoding="utf-8") as fh:
        fh.write(training.history_csv(result.history))
    _report_training(result, "base")
    print(f"wrote {ckpt}")
    print(f"wrote {hist}")
    return 0


def cmd_train_enh(args):
    settings = _settings(args)
    pipeline_cfg = settings.pipeline
    if args.lam is not None:
        pipeline_cfg = pipeline_cfg.with_lambdas(lambda_enh=args.lam)
    needs_base = args.mode != pl.MODE_STANDALONE
    if needs_base and args.base is None:
        raise ContractError(f"mode '{args.mode}' needs --base")
    base = _load_base(settings, args.base) if needs_base else None
    enh = pl.EnhancementPipeline(pipeline_cfg, args.mode,
                                 seed=settings.schedule.seed, base=base)
    if args.warm_start:
        enh.store.load_arrays(io.load_checkpoint(args.warm_start), strict=True)
    images = _train_images(settings)
    latents = pl.quantized_base_latents(base, images) if needs_base else None
    result = training.train(enh, (images, latents), settings.schedule)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, f"enh_{args.mode}.ckpt")
    io.save_checkpoint(ckpt, enh.store.state_arrays())
    hist = os.path.join(args.out_dir, f"enh_{args.mode}_history.csv")
    with open(hist, "w", encoding="utf-8") as fh:
        fh.write(training.history_csv(result.history))
    _report_training(result, f"enhancement ({args.mode})")
    print(f"wrote {ckpt}")
    print(f"wrote {hist}")
    return 0


def _coding_pipelines(args, settings):
    base = _load_base(settings, args.base) if args.base else None
    enh = None
    if args.enh:
        if args.mode is None:
            raise ContractError("--enh needs --mode")
        enh = _load_enh(settings, args.mode, args.enh, base=base)
    return base, enh


def cmd_encode(args):
    settings = _settings(args)
    base, enh = _coding_pipelines(args, settings)
    image = io.read_image(args.image)
    stream, stats = pl.encode_scalable(image, base=base, enh=enh)
    with open(args.out, "wb") as fh:
        fh.write(stream)
    _print_layer_stats(stats, image.shape[1] * image.shape[2])
    print(f"wrote {args.out} ({len(stream)} bytes)")
    return 0


def cmd_decode(args):
    settings = _settings(args)
    base, enh = _coding_pipelines(args, settings)
    with open(args.stream, "rb") as fh:
        stream = fh.read()
    result = pl.decode_scalable(stream, base=base, enh=enh)
    os.makedirs(args.out_dir, exist_ok=True)
    if result.labels is not None:
        path = os.path.join(args.out_dir, "labels.pgm")
        io.write_image(path, result.labels[None].astype(np.float32) / 255.0)
        print(f"wrote {path}")
    if result.reconstruction is not None:
        path = os.path.join(args.out_dir, "recon.ppm")
        io.write_image(path, np.clip(result.reconstruction, 0.0, 1.0))
        print(f"wrote {path}")
    return 0


def cmd_estimate(args):
    settings = _settings(args)
    base, enh = _coding_pipelines(args, settings)
    image = io.read_image(args.image)
    _, stats = pl.encode_scalable(image, base=base, enh=enh)
    pixels = image.shape[1] * image.shape[2]
    for i, st in enumerate(stats):
        print(f"layer {i} ({_KIND_NAMES[st.kind]}): "
              f"estimated {st.estimated_bits:.1f} bits "
              f"({st.estimated_bits / pixels:.4f} bpp)")
    return 0


def cmd_bounds(args):
    records = info_bounds.sweep(args.instances, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(info_bounds.sweep_csv(records))
    worst_lower = min(r.lower_slack for _, r, _ in records)
    worst_upper = min(r.upper_slack for _, r, _ in records)
    worst_identity = max(abs(r.lower_slack_identity) for _, r, _ in records)
    worst_shift = max(abs(s.shift_invariance_error) for _, _, s in records)
    worst_decor = max(abs(s.decorrelation_error) for _, _, s in records)
    print(f"instances: {args.instances}")
    print(f"worst lower-bound slack: {worst_lower:.3e}")
    print(f"worst upper-bound slack: {worst_upper:.3e}")
    print(f"worst slack identity error: {worst_identity:.3e}")
    print(f"worst residual shift error: {worst_shift:.3e}")
    print(f"worst residual decorrelation error: {worst_decor:.3e}")
    print(f"wrote {args.out}")
    ok = (worst_lower >= -1e-9 and worst_upper >= -1e-9
          and worst_identity <= 1e-9 and worst_shift <= 1e-10
          and worst_decor <= 1e-10)
    return 0 if ok else 1


def cmd_bdrate(args):
    reference = metrics.RDCurve.from_points(metrics.read_rd_csv(args.reference))
    test = metrics.RDCurve.from_points(metrics.read_rd_csv(args.test))
    bd_test = metrics.bd_rate(reference, test)
    print(f"bd-rate (test vs reference): {bd_test:+.4f}%")
    if args.upper:
        upper = metrics.RDCurve.from_points(metrics.read_rd_csv(args.upper))
        bd_upper = metrics.bd_rate(reference, upper)
        print(f"bd-rate (upper vs reference): {bd_upper:+.4f}%")
        util = metrics.utilization(bd_test, bd_upper)
        print(f"margin utilization: {util:.2f}%")
    return 0


def cmd_curve(args):
    settings = _settings(args)
    if len(args.lambdas) != len(args.enh):
        raise ContractError("--lambdas must list one value per --enh checkpoint")
    needs_base = args.mode != pl.MODE_STANDALONE
    if needs_base and args.base is None:
        raise ContractError(f"mode '{args.mode}' needs --base")
    base = _load_base(settings, args.base) if needs_base else None
    images = _eval_images(settings)
    points = []
    for path, lam in zip(args.enh, args.lambdas):
        enh = _load_enh(settings, args.mode, path, base=base)
        rd = pl.measure_rd(images, enh, base=base)
        bpp = rd["enh_bpp"] + (rd["base_bpp"] if args.add_base_rate else 0.0)
        points.append(metrics.RDPoint.make(args.mode, lam, bpp, rd["rmse"]))
        print(f"{path}: {bpp:.4f} bpp, rmse {rd['rmse']:.5f}")
    points.sort(key=lambda p: p.bpp)
    metrics.write_rd_csv(args.out, points)
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = _Parser(prog="scalcodec",
                     description="scalable image codec toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="flat key-value settings file")
        return p

    p = add("train-base", cmd_train_base, "train the base task pipeline")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--warm-start", help="checkpoint to initialize from")

    p = add("train-enh", cmd_train_enh, "train an enhancement pipeline")
    p.add_argument("--mode", required=True, choices=pl.ENHANCEMENT_MODES)
    p.add_argument("--base", help="trained base checkpoint")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="rate weight override")
    p.add_argument("--warm-start", help="checkpoint to initialize from")
    p.add_argument("--out-dir", required=True)

    p = add("encode", cmd_encode, "encode an image to a layered stream")
    p.add_argument("--image", required=True)
    p.add_argument("--base", help="base checkpoint")
    p.add_argument("--enh", help="enhancement checkpoint")
    p.add_argument("--mode", choices=pl.ENHANCEMENT_MODES)
    p.add_argument("--out", required=True)

    p = add("decode", cmd_decode, "decode a layered stream")
    p.add_argument("--stream", required=True)
    p.add_argument("--base", help="base checkpoint")
    p.add_argument("--enh", help="enhancement checkpoint")
    p.add_argument("--mode", choices=pl.ENHANCEMENT_MODES)
    p.add_argument("--out-dir", required=True)

    p = add("estimate", cmd_estimate, "report model rate estimates per layer")
    p.add_argument("--image", required=True)
    p.add_argument("--base", help="base checkpoint")
    p.add_argument("--enh", help="enhancement checkpoint")
    p.add_argument("--mode", choices=pl.ENHANCEMENT_MODES)

    p = add("bounds", cmd_bounds, "run the discrete information lab")
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("bdrate", cmd_bdrate, "average rate difference between RD curves")
    p.add_argument("--reference", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--upper", help="upper-baseline curve for utilization")

    p = add("curve", cmd_curve, "evaluate checkpoints into an RD curve CSV")
    p.add_argument("--mode", required=True, choices=pl.ENHANCEMENT_MODES)
    p.add_argument("--base", help="trained base checkpoint")
    p.add_argument("--enh", nargs="+", required=True,
                   help="enhancement checkpoints, one per rate point")
    p.add_argument("--lambdas", nargs="+", type=float, required=True,
                   help="rate weight used to train each checkpoint")
    p.add_argument("--add-base-rate", action="store_true",
                   help="fold the base layer rate into each point")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
