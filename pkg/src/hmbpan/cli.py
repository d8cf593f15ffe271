"""``hmbpan`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 unreadable or
inconsistent data, 4 numeric failure (non-finite values, divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__, harness, isodata, metrics
from . import raster as rs
from . import tensor as T
from .classical import DegenerateInputError
from .config import ConfigFileError, build_train_config, load_config
from .hmcnn import ConfigError
from .losses import LossConfigError
from .training import TrainingDiverged

log = logging.getLogger("hmbpan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _sections(args):
    return load_config(args.config) if args.config else {}


def _model_config(args):
    return build_train_config(_sections(args)).model


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _say(args, text):
    if not args.quiet:
        print(text)


# -- verbs ----------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hrms, pan = rs.synthesize_scene(args.width, args.height, seed=args.seed or 0)
    rs.write_raster(hrms, out / "hrms.mbr")
    rs.write_raster(pan, out / "pan.mbr")
    _say(args, f"wrote {out / 'hrms.mbr'} and {out / 'pan.mbr'}")


def cmd_degrade(args):
    hrms, pan = rs.read_raster(args.hrms), rs.read_raster(args.pan)
    index = harness.degrade_to_dir(hrms, pan, args.scale, args.out_dir, args.patch, args.stride)
    _say(args, f"wrote {len(index['triples'])} triples to {args.out_dir}")


def cmd_train(args):
    sections = _sections(args)
    cfg = build_train_config(sections, seed=args.seed)
    data = sections.get("data", {})
    index = args.index or data.get("index")
    out_dir = args.out_dir or data.get("out_dir")
    if not index or not out_dir:
        raise UsageError("train needs a dataset index and an output directory (data.index/data.out_dir or flags)")
    manifest = harness.run_training(cfg, index, out_dir)
    _say(args, f"final loss {manifest['step_losses'][-1]:.6g}; weights in {Path(out_dir) / manifest['artifacts']['weights']}")


def cmd_fuse(args):
    if args.method == "hmcnn" and not args.weights:
        raise UsageError("method hmcnn needs --weights")
    lrms, pan = rs.read_raster(args.lrms), rs.read_raster(args.pan)
    model_cfg = _model_config(args) if args.method == "hmcnn" else None
    t = time.perf_counter()
    fused = harness.fuse(args.method, lrms, pan, args.weights, model_cfg, args.scale)
    elapsed = time.perf_counter() - t
    rs.write_raster(fused, args.out)
    _write_json(
        {
            "method": args.method,
            "lrms": str(args.lrms),
            "pan": str(args.pan),
            "weights": str(args.weights) if args.weights else None,
            "output": str(args.out),
            "wall_clock_s": elapsed,
            "version": __version__,
        },
        str(args.out) + ".json",
    )
    _say(args, f"wrote {args.out} ({fused.width}x{fused.height}x{fused.bands}) in {elapsed:.3f}s")


def cmd_evaluate(args):
    if args.ref is None and (args.lrms is None or args.pan is None):
        raise UsageError("evaluate needs --ref, or --lrms and --pan, or all three")
    fused = rs.read_raster(args.fused)
    ref = rs.read_raster(args.ref) if args.ref else None
    lrms = rs.read_raster(args.lrms) if args.lrms else None
    pan = rs.read_raster(args.pan) if args.pan else None
    report = metrics.evaluate_all(fused, ref, lrms, pan, s=args.scale)
    text = report.to_json(args.out)
    if args.csv:
        report.append_csv(args.csv, args.method or Path(args.fused).stem)
    if args.out is None and not args.quiet:
        print(text)


def cmd_error_map(args):
    emap = harness.error_map(rs.read_raster(args.fused), rs.read_raster(args.ref))
    side = harness.write_error_map(emap, args.out)
    if args.raw:
        rs.write_raster(emap, args.raw)
    _say(args, f"wrote {args.out}; mean squared error {side['mean_squared_error']:.6g}")


def cmd_classify(args):
    img = rs.read_raster(args.image)
    params = isodata.IsodataParams(args.k, args.max_iter, args.min_size, seed=args.seed or 0)
    lm = isodata.classify(img, params)
    out = Path(args.out)
    labels = lm.to_raster()
    rs.write_pnm(labels, out)
    rs.write_raster(labels, out.with_suffix(".mbr"))
    side = {
        "k_init": args.k,
        "max_iter": args.max_iter,
        "k_final": lm.k_final,
        "n_iter": lm.n_iter,
        "centers": lm.centers.tolist(),
        "sse_trace": [list(t) for t in lm.sse_trace],
        "labels": out.with_suffix(".mbr").name,
    }
    if args.compare:
        other = rs.read_raster(args.compare)
        side["compare"] = str(args.compare)
        side["agreement"] = isodata.agreement(lm.labels, other.data[0].astype(int))
    _write_json(side, str(out) + ".json")
    msg = f"{lm.k_final} classes after {lm.n_iter} iterations"
    if args.compare:
        msg += f"; agreement {side['agreement']:.4f}"
    _say(args, msg)


def cmd_bench(args):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in harness.FUSION_METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}; choose from {', '.join(harness.FUSION_METHODS)}")
    if "hmcnn" in methods and not args.weights:
        raise UsageError("method hmcnn needs --weights")
    if args.index:
        _, triples = harness.load_index(args.index)
        pairs = [(lr, p) for lr, p, _ in triples]
    elif args.lrms and args.pan:
        pairs = [(rs.read_raster(args.lrms), rs.read_raster(args.pan))]
    else:
        raise UsageError("bench needs --index, or --lrms and --pan")
    model_cfg = _model_config(args) if "hmcnn" in methods else None
    rows = harness.bench(methods, pairs, args.repetitions, args.weights, model_cfg, args.scale)
    harness.write_bench_csv(rows, args.out)
    for r in rows:
        _say(args, f"{r['method']:>8}: mean {r['mean_s']:.4f}s  min {r['min_s']:.4f}s  ({r['runs']} runs)")


# -- parser -----------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat section.key = value file")
    common.add_argument("--seed", type=int, help="overrides train.seed (and seeds synth/classify)")
    common.add_argument("--quiet", action="store_true", help="only errors")

    parser = argparse.ArgumentParser(prog="hmbpan", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"hmbpan {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")

    def verb(name, fn, help):
        p = sub.add_parser(name, help=help, parents=[common], argument_default=argparse.SUPPRESS)
        p.set_defaults(func=fn)
        return p

    p = verb("synth", cmd_synth, "write a synthetic HR-MS/PAN scene")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--out-dir", required=True)

    p = verb("degrade", cmd_degrade, "crop and degrade a scene into training triples")
    p.add_argument("--hrms", required=True)
    p.add_argument("--pan", required=True, help="PAN at HR-MS resolution")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out-dir", required=True)

    p = verb("train", cmd_train, "train HMCNN on a degraded patch set")
    p.add_argument("--index", default=None)
    p.add_argument("--out-dir", default=None)

    p = verb("fuse", cmd_fuse, "pan-sharpen one LRMS/PAN pair")
    p.add_argument("--method", required=True, choices=harness.FUSION_METHODS)
    p.add_argument("--lrms", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out", required=True)

    p = verb("evaluate", cmd_evaluate, "quality metrics of a fused image")
    p.add_argument("--fused", required=True)
    p.add_argument("--ref", default=None)
    p.add_argument("--lrms", default=None)
    p.add_argument("--pan", default=None)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out", default=None, help="JSON report path (stdout if omitted)")
    p.add_argument("--csv", default=None, help="append a row to this table")
    p.add_argument("--method", default=None, help="row label for --csv")

    p = verb("error-map", cmd_error_map, "per-pixel squared error as a PGM")
    p.add_argument("--fused", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", default=None, help="also write the float map as MBR1")

    p = verb("classify", cmd_classify, "ISODATA classification of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="label PGM; .mbr and .json written alongside")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=5)
    p.add_argument("--min-size", type=int, default=20)
    p.add_argument("--compare", default=None, help="label .mbr to measure agreement against")

    p = verb("bench", cmd_bench, "wall-clock timing of fusion methods")
    p.add_argument("--methods", default="ihs,brovey,gs,sfim")
    p.add_argument("--index", default=None)
    p.add_argument("--lrms", default=None)
    p.add_argument("--pan", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    # flags given before the verb must survive the verb parser's defaults
    for name, default in (("config", None), ("seed", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )

    def fail(code, exc):
        print(f"hmbpan {args.verb}: error: {exc}", file=sys.stderr)
        return code

    try:
        args.func(args)
    except (UsageError, ConfigFileError, ConfigError, LossConfigError) as exc:
        return fail(EXIT_USAGE, exc)
    except (TrainingDiverged, T.NumericError, FloatingPointError) as exc:
        return fail(EXIT_NUMERIC, exc)
    except (rs.RasterFormatError, T.WeightFileError, T.ShapeError, DegenerateInputError,
            metrics.DegenerateReferenceError, OSError, ValueError) as exc:
        return fail(EXIT_DATA, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
