"""Command-line interface.

Thread pinning happens before numpy is imported, so every heavyweight import
lives inside the dispatch functions rather than at module scope. Failures
raised by the library surface as one machine-parsable line on stderr:

    error: <kind>: <detail>
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")

_STEPS = ("gen-data", "train-codec", "train-classifier", "eval-rd", "adapt",
          "eval-pipelines", "bd-report", "sweep", "run-all")


def _set_threads(n: int):
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="latentvox",
        description="Learned voxel geometry codec with compressed-domain "
                    "classification experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON; defaults "
                        "to the built-in toy configuration")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the experiment seed (also via LB_SEED)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP thread count (default 1, for "
                             "reproducible runs)")

    helps = {
        "gen-data": "generate the synthetic classification dataset",
        "train-codec": "train the sequential lambda ladder of codecs",
        "train-classifier": "train the specifically-trained (ST) classifier",
        "eval-rd": "encode+decode the test split; write rate-distortion tables",
        "adapt": "build and train all adapted classifiers; write compatibility table",
        "eval-pipelines": "evaluate the four classification pipelines",
        "bd-report": "Bjontegaard deltas of compressed presets vs. decompressed",
        "sweep": "layer-freezing sensitivity sweep at one ladder rung",
        "run-all": "run every step above in order",
    }
    for name in _STEPS:
        sp = sub.add_parser(name, help=helps[name])
        common(sp)

    enc = sub.add_parser("encode", help="encode one PLY cloud to an LBPC bitstream")
    enc.add_argument("--model", required=True, help="codec model (.lbcm)")
    enc.add_argument("--input", required=True, help="input cloud (.ply)")
    enc.add_argument("--output", required=True, help="output bitstream (.lbpc)")
    enc.add_argument("--threads", type=int, default=1)

    dec = sub.add_parser("decode", help="decode an LBPC bitstream to a PLY cloud")
    dec.add_argument("--model", required=True, help="codec model (.lbcm)")
    dec.add_argument("--input", required=True, help="input bitstream (.lbpc)")
    dec.add_argument("--output", required=True, help="output cloud (.ply)")
    dec.add_argument("--threads", type=int, default=1)
    return p


def _load_config(args):
    from .config import ExperimentConfig
    cfg = (ExperimentConfig.load(args.config) if args.config
           else ExperimentConfig())
    seed = args.seed
    if seed is None and os.environ.get("LB_SEED"):
        seed = int(os.environ["LB_SEED"])
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if args.threads != cfg.threads:
        from dataclasses import replace
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _run_step(args) -> int:
    from .harness import Harness
    h = Harness(_load_config(args), args.out)
    step = {
        "gen-data": h.gen_data, "train-codec": h.train_codec,
        "train-classifier": h.train_classifier, "eval-rd": h.eval_rd,
        "adapt": h.adapt, "eval-pipelines": h.eval_pipelines,
        "bd-report": h.bd_report, "sweep": h.sweep, "run-all": h.run_all,
    }[args.command]
    step()
    print(f"{args.command}: done -> {args.out}")
    return 0


def _run_encode(args) -> int:
    import numpy as np

    from . import codec
    from .pcloud import PointCloudV, read_ply, voxelize
    model = codec.CodecModel.load(args.model)
    pts, bit_depth = read_ply(args.input)
    if np.issubdtype(np.asarray(pts).dtype, np.floating):
        pcv = voxelize(pts, model.config.bit_depth)
        n_orig = len(pts)
    else:
        if bit_depth is None:
            bit_depth = model.config.bit_depth
        pcv = PointCloudV(np.asarray(pts, dtype=np.int32), bit_depth)
        n_orig = len(pcv)
    stream = codec.encode_pc(pcv, model, orig_point_count=n_orig)
    with open(args.output, "wb") as f:
        f.write(stream.data)
    bpp = stream.total_bits / stream.stats["point_count"]
    print(f"encode: {len(pcv)} voxels -> {len(stream.data)} bytes "
          f"({bpp:.4f} bpp) -> {args.output}")
    return 0


def _run_decode(args) -> int:
    from . import codec
    from .pcloud import write_ply
    model = codec.CodecModel.load(args.model)
    with open(args.input, "rb") as f:
        data = f.read()
    rec = codec.decode_pc(data, model)
    write_ply(args.output, rec.coords, bit_depth=rec.bit_depth)
    print(f"decode: {len(rec)} voxels -> {args.output}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(getattr(args, "threads", 1))
    from .errors import LatentVoxError
    try:
        if args.command == "encode":
            return _run_encode(args)
        if args.command == "decode":
            return _run_decode(args)
        return _run_step(args)
    except LatentVoxError as e:
        print(f"error: {e.KIND}: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
