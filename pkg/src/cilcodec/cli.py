"""Command line: ``cilcodec run|encode|decode|inspect-store|train-codec``.

Set CILCODEC_LOG_LEVEL (DEBUG, INFO, WARNING) to control verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CilCodecError, ConfigError


def _setup_logging() -> None:
    level = os.environ.get("CILCODEC_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def cmd_run(args) -> int:
    from .harness import load_config, run

    overrides = {"mode": args.mode, "seed": args.seed, "out": args.out}
    config = load_config(args.config, overrides)
    report = run(config)
    print(report.table())
    return 0


def _load_codec(path):
    from .codec.model import CodecModel

    return CodecModel.load(path)


def cmd_encode(args) -> int:
    from PIL import Image

    from .codec.bitstream import encode, measure_bpp

    codec = _load_codec(args.codec)
    with Image.open(args.input) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    bs = encode(codec, pixels)
    Path(args.output).write_bytes(bs.to_bytes())
    print(f"{args.output}: {bs.total_bits} bits, {measure_bpp(bs):.4f} bpp")
    return 0


def cmd_decode(args) -> int:
    from PIL import Image

    from .codec.bitstream import Bitstream, decode

    codec = _load_codec(args.codec)
    bs = Bitstream.from_bytes(Path(args.input).read_bytes())
    Image.fromarray(decode(codec, bs)).save(args.output)
    print(f"{args.output}: {bs.orig_w}x{bs.orig_h}")
    return 0


def cmd_inspect_store(args) -> int:
    from .buffer import read_manifest

    rows = read_manifest(args.store)
    print(f"{'file':<22} {'class':>5} {'phase':>5} {'cost_bits':>10}  mode")
    total = 0
    for r in rows:
        total += r["cost_bits"]
        print(f"{r['file']:<22} {r['class']:>5} {r['phase']:>5} {r['cost_bits']:>10}  {r['mode']}")
    print(f"{len(rows)} records, {total} bits")
    return 0


def cmd_train_codec(args) -> int:
    from .codec.train import freeze_decoder_side, train_initial
    from .datamodel import load_image_dir

    train, _, _ = load_image_dir(args.images)
    model = train_initial(train, args.lmbda, args.epochs, seed=args.seed)
    freeze_decoder_side(model).save(args.out)
    print(f"saved {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cilcodec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an incremental experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", choices=["raw", "full_compression", "cam_composite", "blank_background", "background_removal"])
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("encode", help="compress one image file")
    e.add_argument("--codec", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decompress one bitstream file")
    d.add_argument("--codec", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("inspect-store", help="print an exemplar store manifest with costs")
    s.add_argument("--store", required=True)
    s.set_defaults(func=cmd_inspect_store)

    t = sub.add_parser("train-codec", help="train and freeze a codec on an image directory")
    t.add_argument("--images", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lambda", dest="lmbda", type=float, default=16384.0)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_codec)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (CilCodecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
