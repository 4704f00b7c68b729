"""Command-line interface.

Verbs: gen-data, train, eval, export-maps, ablate. Exit codes: 0 ok,
2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import sys

from .errors import ConfigError, DataError, NumericError


def _build_parser():
    parser = argparse.ArgumentParser(prog="boxseg")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--boxes-only", action="store_true",
                   help="omit masks from the manifest (weak supervision)")

    p = sub.add_parser("train", help="train per a config file")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--debug-identity", action="store_true",
                   help="score the GT masks against themselves (sanity check)")

    p = sub.add_parser("export-maps", help="dump pipeline maps for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train with loss-flag overrides")
    p.add_argument("--config", required=True)
    p.add_argument("--flags", required=True,
                   help="comma list like 'cla=0,px=0,decouple=1'")
    return parser


def _dispatch(args):
    from . import data, train

    if args.verb == "gen-data":
        manifest = data.write_dataset(args.out, args.seed, args.count,
                                      size=args.size, with_masks=not args.boxes_only)
        print(f"wrote {args.count} samples; manifest: {manifest}")
    elif args.verb == "train":
        cfg = train.parse_config(args.config)
        result = train.train(cfg)
        print(f"checkpoint: {result.checkpoint_path}")
        if result.final_metrics:
            print(f"final mdice: {result.final_metrics['mdice']:.4f}")
    elif args.verb == "eval":
        agg = train.evaluate_checkpoint(args.ckpt, args.data, args.out,
                                        debug_identity=args.debug_identity)
        print(f"mdice {agg['mdice']:.4f}  miou {agg['miou']:.4f}  "
              f"f1 {agg['f1']:.4f}")
    elif args.verb == "export-maps":
        written = train.export_maps(args.ckpt, args.image, args.out)
        for name, path in sorted(written.items()):
            print(f"{name}: {path}")
    elif args.verb == "ablate":
        cfg = train.apply_flag_overrides(train.parse_config(args.config), args.flags)
        result = train.train(cfg)
        print(f"checkpoint: {result.checkpoint_path}")


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
