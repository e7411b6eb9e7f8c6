"""Command-line wrapper: `protocil-export export --checkpoint ... --out ...`."""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .exporter import (
    DEFAULT_MEAN,
    DEFAULT_STD,
    ExportError,
    ExportManifest,
    export,
    read_class_list,
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="protocil-export",
        description="Extract frozen-encoder image embeddings into a FEATSET "
        "file plus a provenance manifest.",
    )
    parser.add_argument("--version", action="version",
                        version=f"protocil-export {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    exp = subs.add_parser(
        "export", formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        help="run the encoder over an image-folder dataset",
    )
    exp.add_argument("--checkpoint", required=True,
                     help="TorchScript archive or torchvision:<arch>[@state.pth]")
    exp.add_argument("--data-root", required=True,
                     help="folder holding one subfolder per class")
    exp.add_argument("--classes", required=True,
                     help="class-list file: original_id,folder_name per line")
    exp.add_argument("--out", required=True, help="output FEATSET path")
    exp.add_argument("--manifest", default=None,
                     help="manifest path (default: <out>.manifest.json)")
    exp.add_argument("--dim", type=int, required=True,
                     help="expected embedding dimension")
    exp.add_argument("--l2-normalize", action="store_true",
                     help="rescale embeddings to unit length")
    exp.add_argument("--image-size", type=int, default=224,
                     help="square resize applied to every image")
    exp.add_argument("--pixel-mean", type=float, nargs=3, default=list(DEFAULT_MEAN),
                     help="per-channel mean for pixel normalization")
    exp.add_argument("--pixel-std", type=float, nargs=3, default=list(DEFAULT_STD),
                     help="per-channel std for pixel normalization")
    exp.add_argument("--batch-size", type=int, default=64)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        manifest = ExportManifest(
            checkpoint=args.checkpoint,
            data_root=args.data_root,
            classes=read_class_list(args.classes),
            out_path=args.out,
            embedding_dim=args.dim,
            l2_normalize=args.l2_normalize,
            image_size=args.image_size,
            pixel_mean=tuple(args.pixel_mean),
            pixel_std=tuple(args.pixel_std),
            batch_size=args.batch_size,
        )
        featset_path, manifest_path = export(manifest)
    except ExportError as exc:
        print(f"error[export]: {exc}", file=sys.stderr)
        return 1
    if args.manifest and args.manifest != manifest_path:
        import shutil

        shutil.move(manifest_path, args.manifest)
        manifest_path = args.manifest
    print(f"wrote {featset_path} and {manifest_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
