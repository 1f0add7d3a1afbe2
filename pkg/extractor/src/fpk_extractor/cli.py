"""Command line: export a folder-per-class dataset to an FPK1 pack.

    fpk-extract --root data/ --classes cat,dog --shots 1 \
        --template "a photo of a {}" --out pack.fpk

Exit codes: 0 success, 1 usage error, 2 extraction/data error.
"""

from __future__ import annotations

import argparse
import sys

from .backends import BACKENDS, ToyPatchBackend
from .errors import ExtractorError
from .job import ExtractJob, extract


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpk-extract",
                     description="Export encoder features to an FPK1 pack.")
    parser.add_argument("--root", required=True,
                        help="dataset root with one folder per class")
    parser.add_argument("--classes", default=None,
                        help="comma-separated class names (default: subfolders)")
    parser.add_argument("--shots", type=int, required=True,
                        help="support images per class")
    parser.add_argument("--template", default="a photo of a {}",
                        help="prompt template; {} is the class name")
    parser.add_argument("--out", required=True, help="output pack path")
    parser.add_argument("--backend", choices=sorted(BACKENDS), default="toy")
    parser.add_argument("--weights", default=None,
                        help="pretrained checkpoint (clip backend)")
    parser.add_argument("--model", default="RN50",
                        help="model architecture name (clip backend)")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"fpk-extract: error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.backend == "toy":
            backend = ToyPatchBackend()
        else:
            backend = BACKENDS[args.backend](model_name=args.model,
                                             weights=args.weights)
        classes = args.classes.split(",") if args.classes else []
        job = ExtractJob(root=args.root, shots=args.shots, out_path=args.out,
                         template=args.template, class_names=classes)
        extract(job, backend)
    except ExtractorError as exc:
        print(f"fpk-extract: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"fpk-extract: {exc}", file=sys.stderr)
        return 2
    h, w, c, c_t = backend.dims
    print(f"wrote {args.out}: D={len(job.resolve_classes())} N={args.shots} "
          f"dims=({h},{w},{c},{c_t}) tau={backend.tau}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
