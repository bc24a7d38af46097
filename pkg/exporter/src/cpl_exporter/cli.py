"""Command line for the logit exporter."""

import argparse
import json
import sys

from .export import ExportError, ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cpl-export",
        description="Run an image classifier over a dataset and write its logits as CPL1.",
    )
    p.add_argument("--model", required=True,
                   help="TorchScript file path or torchvision model name")
    p.add_argument("--data", required=True,
                   help="image directory (class subdirs, or flat with --labels-csv)")
    p.add_argument("--out", required=True, help="output CPL1 path")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--device", default="cpu")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--labels-csv", default=None, help="filename,label CSV for flat directories")
    p.add_argument("--label-base", type=int, choices=(0, 1), default=1,
                   help="index base of the CSV labels; output is always 1-based")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pretrained", action="store_true",
                   help="load the torchvision default weights instead of a seeded init")
    p.add_argument("--dataset-name", default="")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        model=args.model,
        data=args.data,
        out=args.out,
        batch_size=args.batch_size,
        device=args.device,
        image_size=args.image_size,
        labels_csv=args.labels_csv,
        label_base=args.label_base,
        seed=args.seed,
        pretrained=args.pretrained,
        dataset_name=args.dataset_name,
    )
    try:
        summary = export(spec)
    except ExportError as e:
        print(json.dumps({"error": "ExportError", "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
