"""Command line: export a dataset, fit a probe, verify a finished export."""

from __future__ import annotations

import argparse
import json
import sys


def _echo(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def cmd_export(args) -> int:
    from .export import run_export

    manifest = run_export(args.data, args.backbone, args.template or [],
                          args.out, captions_path=args.captions,
                          probe_path=args.probe)
    _echo({"command": "export", "out": args.out,
           "backbone": manifest["backbone"], "dim": manifest["dim"],
           "num_images": manifest["num_images"],
           "num_classes": manifest["num_classes"],
           "files": sorted(manifest["files"])})
    return 0


def cmd_probe(args) -> int:
    from . import embfile
    from .export import read_manifest
    from .probe import ProbeConfig, fit_probe, probe_logits, save_probe

    manifest = read_manifest(args.export)
    features = embfile.read_emb(f"{args.export}/features.emb")
    labels = embfile.read_emb(f"{args.export}/labels.emb")[:, 0]
    config = ProbeConfig(epochs=args.epochs, learning_rate=args.lr,
                         weight_decay=args.weight_decay)
    weights, bias = fit_probe(features, labels, manifest["num_classes"], config)
    save_probe(args.out, weights, bias, manifest["backbone"],
               manifest["class_names"])
    train_acc = float((probe_logits(features, weights, bias).argmax(axis=1)
                       == labels).mean())
    _echo({"command": "probe", "out": args.out,
           "backbone": manifest["backbone"],
           "classes": manifest["num_classes"], "train_accuracy": train_acc})
    return 0


def cmd_verify(args) -> int:
    from .export import verify_export

    manifest = verify_export(args.export)
    _echo({"command": "verify", "export": args.export, "ok": True,
           "files": sorted(manifest["files"])})
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Embed a folder-per-class image dataset for conda-adapt")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="embed images and write the EmbFile set")
    p.add_argument("--data", required=True, help="dataset root (class subdirs)")
    p.add_argument("--backbone", default="toy/rp-256")
    p.add_argument("--template", action="append",
                   help="prompt template with {class_name} (repeatable)")
    p.add_argument("--captions", help="extra caption lines for the similarity matrix")
    p.add_argument("--probe", help="probe.json to also emit linear-probe logits")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("probe", help="fit a linear probe on a finished export")
    p.add_argument("--export", required=True, help="directory written by export")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify", help="re-checksum an export against its manifest")
    p.add_argument("--export", required=True)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        err = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
