"""Command-line surface: train, hide, reveal, eval, metrics.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model-mismatch error,
4 runtime failure. Output files are written temp-then-rename, so a non-zero
exit never leaves a partial artifact behind.
"""

import argparse
import importlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .domain import (
    CENTER_GAZE,
    DataError,
    GazePoint,
    ModelMismatchError,
    PayloadError,
    StegoError,
    ValidationError,
    atomic_write,
    bytes_from_bits,
    denormalize,
    load_png,
    parse_payload_spec,
    payload_to_hex,
    save_png,
)
from .foveation import FoveationConfig
from .stegonet import load_checkpoint
from .train import ExperimentConfig, run_experiment

logger = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; usage errors are exit 1 here.
    def error(self, message):
        raise _UsageError(message)


def _parse_gaze(text: str) -> GazePoint:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise _UsageError(f"gaze must be 'X,Y' with numeric parts, got {text!r}") from None
    return GazePoint(x, y)


def build_parser() -> _Parser:
    parser = _Parser(prog="fovstego", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON experiment config")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--data-dir", action="append", default=[], help="image source folder (repeatable)")
    p.add_argument("--out", required=True, help="output directory for all artifacts")
    p.add_argument("--manifest", default=None, help="reuse an existing manifest file")
    p.add_argument("--seed", type=int, default=None, help="override config seeds")

    p = sub.add_parser("hide", help="embed a payload into a cover image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cover", required=True, help="cover PNG")
    p.add_argument("--payload", required=True, help="hex:<digits> or file:<path>")
    p.add_argument("--gaze", default="0.5,0.5", help="fixation X,Y for the reported loss")
    p.add_argument("--out", required=True, help="stego PNG path")

    p = sub.add_parser("reveal", help="recover a payload from a stego image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stego", required=True, help="stego PNG")
    p.add_argument("--out", default="hex", help="'hex' to print, or file:<path> for raw bytes")

    p = sub.add_parser("eval", help="run the metric suite over a manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=list(data_mod.SPLITS))
    p.add_argument("--report", required=True, help="directory for report.json / report.csv")
    p.add_argument("--payloads-per-image", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="payload seed")
    p.add_argument("--gaze", default="0.5,0.5")
    p.add_argument("--lpips", default=None,
                   help="external perceptual metric provider as module:callable")

    p = sub.add_parser("metrics", help="compare two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--gaze", default="0.5,0.5")

    return parser


def _load_lpips(spec: str):
    mod_name, _, attr = spec.partition(":")
    if not mod_name or not attr:
        raise _UsageError(f"--lpips expects module:callable, got {spec!r}")
    try:
        fn = getattr(importlib.import_module(mod_name), attr)
    except (ImportError, AttributeError) as exc:
        raise _UsageError(f"cannot load perceptual metric provider {spec!r}: {exc}") from exc
    if not callable(fn):
        raise _UsageError(f"perceptual metric provider {spec!r} is not callable")
    return fn


def cmd_train(args) -> int:
    exp = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        exp.train.seed = args.seed
        exp.data_seed = args.seed
        exp.pretrain.seed = args.seed
    manifest, backbone, result = run_experiment(
        exp, args.data_dir, args.out, manifest_path=args.manifest
    )
    print(f"manifest: {Path(args.out) / 'manifest.tsv'}")
    print(f"best checkpoint: {result.best_checkpoint}")
    print(f"last checkpoint: {result.last_checkpoint}")
    print(f"metrics log: {result.metrics_csv}")
    print(
        f"best validation: bit_acc={result.best['val_bit_acc']:.4f} "
        f"psnr={result.best['val_psnr']:.2f} dB (epoch {result.best['epoch']})"
    )
    return 0


def cmd_hide(args) -> int:
    net = load_checkpoint(args.ckpt)
    cover = load_png(args.cover)
    bits = parse_payload_spec(args.payload, net.metadata.k)
    gaze = _parse_gaze(args.gaze)
    stego = net.hide(cover, bits)
    save_png(args.out, stego)
    written = load_png(args.out)  # metrics reflect the quantized file on disk
    cover01 = denormalize(cover)
    stego01 = denormalize(written)
    print(f"stego written: {args.out}")
    print(f"PSNR vs cover: {metrics_mod.psnr(cover01, stego01):.2f} dB")
    print(
        "foveated loss vs cover: "
        f"{metrics_mod.metameric_metric(cover01, stego01, gaze, net.foveation):.6f}"
    )
    return 0


def cmd_reveal(args) -> int:
    net = load_checkpoint(args.ckpt)
    stego = load_png(args.stego)
    bits = net.reveal(stego)
    if args.out == "hex":
        print(payload_to_hex(bits))
    elif args.out.startswith("file:"):
        path = Path(args.out[len("file:"):])
        atomic_write(path, lambda tmp: tmp.write_bytes(bytes_from_bits(bits)))
        print(f"payload written: {path} ({bits.size} bits)")
    else:
        raise _UsageError(f"--out must be 'hex' or 'file:<path>', got {args.out!r}")
    return 0


def cmd_eval(args) -> int:
    lpips_fn = _load_lpips(args.lpips) if args.lpips else None
    manifest = data_mod.DatasetManifest.load(args.manifest)
    report = metrics_mod.evaluate(
        args.ckpt,
        manifest,
        split=args.split,
        n_payloads_per_image=args.payloads_per_image,
        payload_seed=args.seed,
        gaze=_parse_gaze(args.gaze),
        lpips_fn=lpips_fn,
    )
    report_dir = Path(args.report)
    report_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(report_dir / "report.json")
    report.to_csv(report_dir / "report.csv")
    agg = report.aggregates
    print(f"report written: {report_dir / 'report.json'}")
    print(
        f"images={agg['images']} bits={agg['total_bits']} "
        f"bit_acc={agg['bit_accuracy']:.6f} psnr={agg['mean_psnr']:.2f} "
        f"ssim={agg['mean_ssim']:.4f} metameric={agg['mean_metameric']:.6f}"
    )
    return 0


def cmd_metrics(args) -> int:
    a = denormalize(load_png(args.a))
    b = denormalize(load_png(args.b))
    gaze = _parse_gaze(args.gaze)
    cfg = FoveationConfig.for_resolution(a.shape[1])
    print(f"MSE:  {metrics_mod.mse(a, b):.8f}")
    print(f"PSNR: {metrics_mod.psnr(a, b):.4f} dB")
    print(f"SSIM: {metrics_mod.ssim(a, b):.6f}")
    print(f"foveated loss: {metrics_mod.metameric_metric(a, b, gaze, cfg):.8f}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "hide": cmd_hide,
    "reveal": cmd_reveal,
    "eval": cmd_eval,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (PayloadError, ValidationError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ModelMismatchError as exc:
        print(f"model mismatch: {exc}", file=sys.stderr)
        return 3
    except (StegoError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 4


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
