"""Command-line interface: synth, downsample, train, upsample, eval, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import secrets
import sys
from pathlib import Path

from . import gradcheck as gradcheck_mod
from . import inference, metrics
from .geometry import nonuniform_downsample
from .io import read_ply, read_xyzn, write_key_values, write_xyzn
from .network import load_checkpoint, save_checkpoint
from .synth import SHAPES, sample_shape
from .trainer import load_train_config, train


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    seed = secrets.randbelow(2**31)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _read_cloud(path: str):
    if Path(path).suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyzn(path)


def _cmd_synth(args) -> int:
    cloud = sample_shape(args.shape, args.n, _resolve_seed(args.seed))
    write_xyzn(cloud, args.out)
    return 0


def _cmd_downsample(args) -> int:
    cloud = _read_cloud(args.input)
    if args.m > len(cloud):
        print(f"error: m={args.m} exceeds cloud size {len(cloud)}", file=sys.stderr)
        return 1
    write_xyzn(nonuniform_downsample(cloud, args.m, _resolve_seed(args.seed)), args.output)
    return 0


def _cmd_train(args) -> int:
    config = load_train_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, rng_seed=args.seed)
    if args.k is not None:
        config = dataclasses.replace(config, k=args.k)
    if args.up_ratio is not None:
        config = dataclasses.replace(config, up_ratio=args.up_ratio)
    files = sorted(Path(args.data_dir).glob("*.xyzn"))
    if not files:
        print(f"error: no .xyzn files in {args.data_dir}", file=sys.stderr)
        return 1
    dataset = [read_xyzn(f) for f in files]
    state, history = train(
        dataset, config, checkpoint_path=args.out, history_path=args.history
    )
    save_checkpoint(args.out, state.params)
    if history:
        print(f"trained {len(history)} epochs, final loss {history[-1].total:.6g}")
    return 0


def _cmd_upsample(args) -> int:
    cloud = _read_cloud(args.input)
    params = load_checkpoint(args.checkpoint)
    config = params.config
    if args.patch_size is not None:
        config = dataclasses.replace(config, patch_size=args.patch_size)
    result = inference.upsample_cloud(cloud, params, config)
    write_xyzn(result, args.out)
    return 0


def _cmd_eval(args) -> int:
    pred = _read_cloud(args.pred)
    gt = _read_cloud(args.gt)
    mean_angle, _ = metrics.normal_angle_error(pred, gt)
    report = {
        "cd": metrics.cd_metric(pred, gt),
        "hd": metrics.hd_metric(pred, gt),
        "normal_angle_deg": mean_angle,
    }
    if args.report:
        write_key_values(args.report, report)
    else:
        for key, value in report.items():
            print(f"{key}={value:.9g}")
    if args.deviation:
        metrics.deviation_export(pred, gt, args.deviation)
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_gradcheck(seed=_resolve_seed(args.seed))
    for result in results:
        print(result.line())
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcup",
        description="Point cloud upsampling with normal estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample an analytic shape with exact normals")
    p.add_argument("shape", choices=sorted(SHAPES))
    p.add_argument("n", type=int, help="number of points")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("downsample", help="non-uniform downsample of a cloud")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--m", type=int, required=True, help="points to keep")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_downsample)

    p = sub.add_parser("train", help="train the upsampling network")
    p.add_argument("--config", required=True, help="key=value training config file")
    p.add_argument("--data-dir", required=True, help="directory of .xyzn patches")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", default=None, help="per-epoch loss CSV path")
    p.add_argument("--seed", type=int, default=None, help="override rng_seed")
    p.add_argument("--k", type=int, default=None, help="override neighbor count")
    p.add_argument("--up-ratio", type=int, default=None, help="override upsampling ratio")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("upsample", help="patch-based upsampling of a cloud")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=None)
    p.set_defaults(fn=_cmd_upsample)

    p = sub.add_parser("eval", help="compare a prediction against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--report", default=None, help="key=value report path (default stdout)")
    p.add_argument("--deviation", default=None, help="XYZN+deviation export path")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
