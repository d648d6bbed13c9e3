"""``offnet`` command line: data generation, training, evaluation, checks and benchmark."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import __version__
from .bench import BENCH_COLUMNS, run_bench
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_dataclass, dataclass_items
from .data import gaussian_blob, gen_direction_dataset, read_dataset, write_dataset
from .errors import ConfigurationError, InvalidArgumentError, OffNetError
from .network import OffConfig, init_params
from .train import stage1_train, stage2_train, evaluate
from .verify import GRAD_TOLERANCE, ORTHO_TOLERANCE, run_gradcheck, run_orthocheck

log = logging.getLogger("offnet")

DEFAULT_SPEED = 0.5
DEFAULT_SIGMA = 3.0


def _csv_list(kind):
    def parse(text: str):
        return [kind(tok) for tok in text.split(",") if tok.strip()]

    return parse


def cmd_gen_data(args) -> int:
    clips = gen_direction_dataset(
        args.clips_per_class, args.frames, args.size, args.speed, args.seed, pattern=gaussian_blob(args.sigma)
    )
    out = write_dataset(args.out, clips, force=args.force)
    print(f"wrote {len(clips)} clips to {out}")
    return 0


def cmd_train(args) -> int:
    if args.stage == 2 and not args.init:
        raise InvalidArgumentError("--stage 2 needs --init pointing at a stage-1 checkpoint")
    run = RunConfig.load(args.config)
    data_dir = args.data or run.train_data
    if not data_dir:
        raise ConfigurationError("no training data: set train_data in the config or pass --data")
    train_config = build_dataclass(type(run.train), {**dataclass_items(run.train), "stage": str(args.stage)})
    dataset = read_dataset(data_dir)
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out / "metrics.csv"
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == 1:
        init = load_checkpoint(args.init) if args.init else None
        ckpt = stage1_train(dataset, run.off, train_config, init.tensors() if init else None, metrics)
    else:
        ckpt = stage2_train(load_checkpoint(args.init), dataset, run.off, train_config, metrics)
    save_checkpoint(ckpt.params, out, ckpt.config, ckpt.iteration)
    print(f"stage {args.stage} checkpoint written to {out} (metrics: {metrics})")
    return 0


def _applicable(requested, off_config: OffConfig, names) -> list[str]:
    has_rgb = any(n.startswith("rgb.") for n in names)
    has_off = any(n.startswith("off.") for n in names)
    keep = []
    for stream in requested:
        if stream == "rgb" and has_rgb:
            keep.append(stream)
        elif stream == "off" and has_off and not off_config.ablate_off_layer:
            keep.append(stream)
        elif stream == "fused" and has_rgb and has_off and not off_config.ablate_off_layer:
            keep.append(stream)
        elif stream == "hypercolumn" and has_off and off_config.ablate_off_layer:
            keep.append(stream)
    return keep


def cmd_eval(args) -> int:
    dataset = read_dataset(args.data)
    rows = []
    for path in args.ckpt:
        ckpt = load_checkpoint(path)
        off_config = build_dataclass(OffConfig, ckpt.config)
        streams = _applicable(args.streams, off_config, ckpt.params)
        if not streams:
            raise InvalidArgumentError(f"{path}: none of the streams {args.streams} can be evaluated")
        report = evaluate(ckpt.tensors(False), off_config, dataset, beta=args.beta, streams=streams)
        for stream, accuracy in report.items():
            rows.append((str(path), stream, accuracy))
            print(f"{path}\t{stream:<12s}\t{100 * accuracy:6.2f}%")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["ckpt", "stream", "accuracy"])
            for path, stream, accuracy in rows:
                writer.writerow([path, stream, repr(accuracy)])
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed)
    failed = 0
    print(f"{'check':<44s} {'max_rel_err':>12s} {'checked':>8s} {'skipped':>8s}  status")
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:<44s} {r.max_rel_error:12.3e} {r.n_checked:8d} {r.n_skipped:8d}  {status}")
    worst = max(results, key=lambda r: r.max_rel_error)
    print(f"worst: {worst.name} {worst.max_rel_error:.3e} (tolerance {GRAD_TOLERANCE:g}); {failed} failing")
    return 1 if failed else 0


def cmd_orthocheck(args) -> int:
    rows, elapsed = run_orthocheck(args.sigma, args.speed, args.directions)
    print(f"{'sigma':>6s} {'speed':>6s} {'angle':>7s} {'residual':>10s}")
    failed = 0
    for r in rows:
        failed += not r.passed
        mark = "" if r.passed else "  FAIL"
        print(f"{r.sigma:6.2f} {r.speed:6.2f} {r.angle:7.1f} {r.residual:10.5f}{mark}")
    print(f"{len(rows)} cells, {failed} at or above {ORTHO_TOLERANCE:g}, {elapsed:.2f}s")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    if args.repeat < 1:
        raise InvalidArgumentError(f"--repeat must be at least 1, got {args.repeat}")
    targets = args.ckpt or [None]
    rows = []
    for path in targets:
        if path is None:
            off_config = OffConfig()
            params = init_params(off_config, args.seed)
        else:
            ckpt = load_checkpoint(path)
            off_config = build_dataclass(OffConfig, ckpt.config)
            params = ckpt.tensors(False)
        rows.append(run_bench(params, off_config, args.frames, args.size, args.repeat, args.seed))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(BENCH_COLUMNS)
        for r in rows:
            writer.writerow(r.row())
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offnet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic 8-direction dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips-per-class", type=int, required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speed", type=float, default=DEFAULT_SPEED, help="pixels per frame")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help="blob standard deviation")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    p.add_argument("--data", help="overrides train_data from the config")
    p.add_argument("--metrics", help="metrics CSV (default: <out>/metrics.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy per stream")
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--streams", type=_csv_list(str), default=["rgb", "off", "fused"])
    p.add_argument("--beta", type=int, default=5)
    p.add_argument("--out", help="CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare every backward rule against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("orthocheck", help="residual of the motion constraint on translating blobs")
    p.add_argument("--sigma", type=_csv_list(float), default=[3.0, 4.0, 6.0])
    p.add_argument("--speed", type=_csv_list(float), default=[0.0, 0.5, 1.0, 1.5, 2.0])
    p.add_argument("--directions", type=int, default=8)
    p.set_defaults(func=cmd_orthocheck)

    p = sub.add_parser("bench", help="forward frames per second with and without OFF")
    p.add_argument("--ckpt", action="append")
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV report (default: stdout)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "eval" and set(args.streams) - {"rgb", "off", "fused", "hypercolumn"}:
        print(f"offnet: error: unknown stream in {args.streams}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (OffNetError, FileNotFoundError) as exc:
        print(f"offnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
