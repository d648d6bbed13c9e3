"""Run the desk-scale motion experiment and print accuracies and timings.

    python3 scripts/run_experiment.py --workdir runs/desk --config configs/desk.cfg
"""
import argparse
import logging

from offnet.experiment import run_motion_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default="runs/desk")
    parser.add_argument("--config", default="configs/desk.cfg")
    parser.add_argument("--no-ablation", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    result = run_motion_experiment(args.workdir, args.config, ablation=not args.no_ablation)
    for stream, acc in sorted(result.accuracy.items()):
        print(f"{stream:<12s} {100 * acc:6.2f}%")
    for phase, sec in result.seconds.items():
        print(f"{phase:<12s} {sec:8.1f}s")
    print(f"{'main total':<12s} {result.main_seconds:8.1f}s")


if __name__ == "__main__":
    main()
