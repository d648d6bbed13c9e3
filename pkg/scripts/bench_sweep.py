"""OFF overhead as the reduced channel count grows, at fixed backbone width."""
import argparse
import csv
import sys

from offnet.bench import BENCH_COLUMNS, run_bench
from offnet.network import OffConfig, init_params


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reduced", default="4,8,16,32")
    parser.add_argument("--frames", type=int, default=16)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    writer = csv.writer(sys.stdout)
    writer.writerow(BENCH_COLUMNS)
    for c_r in (int(c) for c in args.reduced.split(",")):
        config = OffConfig(reduced_channels=c_r, blocks_per_level=1)
        result = run_bench(init_params(config, 0), config, args.frames, args.size, args.repeat)
        writer.writerow(result.row())


if __name__ == "__main__":
    main()
