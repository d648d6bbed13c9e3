"""Worst-direction residual of the motion constraint over a sigma x speed grid."""
import argparse

import numpy as np

from offnet.verify import ORTHO_TOLERANCE, run_orthocheck


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sigmas", default="0.5,1,2,3,4,6,8")
    parser.add_argument("--speeds", default="0,0.25,0.5,1,1.5,2,3")
    parser.add_argument("--directions", type=int, default=8)
    args = parser.parse_args()
    sigmas = [float(s) for s in args.sigmas.split(",")]
    speeds = [float(v) for v in args.speeds.split(",")]

    rows, elapsed = run_orthocheck(sigmas, speeds, args.directions)
    grid = np.zeros((len(sigmas), len(speeds)))
    for r in rows:
        i, j = sigmas.index(r.sigma), speeds.index(r.speed)
        grid[i, j] = max(grid[i, j], r.residual)

    print("sigma \\ speed " + "".join(f"{v:>9.2f}" for v in speeds))
    for sigma, line in zip(sigmas, grid):
        cells = "".join(f"{x:>8.4f}{'*' if x >= ORTHO_TOLERANCE else ' '}" for x in line)
        print(f"{sigma:>13.2f} {cells}")
    print(f"* marks cells at or above {ORTHO_TOLERANCE}; {elapsed:.1f}s")


if __name__ == "__main__":
    main()
