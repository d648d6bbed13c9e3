"""The desk-scale motion experiment, driven through the command line.

Generates the train/test sets, trains both stages, trains an ablated OFF
sub-network on the same stage-1 backbone and evaluates every stream.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

from .cli import main as cli_main
from .config import RunConfig

TRAIN_CLIPS_PER_CLASS = 64
TEST_CLIPS_PER_CLASS = 16
FRAMES = 16
SIZE = 32
TRAIN_SEED = 1
TEST_SEED = 2


@dataclass
class ExperimentResult:
    accuracy: dict[str, float] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    workdir: Path | None = None

    @property
    def main_seconds(self) -> float:
        """Data, both stages and the evaluation of the full network."""
        return sum(v for k, v in self.seconds.items() if k != "ablation")


def _run(*argv: str) -> None:
    code = cli_main(list(argv))
    if code != 0:
        raise RuntimeError(f"offnet {' '.join(argv)} exited with {code}")


def _read_eval(path: Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["stream"]: float(row["accuracy"]) for row in csv.DictReader(fh)}


def run_motion_experiment(workdir: str | Path, config: str | Path, ablation: bool = True) -> ExperimentResult:
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    train_dir, test_dir = work / "train", work / "test"
    result = ExperimentResult(workdir=work)

    t = time.perf_counter()
    _run("gen-data", "--out", str(train_dir), "--clips-per-class", str(TRAIN_CLIPS_PER_CLASS),
         "--frames", str(FRAMES), "--size", str(SIZE), "--seed", str(TRAIN_SEED), "--force")
    _run("gen-data", "--out", str(test_dir), "--clips-per-class", str(TEST_CLIPS_PER_CLASS),
         "--frames", str(FRAMES), "--size", str(SIZE), "--seed", str(TEST_SEED), "--force")
    result.seconds["data"] = time.perf_counter() - t

    t = time.perf_counter()
    _run("train", "--config", str(config), "--stage", "1", "--data", str(train_dir), "--out", str(work / "stage1"))
    result.seconds["stage1"] = time.perf_counter() - t

    t = time.perf_counter()
    _run("train", "--config", str(config), "--stage", "2", "--data", str(train_dir),
         "--init", str(work / "stage1"), "--out", str(work / "stage2"))
    result.seconds["stage2"] = time.perf_counter() - t

    t = time.perf_counter()
    _run("eval", "--ckpt", str(work / "stage2"), "--data", str(test_dir),
         "--streams", "rgb,off,fused", "--out", str(work / "eval.csv"))
    result.accuracy.update(_read_eval(work / "eval.csv"))
    result.seconds["eval"] = time.perf_counter() - t

    if ablation:
        t = time.perf_counter()
        run = RunConfig.load(config)
        items = run.items()
        items["ablate_off_layer"] = "true"
        ablated = RunConfig.from_items(items)
        ablated_cfg = work / "ablated.cfg"
        ablated.dump(ablated_cfg)
        _run("train", "--config", str(ablated_cfg), "--stage", "2", "--data", str(train_dir),
             "--init", str(work / "stage1"), "--out", str(work / "hypercolumn"))
        _run("eval", "--ckpt", str(work / "hypercolumn"), "--data", str(test_dir),
             "--streams", "hypercolumn", "--out", str(work / "eval_hypercolumn.csv"))
        result.accuracy["hypercolumn"] = _read_eval(work / "eval_hypercolumn.csv")["hypercolumn"]
        result.seconds["ablation"] = time.perf_counter() - t
    return result
