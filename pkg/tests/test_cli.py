import csv
import io

import pytest

from offnet.cli import main

TINY_CFG = """
levels = 2
reduced_channels = 2
blocks_per_level = 1
backbone_channels = 4,4
trunk_channels = 4
total_iters = 5
lr_milestones = 3
batch_size = 4
alpha = 2
beta = 3
"""


def gen(out, n=1, seed=0, *extra):
    return main(["gen-data", "--out", str(out), "--clips-per-class", str(n), "--frames", "6",
                 "--size", "16", "--seed", str(seed), "--speed", "1", "--sigma", "1.5", *extra])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert gen(root / "data", n=1) == 0
    (root / "run.cfg").write_text(TINY_CFG + f"train_data = {root / 'data'}\n")
    (root / "ablated.cfg").write_text(TINY_CFG + "ablate_off_layer = true\n")
    assert main(["train", "--config", str(root / "run.cfg"), "--stage", "1", "--out", str(root / "s1")]) == 0
    assert main(["train", "--config", str(root / "run.cfg"), "--stage", "2", "--init", str(root / "s1"),
                 "--out", str(root / "s2")]) == 0
    assert main(["train", "--config", str(root / "ablated.cfg"), "--stage", "2", "--init", str(root / "s1"),
                 "--data", str(root / "data"), "--out", str(root / "hyp")]) == 0
    return root


def test_gen_data_counts(tmp_path, capsys):
    assert gen(tmp_path / "d", n=4) == 0
    assert "32 clips" in capsys.readouterr().out
    lines = (tmp_path / "d" / "manifest.txt").read_text().splitlines()
    assert len(lines) - 2 == 8 * 4
    assert len(list((tmp_path / "d").glob("*.f32"))) == 32


def test_gen_data_is_byte_reproducible(tmp_path):
    gen(tmp_path / "a", 2, 7)
    gen(tmp_path / "b", 2, 7)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_data_refuses_non_empty_dir(tmp_path, capsys):
    gen(tmp_path / "d")
    assert gen(tmp_path / "d") == 2
    assert "--force" in capsys.readouterr().err
    assert gen(tmp_path / "d", 1, 0, "--force") == 0


def test_train_writes_one_metrics_row_per_iteration(workspace):
    for stage in ("s1", "s2"):
        with open(workspace / stage / "metrics.csv", newline="") as fh:
            assert len(list(csv.DictReader(fh))) == 5


def test_train_stage2_without_init(workspace, capsys):
    code = main(["train", "--config", str(workspace / "run.cfg"), "--stage", "2", "--out", str(workspace / "x")])
    assert code == 2
    assert "--init" in capsys.readouterr().err


def test_train_rejects_unknown_key(tmp_path, workspace, capsys):
    (tmp_path / "bad.cfg").write_text("levels = 2\nwarmup_iters = 10\n")
    code = main(["train", "--config", str(tmp_path / "bad.cfg"), "--stage", "1", "--out", str(tmp_path / "o"),
                 "--data", str(workspace / "data")])
    assert code == 2
    assert "warmup_iters" in capsys.readouterr().err


def test_eval_reports_levels_and_writes_csv(workspace, capsys):
    out = workspace / "eval.csv"
    assert main(["eval", "--ckpt", str(workspace / "s2"), "--data", str(workspace / "data"),
                 "--beta", "3", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    for stream in ("rgb", "off_l0", "off_l1", "off", "fused"):
        assert f"\t{stream}" in printed
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["stream"] for r in rows} == {"rgb", "off_l0", "off_l1", "off", "fused"}
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)


def test_eval_hypercolumn_needs_the_ablated_network(workspace, capsys):
    data = str(workspace / "data")
    assert main(["eval", "--ckpt", str(workspace / "hyp"), "--data", data, "--beta", "3",
                 "--streams", "hypercolumn"]) == 0
    assert "hypercolumn" in capsys.readouterr().out
    assert main(["eval", "--ckpt", str(workspace / "s2"), "--data", data, "--beta", "3",
                 "--streams", "hypercolumn"]) == 2


def test_eval_several_checkpoints(workspace, capsys):
    assert main(["eval", "--ckpt", str(workspace / "s2"), "--ckpt", str(workspace / "hyp"),
                 "--data", str(workspace / "data"), "--beta", "3",
                 "--streams", "rgb,off,fused,hypercolumn"]) == 0
    out = capsys.readouterr().out
    assert "hyp\thypercolumn" in out and "s2\tfused" in out


def test_eval_unknown_stream(workspace):
    assert main(["eval", "--ckpt", str(workspace / "s2"), "--data", str(workspace / "data"),
                 "--streams", "flow"]) == 2


def test_orthocheck_documented_cell(capsys):
    assert main(["orthocheck", "--sigma", "4", "--speed", "0,1", "--directions", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    zero = next(l for l in lines if l.split()[:2] == ["4.00", "0.00"])
    assert float(zero.split()[3]) == 0.0
    one = next(l for l in lines if l.split()[:2] == ["4.00", "1.00"])
    assert float(one.split()[3]) < 0.05


def test_orthocheck_fails_on_aliased_blobs(capsys):
    assert main(["orthocheck", "--sigma", "0.5", "--speed", "2", "--directions", "2"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_bench_report(workspace, tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--ckpt", str(workspace / "s2"), "--frames", "4", "--size", "16",
                 "--repeat", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert list(rows[0]) == ["config", "fps_backbone", "fps_off", "ratio"]
    assert 0.0 < float(rows[0]["ratio"]) <= 1.0
    assert float(rows[0]["fps_backbone"]) > 0


def test_bench_rejects_zero_repeats(capsys):
    assert main(["bench", "--repeat", "0"]) == 2
    assert "repeat" in capsys.readouterr().err
