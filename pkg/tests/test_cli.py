import numpy as np
import pytest

from selfy import cli
from selfy.tensor import load_vten

TINY = [
    "--set", "data.train_count=6",
    "--set", "data.test_count=4",
    "--set", "train.epochs=2",
    "--set", "train.batch=3",
    "--set", "net.stages=4:1 4:2 8:2",
    "--set", "selfy.head_channels=2 2 2 4",
    "--set", "selfy.integration_layers=1",
    "--set", "eval.severities=1 6",
]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_config_lists_keys(capsys):
    code, out, _ = run(capsys, "config")
    assert code == 0 and "window.offsets = -2..2" in out


def test_unknown_command_and_bad_flags_exit_2(capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "train", "--threads", "0")[0] == 2
    code, _, err = run(capsys, "train", "--set", "window.zz=1")
    assert code == 2 and "unknown key" in err
    assert run(capsys, "train", "--set", "nokey")[0] == 2
    assert run(capsys, "sweep", "--set", "train.lr=oops,1")[0] == 2


def test_gradcheck_subset_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "relu", "--op", "softmax")
    assert code == 0
    assert "4/4 passed" in out


def test_gradcheck_unknown_op(capsys):
    assert run(capsys, "gradcheck", "--op", "nope")[0] == 2


def test_gradcheck_injected_bug_fails(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "relu", "--inject-bug")
    assert code == 1 and "broken_relu" in out and "FAIL" in out


def test_bench_csv(capsys):
    code, out, _ = run(capsys, "bench", "--set", "bench.shape=2 5 5 3", "--set", "bench.repeats=1", "--threads", "2")
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 4 and lines[0].startswith("variant,")
    assert len({l.split(",")[-1] for l in lines[1:]}) == 1
    assert int(lines[1].split(",")[10]) == 2 * 5 * 5 * 5 * 9 * 9 * 3


def test_train_then_eval_reproduces_accuracy(capsys, tmp_path):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", *TINY, "--out", str(out_dir), "--threads", "1", "--seed", "5")
    assert code == 0
    for name in ("checkpoint.vten", "checkpoint.vten.manifest", "metrics.csv", "config.txt"):
        assert (out_dir / name).exists()
    final = float((out_dir / "metrics.csv").read_text().splitlines()[-1].split(",")[-1])
    code, out, _ = run(capsys, "eval", *TINY, "--out", str(out_dir), "--threads", "1", "--seed", "5", "--robustness")
    assert code == 0
    assert float(out.splitlines()[0].split()[-1]) == final
    rows = (out_dir / "robustness.csv").read_text().splitlines()
    assert rows[0] == "kind,severity,top1" and len(rows) == 7
    assert float(rows[1].split(",")[2]) == final


def test_train_from_config_file(capsys, tmp_path):
    cfg = tmp_path / "exp.cfg"
    pairs = [TINY[i + 1] for i in range(0, len(TINY), 2)]
    cfg.write_text("\n".join(p.replace("=", " = ", 1) for p in pairs) + "\nwindow.offsets = 1\n")
    code, _, _ = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "r"))
    assert code == 0
    assert "window.offsets = 1\n" in (tmp_path / "r" / "config.txt").read_text()


def test_eval_missing_checkpoint_exits_1(capsys, tmp_path):
    code, _, err = run(capsys, "eval", *TINY, "--out", str(tmp_path / "none"))
    assert code == 1 and "not found" in err


def test_dump_stss_rank_six(capsys, tmp_path):
    code, out, _ = run(capsys, "dump-stss", *TINY, "--out", str(tmp_path), "--index", "3")
    assert code == 0
    s = load_vten(tmp_path / "stss_00003.vten")
    assert s.ndim == 6 and s.shape == (8, 8, 8, 5, 9, 9)
    header = (tmp_path / "stss_00003.txt").read_text()
    assert "axes = T X Y L U V" in header and "temporal_offsets = -2 -1 0 1 2" in header
    np.testing.assert_allclose(s[:, :, :, 2, 4, 4][s[:, :, :, 2, 4, 4] != 0], 1.0, atol=1e-5)


def test_generate_exports_split(capsys, tmp_path):
    code, _, _ = run(capsys, "generate", *TINY, "--split", "test", "--out", str(tmp_path))
    assert code == 0
    assert len(list((tmp_path / "test").glob("clip_*.vten"))) == 4
    assert (tmp_path / "test" / "labels.csv").read_text().startswith("index,label\n")


def test_sweep_runs_every_combination(capsys, tmp_path):
    code, out, _ = run(capsys, "sweep", *TINY[:-2], "--set", "train.epochs=1", "--set", "window.offsets=-1..1, 1", "--out", str(tmp_path))
    assert code == 0
    summary = (tmp_path / "sweep.csv").read_text().splitlines()
    assert summary[0] == "run,setting,final_test_acc" and len(summary) == 3
    assert "window.offsets=1" in summary[2]
    assert (tmp_path / "run001" / "metrics.csv").exists()


@pytest.mark.parametrize("cmd", ["gradcheck", "bench", "train", "eval", "dump-stss", "generate", "sweep", "config"])
def test_help_exits_cleanly(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([cmd, "--help"])
    assert e.value.code == 0
