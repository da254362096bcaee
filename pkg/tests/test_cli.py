import json

import pytest

from seqdepth.cli import DEFAULTS, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main, parse_config_text
from seqdepth.errors import InvalidConfigError

GEN = ["--set", "generator.n_train=3", "--set", "generator.n_test=1", "--set", "generator.frames=8",
       "--set", "generator.height=16", "--set", "generator.width=16", "--set", "generator.n_boxes=10"]
TRAIN = ["--set", "network.width_scale=0.0625", "--set", "train.seq_len=4", "--set", "train.burn_len=4",
         "--set", "train.val_every=2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", *GEN, "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", *TRAIN, "--set", "train.max_updates=4", "--data", str(root / "data"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root


def test_dump_defaults(capsys):
    code, out = run(capsys, "--dump-defaults")
    assert code == EXIT_OK
    values = parse_config_text(out)
    assert set(values) == set(DEFAULTS)
    code, out2 = run(capsys, "train", "--dump-defaults")
    assert code == EXIT_OK and out2 == out


def test_config_parsing_errors():
    with pytest.raises(InvalidConfigError):
        parse_config_text("nonsense.key = 3")
    with pytest.raises(InvalidConfigError):
        parse_config_text("train.lr = fast")


def test_generate_is_byte_identical(tmp_path, workdir, capsys):
    assert main(["generate", *GEN, "--out", str(tmp_path / "again")]) == EXIT_OK
    a, b = workdir / "data", tmp_path / "again"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    manifest = json.loads((a / "manifest.json").read_text())
    assert [e["split"] for e in manifest["episodes"]].count("test") == 1


def test_train_outputs(workdir):
    run_dir = workdir / "run"
    assert (run_dir / "checkpoint.sqd").is_file()
    lines = (run_dir / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,val_loss,wall_ms" and len(lines) == 5
    echo = (run_dir / "config.txt").read_text()
    assert "train.seq_len = 4" in echo and "network.width_scale = 0.0625" in echo


def test_resume_continues(workdir, tmp_path, capsys):
    code, out = run(capsys, "train", "--resume", workdir / "run" / "checkpoint.sqd",
                    "--set", "train.max_updates=6", "--out", tmp_path)
    assert code == EXIT_OK and json.loads(out)["step"] == 6
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert [int(line.split(",")[0]) for line in lines[1:]] == [1, 2, 3, 4, 5, 6]


def test_eval_with_ablation(workdir, tmp_path, capsys):
    code, out = run(capsys, "eval", "--checkpoint", workdir / "run" / "checkpoint.sqd",
                    "--ablate-recurrence", "--out", tmp_path)
    assert code == EXIT_OK
    res = json.loads(out)
    assert set(res) == {"recurrent", "ablated"}
    rep = json.loads((tmp_path / "metrics_ablated.json").read_text())
    assert rep["ablate_recurrence"] is True
    assert (tmp_path / "metrics.csv").is_file()


def test_simulate_oracle(tmp_path, capsys):
    code, out = run(capsys, "simulate", "--oracle", "--trials", 2, "--seed", 5, "--out", tmp_path)
    assert code == EXIT_OK
    assert json.loads(out) == {"finishes": 2, "crashes": 0, "timeouts": 0}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["seed"] == 5 and summary["config"]["sim.trials"] == 2
    assert (tmp_path / "trajectory_01.csv").is_file()


def test_simulate_checkpoint(workdir, tmp_path, capsys):
    code, out = run(capsys, "simulate", "--checkpoint", workdir / "run" / "checkpoint.sqd",
                    "--trials", 1, "--out", tmp_path)
    assert code == EXIT_OK
    assert sum(json.loads(out).values()) == 1


def test_gradcheck_pass_and_fault(tmp_path, capsys):
    assert main(["gradcheck", "--set", "gradcheck.network=false", "--out", str(tmp_path)]) == EXIT_OK
    rows = json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(r["passed"] for r in rows)
    code = main(["gradcheck", "--set", "gradcheck.network=false", "--inject-fault", "conv2d"])
    assert code == EXIT_NUMERIC
    assert "conv2d" in capsys.readouterr().err


@pytest.mark.parametrize("argv, code", [
    (["simulate", "--out", "x"], EXIT_CONFIG),
    (["simulate", "--oracle", "--set", "sim.stop_threshold=255", "--trials", "1", "--out", "{tmp}"], EXIT_CONFIG),
    (["train", "--set", "bogus=1", "--out", "x"], EXIT_CONFIG),
    (["train", "--data", "{tmp}/missing", "--out", "{tmp}/o"], EXIT_IO),
    (["eval", "--checkpoint", "{tmp}/none.sqd", "--out", "{tmp}/o"], EXIT_IO),
    ([], EXIT_CONFIG),
])
def test_exit_codes(argv, code, tmp_path, capsys):
    argv = [a.replace("{tmp}", str(tmp_path)) for a in argv]
    assert main(argv) == code


def test_corrupt_checkpoint_exit_code(tmp_path):
    bad = tmp_path / "bad.sqd"
    bad.write_bytes(b"not a checkpoint at all")
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_config_file_and_seed(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nsim.trials = 1\n")
    code, out = run(capsys, "simulate", "--oracle", "--config", cfg, "--seed", 9, "--out", tmp_path / "o")
    assert code == EXIT_OK
    echo = (tmp_path / "o" / "config.txt").read_text()
    assert "sim.trials = 1" in echo and "train.seed = 9" in echo and "generator.seed = 9" in echo
