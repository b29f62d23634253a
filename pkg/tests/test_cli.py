import pytest

from peakflow.cli import main

SOLITON = """
[problem]
n = 1
p = 2
q = 4
epsilon = 0.1
[domain]
lengths = 1.0
[initial]
interior = 0.5
"""

SQUARE = """
[problem]
epsilon = 0.1
[flow]
t_end = 0.6
[io]
snapshot_every = 0.3
[initial]
interior = 0.5,0.5
"""

MINIMAX = """
[problem]
epsilon = 0.1
[minimax]
k = 1
l = 0
pos_res = 3
t_horizon = 3
t_track = 3
"""


@pytest.fixture
def write(tmp_path):
    def _write(text, name="run.ini"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return _write


def test_ground_state_soliton(write, tmp_path, capsys):
    code = main(["--config", write(SOLITON), "--out", str(tmp_path / "gs"), "ground-state"])
    out = capsys.readouterr().out
    assert code == 0
    assert "beta=1.414214" in out
    assert "S0=2.309401" in out
    assert (tmp_path / "gs" / "profile.csv").exists()
    assert (tmp_path / "gs" / "config.ini").exists()


def test_missing_config_exits_1(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "nope.ini"), "ground-state"]) == 1
    assert "config not found" in capsys.readouterr().err


def test_invalid_exponents_exit_1(write, capsys):
    assert main(["--config", write("[problem]\np = 3\nq = 2\n"), "ground-state"]) == 1
    assert "q must exceed p" in capsys.readouterr().err


def test_global_flags_after_subcommand(write, tmp_path, capsys):
    code = main(["ground-state", "--config", write(SOLITON), "--out", str(tmp_path / "x")])
    assert code == 0
    assert (tmp_path / "x" / "profile.csv").exists()


def test_flow_writes_run_directory(write, tmp_path, capsys):
    out = tmp_path / "a"
    assert main(["--config", write(SQUARE), "--out", str(out), "flow"]) == 0
    text = capsys.readouterr().out
    assert "residual=" in text and "frozen=False" in text
    names = {p.name for p in out.iterdir()}
    assert {"run.csv", "config_track.csv", "final.pkfld", "meta.txt", "config.ini"} <= names
    # every default is written out, including the substituted sigma
    cfg_text = (out / "config.ini").read_text()
    assert "sigma = 0.0\n" not in cfg_text
    assert "s_bar = " in cfg_text


def test_flow_outputs_are_reproducible_and_resumable(write, tmp_path, capsys):
    cfg = write(SQUARE)
    a, b, c = (tmp_path / d for d in "abc")
    assert main(["--config", cfg, "--out", str(a), "flow"]) == 0
    assert main(["--config", cfg, "--out", str(b), "flow"]) == 0
    assert (a / "run.csv").read_bytes() == (b / "run.csv").read_bytes()
    assert (a / "final.pkfld").read_bytes() == (b / "final.pkfld").read_bytes()
    snap = a / "snap_0.300000.pkfld"
    assert main(["--config", cfg, "--out", str(c), "flow", "--snapshot", str(snap)]) == 0
    assert (c / "final.pkfld").read_bytes() == (a / "final.pkfld").read_bytes()


def test_flow_frozen_at_start(write, tmp_path, capsys):
    text = SQUARE.replace("interior = 0.5,0.5", "interior = 0.5,0.15")
    code = main(["--config", write(text), "--out", str(tmp_path / "f"), "flow", "--threshold", "100"])
    assert code == 0
    assert "frozen at t=0" in capsys.readouterr().out


def test_flow_descent_violation_exits_3(write, tmp_path, capsys):
    text = SOLITON + "[flow]\nscheme = explicit\ndt_safety = 5\nt_end = 0.5\n"
    out = tmp_path / "d"
    assert main(["--config", write(text), "--out", str(out), "flow"]) == 3
    assert "descent_violation" in capsys.readouterr().err
    assert (out / "descent_violation.pkfld").exists()


def test_flow_missing_snapshot_exits_1(write, tmp_path, capsys):
    code = main(["--config", write(SQUARE), "--out", str(tmp_path / "m"), "flow",
                 "--snapshot", str(tmp_path / "none.pkfld")])
    assert code == 1


def test_minimax_infeasible_exits_1(write, tmp_path, capsys):
    text = "[problem]\nepsilon = 0.3\n[domain]\nh_y = 0.5\n"
    assert main(["--config", write(text), "--out", str(tmp_path / "i"), "minimax"]) == 1
    assert "infeasible_G" in capsys.readouterr().err


def test_minimax_small_run(write, tmp_path, capsys):
    cfg = write(MINIMAX)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", cfg, "--out", str(a), "--jobs", "1", "minimax"]) == 0
    out = capsys.readouterr().out
    assert "S*=" in out and "certified=True" in out
    assert (a / "certificate.txt").exists() and (a / "solution.pkfld").exists()
    assert main(["--config", cfg, "--out", str(b), "--jobs", "1", "minimax"]) == 0
    assert (a / "minimax_report.csv").read_bytes() == (b / "minimax_report.csv").read_bytes()
    assert (a / "solution.pkfld").read_bytes() == (b / "solution.pkfld").read_bytes()


def test_minimax_bad_epsilon_list(write, tmp_path, capsys):
    code = main(["--config", write(MINIMAX), "--out", str(tmp_path / "t"), "minimax",
                 "--verify-theorem32", "0.1,abc"])
    assert code == 1


def test_verify_default_passes(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 7
    assert all(line.startswith("PASS") for line in lines)


def test_verify_mutation_fails_h_suite(capsys):
    assert main(["verify", "--mutate-h"]) == 5
    out = capsys.readouterr().out
    assert "FAIL h_hessian" in out
    assert "PASS descent" in out


def test_verify_large_step_fails_descent_suite(capsys):
    assert main(["verify", "--dt-safety", "2"]) == 5
    assert "FAIL descent" in capsys.readouterr().out
