import json
import subprocess
import sys

import numpy as np
import pytest

from hessolve import cli, models, solver


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_solve_retrial_json(capsys):
    code, out, _ = run_cli(capsys, "solve", "--model", "mms-retrial", "--lambda", "1", "--mu", "1",
                           "--s", "2", "--eta", "1", "--epsilon", "1e-8")
    assert code == 0
    doc = json.loads(out)
    assert doc["converged"] is True
    assert doc["dims"] == [3] * (doc["stop_level"] + 1)
    assert len(doc["tv_history"]) == len(doc["checkpoints"]) - 1


def test_json_round_trip(capsys):
    code, out, _ = run_cli(capsys, "solve", "--model", "bmap")
    assert code == 0
    doc = json.loads(out)
    from hessolve import bounds

    spec = models.BMAPSpec.poisson(2.0, 1.0)
    res = solver.run(models.bmap_generator(spec), bounds.bmap_certificate(spec))
    assert solver.tv_distance(cli.level_vector_from_json(doc), res.pi_hat) == 0.0
    assert doc["r_history"] == res.r_history


def test_output_deterministic(capsys, tmp_path):
    outs = []
    for _ in range(2):
        for fmt in ("json", "csv", "human"):
            code, out, _ = run_cli(capsys, "solve", "--model", "counterexample", "--out", fmt)
            assert code == 0
            outs.append(out)
    assert outs[:3] == outs[3:]


def test_threads_flag_same_output(capsys):
    a = run_cli(capsys, "solve", "--model", "mms-retrial", "--schedule", "arithmetic:50")[1]
    b = run_cli(capsys, "solve", "--model", "mms-retrial", "--schedule", "arithmetic:50",
                "--threads", "4")[1]
    assert a == b


def test_csv_layout(capsys):
    code, out, _ = run_cli(capsys, "solve", "--model", "mm1", "--out", "csv")
    lines = out.splitlines()
    header = [l for l in lines if l.startswith("#")]
    assert any(l.startswith("# converged: true") for l in header)
    body = lines[len(header):]
    assert body[0] == "level,phase,probability"
    rows = [r.split(",") for r in body[1:]]
    assert rows[0][:2] == ["0", "0"]
    assert abs(sum(float(r[2]) for r in rows) - 1.0) < 1e-12


def test_human_layout(capsys):
    code, out, _ = run_cli(capsys, "solve", "--model", "mms-retrial", "--out", "human")
    assert code == 0
    assert "level  marginal" in out
    assert "full vectors, levels 0..9:" in out


def test_epsilon_out_of_range(capsys):
    code, _, err = run_cli(capsys, "solve", "--epsilon", "2.0")
    assert code == 1
    assert "epsilon must lie in (0,1)" in err


def test_unstable_file_hits_cap(capsys, tmp_path):
    path = tmp_path / "unstable.qbh"
    text = models.retrial_model_text(models.RetrialSpec(3.0, 1.0, 2, 1.0))
    text += "certificate:\n  kind: affine\n  a: 1\n  slope: 1\n  b: 2\n  C_levels: 0\n"
    path.write_text(text)
    code, out, err = run_cli(capsys, "solve", "--model", f"file:{path}", "--cap", "500")
    assert code == 3
    doc = json.loads(out)
    assert doc["converged"] is False and doc["stop_level"] == 500
    assert "not converged" in err and "warning" in err


def test_file_model_without_certificate(capsys, tmp_path):
    path = tmp_path / "mm1.qbh"
    path.write_text(models.mm1_model_text(1.0, 2.0))
    code, _, err = run_cli(capsys, "solve", "--model", f"file:{path}")
    assert code == 1 and "no drift certificate" in err
    cert = tmp_path / "cert.txt"
    cert.write_text("kind: affine\na: 1\nslope: 1\nb: 2\nC_levels: 0\n")
    code, out, _ = run_cli(capsys, "solve", "--model", f"file:{path}", "--cert", str(cert))
    assert code == 0 and json.loads(out)["converged"]


def test_parse_error_exit(capsys, tmp_path):
    path = tmp_path / "bad.qbh"
    path.write_text("levels: 1\ndim: 1\nblock 0 0: -1, zz\n")
    code, _, err = run_cli(capsys, "solve", "--model", f"file:{path}")
    assert code == 1 and "line 3" in err
    code, _, _ = run_cli(capsys, "solve", "--model", "nonsense")
    assert code == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["solve", "--threads", "many"])
    assert info.value.code == 1


def test_numerical_breakdown_exit(capsys, monkeypatch):
    from hessolve.errors import NumericalBreakdown

    def boom(*a, **k):
        raise NumericalBreakdown("forced", 3)

    monkeypatch.setattr(solver, "run", boom)
    code, _, err = run_cli(capsys, "solve", "--model", "mm1")
    assert code == 2 and "numerical breakdown" in err


def test_compare_mm1(capsys):
    code, out, _ = run_cli(capsys, "compare", "--model", "mm1", "--n", "10")
    assert code == 0
    tvs = [float(l.split()[2]) for l in out.splitlines()[2:-1]]
    assert len(tvs) == 10 and max(tvs) < 1e-12


def test_compare_counterexample_fixed_phase(capsys):
    code, out, _ = run_cli(capsys, "compare", "--model", "counterexample", "--n", "10",
                           "--fixed-phase", "1")
    assert code == 0
    assert out.strip().endswith("ok (tolerance 1e-09)")


def test_compare_scale_guard(capsys):
    code, _, err = run_cli(capsys, "compare", "--n", "100")
    assert code == 1 and "oracle scale guard" in err


def test_compare_random_seed(capsys, monkeypatch):
    monkeypatch.setenv("HESSOLVE_SEED", "17")
    code, out, _ = run_cli(capsys, "compare", "--model", "random", "--n", "12")
    assert code == 0 and '"seed": 17' in out
    monkeypatch.setenv("HESSOLVE_SEED", "x")
    assert run_cli(capsys, "compare", "--model", "random", "--n", "3")[0] == 1


def test_drift_check_builtin(capsys):
    assert run_cli(capsys, "drift-check", "--model", "mms-retrial", "--n-max", "100")[0] == 0
    assert run_cli(capsys, "drift-check", "--model", "bmap", "--n-max", "200")[0] == 0


def test_drift_check_violation(capsys, tmp_path):
    model = tmp_path / "mm1.qbh"
    model.write_text(models.mm1_model_text(1.0, 2.0))
    cert = tmp_path / "cert.txt"
    cert.write_text("certificate:\n  kind: affine\n  a: 1\n  slope: 1\n  b: 0.5\n  C_levels: 0\n")
    code, out, _ = run_cli(capsys, "drift-check", "--model", f"file:{model}", "--cert", str(cert),
                           "--n-max", "50")
    assert code == 4
    assert "level 0 phase 0: slack 1.5" in out


def test_validate(capsys, tmp_path):
    assert run_cli(capsys, "validate", "--model", "counterexample")[0] == 0
    path = tmp_path / "leaky.qbh"
    path.write_text("levels: 2\ndim: 1\nblock 0 0: -1\nblock 0 1: 1\nblock 1 0: 2\n"
                    "block 1 1: -3\nblock 1 2: 0.5\nrepeat_from: 1\n")
    code, _, err = run_cli(capsys, "validate", "--model", f"file:{path}")
    assert code == 1 and "row sum" in err


def test_model_emit_round_trip(capsys, tmp_path):
    for name in ("mm1", "bmap", "mms-retrial", "counterexample"):
        path = tmp_path / f"{name}.qbh"
        assert run_cli(capsys, "model", name, "-o", str(path))[0] == 0
        code, out, _ = run_cli(capsys, "solve", "--model", f"file:{path}")
        code2, out2, _ = run_cli(capsys, "solve", "--model", name)
        assert code == code2 == 0
        a, b = json.loads(out), json.loads(out2)
        assert solver.tv_distance(cli.level_vector_from_json(a), cli.level_vector_from_json(b)) < 1e-12


def test_bound_flags(capsys):
    code, out, _ = run_cli(capsys, "solve", "--model", "mm1", "--beta", "1", "--phibar", "0.1")
    doc = json.loads(out)
    assert code == 0 and doc["bound"] is not None and doc["bound"] >= 2 * doc["r_history"][-1]
    assert run_cli(capsys, "solve", "--model", "mm1", "--beta", "1")[0] == 1


def test_save_and_resume(capsys, tmp_path):
    state = tmp_path / "state.npz"
    code, _, _ = run_cli(capsys, "solve", "--model", "mms-retrial", "--cap", "20",
                         "--epsilon", "1e-12", "--save-state", str(state))
    assert code == 3
    code, out, _ = run_cli(capsys, "solve", "--model", "mms-retrial", "--epsilon", "1e-12",
                           "--resume", str(state))
    full = json.loads(run_cli(capsys, "solve", "--model", "mms-retrial", "--epsilon", "1e-12")[1])
    resumed = json.loads(out)
    assert code == 0 and resumed["pi_hat"] == full["pi_hat"]


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "hessolve.cli", "solve", "--model", "mm1",
                           "--out", "human"], capture_output=True, text=True)
    assert proc.returncode == 0 and "converged: True" in proc.stdout
