import json
import subprocess
import sys

import pytest

from fsiss.cli import main
from fsiss.corpus import NONLINEAR_CERTIFICATE


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out.rstrip("\n").splitlines()
    assert out[-1].startswith("VERDICT ")
    verdict = json.loads(out[-1][len("VERDICT "):])
    assert verdict["exit"] == code
    return code, verdict, out


def run_usage(capsys, *argv):
    with pytest.raises(SystemExit) as exc:
        main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return exc.value.code, json.loads(out[-1][len("VERDICT "):])


def test_simulate_csv(capsys, tmp_path):
    code, verdict, out = run(capsys, "simulate", "--system", "paper-ex-nonlinear",
                             "--x0", "100,0", "--steps", "3")
    assert code == 0 and verdict["verdict"] == "simulated"
    assert out[0] == "k,x1,x2,u1"
    last = [float(v) for v in out[4].split(",")[1:3]]
    assert last == pytest.approx([39.910009, 70.29997], abs=1e-5)
    target = tmp_path / "traj.csv"
    run(capsys, "simulate", "--system", "paper-ex-linear2d", "--x0", "1,0", "--steps", "0",
        "--out", str(target))
    assert target.read_text().splitlines() == ["k,x1,x2,u1,u2", "0,1.0,0.0,,"]


def test_usage_errors(capsys):
    code, verdict = run_usage(capsys, "gains", "--system", "paper-ex-nonlinear", "--k", "0")
    assert code == 2 and verdict == {**verdict, "command": "gains", "verdict": "usage-error"}
    code, _ = run_usage(capsys, "frobnicate")
    assert code == 2
    code, verdict, _ = run(capsys, "verify", "--system", "paper-ex-nonlinear",
                           "--certificate", "/nonexistent/cert.json")
    assert code == 2 and verdict["verdict"] == "error"
    code, verdict, _ = run(capsys, "simulate", "--system", "nope")
    assert code == 2 and "nope" in verdict["message"]
    code, _, _ = run(capsys, "simulate", "--system", "paper-ex-nonlinear", "--x0", "1")
    assert code == 2


def test_gains_commands(capsys):
    base = ("--system", "paper-ex-nonlinear", "--samples", "20000")
    code, verdict, _ = run(capsys, "gains", *base, "--k", "1")
    assert (code, verdict["verdict"]) == (2, "small-gain violated")
    code, verdict, _ = run(capsys, "gains", *base, "--k", "3")
    assert (code, verdict["verdict"]) == (0, "cycle condition holds")
    code, verdict, _ = run(capsys, "gains", *base, "--k", "3", "--gains", "paper-ex-nonlinear-k3")
    assert (code, verdict["verdict"]) == (1, "gains falsified")
    code, verdict, _ = run(capsys, "gains", *base, "--k", "3",
                           "--gains", "paper-ex-nonlinear-k3-sound")
    assert (code, verdict["verdict"]) == (0, "gains hold")


def test_smallgain_and_path(capsys, tmp_path):
    out = tmp_path / "sg.json"
    code, _, _ = run(capsys, "smallgain", "--gains", "paper-ex-nonlinear-k3", "--samples", "5000",
                     "--out", str(out))
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["result"]["maxplus_radius"] == pytest.approx(0.955776, abs=1e-6)
    assert doc["tool"] == "fsiss" and doc["config"]["samples"] == 5000
    code, verdict, text = run(capsys, "omega-path", "--gains", "paper-ex-nonlinear-k3",
                              "--path", "paper-ex-nonlinear")
    assert code == 0 and verdict["verdict"] == "path verified"
    assert "Gamma(sigma(1)) = [0.47115, 0.8725]" in text
    code, verdict, _ = run(capsys, "omega-path", "--gains", str(out))
    assert code == 0


def test_certify_exit_codes(capsys, tmp_path):
    out = tmp_path / "cert.json"
    base = ("--system", "paper-ex-nonlinear", "--samples", "20000")
    code, verdict, _ = run(capsys, "certify", *base, "--max-k", "5", "--out", str(out))
    assert (code, verdict["verdict"]) == (0, "certified")
    doc = json.loads(out.read_text())
    assert doc["result"]["certificate"]["M"] == 3
    code, _, _ = run(capsys, "verify", *base, "--certificate", str(out))
    assert code == 0
    code, verdict, _ = run(capsys, "certify", *base, "--max-k", "1")
    assert (code, verdict["verdict"]) == (2, "inconclusive")


def test_verify_and_report(capsys, tmp_path):
    base = ("--system", "paper-ex-nonlinear", "--samples", "20000")
    code, verdict, _ = run(capsys, "verify", *base, "--certificate", "paper-ex-nonlinear")
    assert (code, verdict["verdict"]) == (0, "holds")
    forged = tmp_path / "forged.json"
    forged.write_text(json.dumps({**NONLINEAR_CERTIFICATE, "rho": "lin 0.5"}))
    code, verdict, _ = run(capsys, "verify", *base, "--certificate", str(forged))
    assert (code, verdict["verdict"]) == (1, "falsified")
    code, _, text = run(capsys, "report", *base, "--certificate", str(forged))
    assert code == 1 and any("expISS constants unavailable" in line for line in text)
    code, _, text = run(capsys, "procedure1", "--system", "paper-ex-linear2d", "--samples", "20000")
    assert code == 0 and any("certified: M=3" in line for line in text)


def test_config_file_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"system": "paper-ex-linear2d", "samples": 3000, "seed": 5}))
    out = tmp_path / "p1.json"
    run(capsys, "procedure1", "--config", str(cfg), "--seed", "6", "--out", str(out))
    config = json.loads(out.read_text())["config"]
    assert (config["system"], config["samples"], config["seed"]) == ("paper-ex-linear2d", 3000, 6)
    cfg.write_text(json.dumps({"colour": "blue"}))
    code, _, _ = run(capsys, "procedure1", "--config", str(cfg))
    assert code == 2


@pytest.mark.parametrize("argv", [
    ["gains", "--system", "paper-ex-nonlinear", "--k", "3", "--samples", "5000"],
    ["certify", "--system", "paper-ex-nonlinear", "--samples", "5000"],
    ["verify", "--system", "paper-ex-nonlinear", "--certificate", "paper-ex-nonlinear",
     "--samples", "5000", "--seed", "3"],
])
def test_reruns_are_bitwise_identical(capsys, tmp_path, argv):
    out = tmp_path / "run.json"
    run(capsys, *argv, "--out", str(out))
    first = out.read_bytes()
    run(capsys, *argv, "--out", str(out))
    assert out.read_bytes() == first


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fsiss", "simulate", "--system", "zero", "--steps", "1"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[-1].startswith("VERDICT ")
