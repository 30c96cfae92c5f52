"""Command-line front end.

Every command writes a JSON document (to ``--out`` or embedded in the
human report) that echoes the resolved run configuration, and finishes
with a single ``VERDICT {...}`` line on stdout.  Exit codes: 0 for
certified / holds, 1 for falsified, 2 for inconclusive or usage errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, corpus
from .fslf import (
    Certificate,
    check_sandwich,
    expiss_constants,
    procedure1,
    verify_decrease,
)
from .gainest import GainFitError, falsify_gains, fit_gains, procedure2
from .gainnet import (
    GainMatrix,
    OmegaPath,
    cycle_condition,
    maxplus_radius,
    omega_path_grid,
    omega_path_linear,
    smallgain_sample_check,
    verify_omega_path,
)
from .scalarfun import ScalarFnError
from .sysmodel import (
    CloudConfig,
    InputSignal,
    ModelError,
    SystemModel,
    estimate_kbound,
    simulate,
)

EXIT_OK, EXIT_FALSIFIED, EXIT_INCONCLUSIVE = 0, 1, 2

DEFAULTS = {
    "system": None,
    "blocks": None,
    "norm": "inf",
    "seed": 0,
    "samples": 100_000,
    "radius_max": 1e3,
    "input_max": 1.0,
    "inflate": 0.02,
    "max_k": 5,
    "k": 1,
    "x0": None,
    "input": "zero",
    "steps": 10,
    "gains": None,
    "path": None,
    "certificate": None,
    "out": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        _verdict(self.prog.split()[-1], "usage-error", EXIT_INCONCLUSIVE, message=message)
        raise SystemExit(EXIT_INCONCLUSIVE)


# --------------------------------------------------------------------------
# argument handling


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # defaults stay None so that config-file values can be told apart from flags
    common.add_argument("--config", help="JSON file of option values; flags win")
    common.add_argument("--system", help="corpus key or system JSON file")
    common.add_argument("--blocks", type=_int_list, help="block sizes, e.g. 1,1")
    common.add_argument("--norm", choices=("inf", "1", "2"))
    common.add_argument("--seed", type=_nonneg_int)
    common.add_argument("--samples", type=_positive_int)
    common.add_argument("--radius-max", dest="radius_max", type=_positive_float)
    common.add_argument("--input-max", dest="input_max", type=float)
    common.add_argument("--inflate", type=float, help="relative inflation of fitted coefficients")
    common.add_argument("--out", help="write the JSON (or CSV) artifact here")

    parser = _Parser(prog="fsiss", description="Finite-step ISS small-gain certification.")
    parser.add_argument("--version", action="version", version=f"fsiss {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="trajectory CSV")
    p.add_argument("--x0", type=_float_list)
    p.add_argument("--input", help="zero | constant:v1,v2,... | random")
    p.add_argument("--steps", type=_nonneg_int)

    p = sub.add_parser("gains", parents=[common], help="fit k-step gains, or falsify given ones")
    p.add_argument("--k", type=_positive_int)
    p.add_argument("--gains", help="analytic gain file or corpus key; skips fitting")

    p = sub.add_parser("smallgain", parents=[common], help="cycle condition and sampled check")
    p.add_argument("--gains", help="gain file or corpus key")

    p = sub.add_parser("omega-path", parents=[common], help="construct or verify an Omega-path")
    p.add_argument("--gains", help="gain file or corpus key")
    p.add_argument("--path", help="path file or corpus key to verify instead of constructing")

    p = sub.add_parser("procedure1", parents=[common], help="norm as finite-step Lyapunov candidate")
    p.add_argument("--max-k", dest="max_k", type=_positive_int)

    p = sub.add_parser("certify", parents=[common], help="fit gains, compose and falsify a certificate")
    p.add_argument("--max-k", dest="max_k", type=_positive_int)

    p = sub.add_parser("verify", parents=[common], help="re-falsify a certificate")
    p.add_argument("--certificate", help="certificate file or corpus key")

    p = sub.add_parser("report", parents=[common], help="summarise a certificate and its ISS constants")
    p.add_argument("--certificate", help="certificate file or corpus key")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = {key: DEFAULTS[key] for key in DEFAULTS}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"config {args.config}: {exc}") from None
        for key, value in data.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"config {args.config}: unknown option {key!r}")
            cfg[key] = value
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    return cfg


def cloud_config(cfg: dict) -> CloudConfig:
    return CloudConfig(samples=int(cfg["samples"]), seed=int(cfg["seed"]),
                       radius_max=float(cfg["radius_max"]), input_max=float(cfg["input_max"]),
                       norm=str(cfg["norm"]), inflate=float(cfg["inflate"]))


# --------------------------------------------------------------------------
# loading


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


# where each artifact sits inside a document written by another command
_EMBEDDED = {
    "system": (),
    "gains": (("gains",), ("fit", "max_form")),
    "path": (("path",),),
    "certificate": (("certificate",),),
}


def _unwrap(data: dict, what: str) -> dict:
    if not (isinstance(data, dict) and data.get("tool") == "fsiss" and "result" in data):
        return data
    for keys in _EMBEDDED[what]:
        node = data["result"]
        for key in keys:
            node = node.get(key) if isinstance(node, dict) else None
        if node:
            return node
    raise UsageError(f"document from '{data['config'].get('command')}' carries no {what}")


def _resolve(value, what: str, table: dict, loader):
    if value is None:
        raise UsageError(f"--{what} is required")
    path = Path(value)
    if path.is_file():
        data = _unwrap(_read_json(path), what)
        try:
            return loader(data)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{path}: {exc}") from None
    if value in table:
        return table[value] if not isinstance(table[value], dict) else loader(table[value])
    raise UsageError(f"--{what} {value!r} is neither a file nor a corpus key "
                     f"(known: {', '.join(sorted(table))})")


def load_system(cfg: dict) -> SystemModel:
    sys_ = _resolve(cfg["system"], "system", corpus.SYSTEMS, SystemModel.from_dict)
    if cfg["blocks"]:
        sys_ = sys_.with_blocks(cfg["blocks"])
    return sys_


def load_gains(cfg: dict) -> GainMatrix:
    return _resolve(cfg["gains"], "gains", corpus.GAINS, GainMatrix.from_dict)


def load_path(cfg: dict) -> OmegaPath:
    return _resolve(cfg["path"], "path", corpus.PATHS, OmegaPath.from_dict)


def load_certificate(cfg: dict) -> Certificate:
    return _resolve(cfg["certificate"], "certificate", corpus.CERTIFICATES, Certificate.from_dict)


def parse_input(text: str, seed: int, bound: float) -> InputSignal:
    kind, _, rest = text.partition(":")
    if kind == "zero":
        return InputSignal("zero")
    if kind == "constant":
        return InputSignal("constant", tuple(_float_list(rest)))
    if kind == "random":
        return InputSignal("random", bound=bound, seed=seed)
    raise UsageError(f"--input {text!r}: expected zero, constant:v1,... or random")


# --------------------------------------------------------------------------
# output


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def document(cfg: dict, result: dict) -> dict:
    return _jsonable({"tool": "fsiss", "version": __version__, "config": cfg, "result": result})


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)


def _write(cfg: dict, text: str) -> None:
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text)


def _verdict(command: str, verdict: str, code: int, **extra) -> None:
    line = {"command": command, "verdict": verdict, "exit": code, **_jsonable(extra)}
    print("VERDICT " + json.dumps(line, sort_keys=True))


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}" if math.isfinite(x) else str(x)
    return str(x)


def _table(rows: list[list], header: list[str]) -> str:
    cells = [header] + [[_fmt(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


def _matrix_rows(a, b) -> list[list]:
    return [[i + 1, *row, bi] for i, (row, bi) in enumerate(zip(a, b))]


# --------------------------------------------------------------------------
# commands: each returns (verdict, exit code, result dict, human text)


def cmd_simulate(cfg: dict):
    sys_ = load_system(cfg)
    x0 = cfg["x0"] if cfg["x0"] is not None else [0.0] * sys_.n
    if len(x0) != sys_.n:
        raise UsageError(f"--x0 has {len(x0)} entries, system has n={sys_.n}")
    u = parse_input(cfg["input"], int(cfg["seed"]), float(cfg["input_max"]))
    traj = simulate(sys_, x0, u, int(cfg["steps"]))
    csv_text = traj.to_csv()
    _write(cfg, csv_text)
    result = {"system": sys_.name, "steps": int(cfg["steps"]), "last": traj.last.tolist()}
    return "simulated", EXIT_OK, result, None if cfg.get("out") else csv_text.rstrip("\n")


def _gain_table(gm: GainMatrix) -> str:
    n = gm.n
    rows = [[i + 1, *(str(g) for g in gm.gamma[i]), str(gm.gamma_u[i])] for i in range(n)]
    return _table(rows, ["i"] + [f"gamma_i{j + 1}" for j in range(n)] + ["gamma_iu"])


def cmd_gains(cfg: dict):
    sys_ = load_system(cfg)
    cloud = cloud_config(cfg)
    k = int(cfg["k"])
    if cfg["gains"] is not None:
        gm = load_gains(cfg)
        check = falsify_gains(sys_, gm, k=k, cfg=cloud, blocks=cfg["blocks"])
        cyc = cycle_condition(gm)
        verdict = "gains hold" if check["pass"] else "gains falsified"
        result = {"k": k, "gains": gm.to_dict(), "falsify": check, "cycle": cyc.to_dict()}
        text = "\n".join([
            f"analytic gains, k={k}", _gain_table(gm),
            f"violations: {check['violations']}  worst relative residual: {_fmt(check['worst_residual'])}",
        ])
        return verdict, EXIT_OK if check["pass"] else EXIT_FALSIFIED, result, text
    try:
        fit = fit_gains(sys_, cfg["blocks"], k, cloud)
    except GainFitError as exc:
        return "fit failed", EXIT_INCONCLUSIVE, {"k": k, "error": str(exc)}, str(exc)
    gm = fit.max_form
    cyc = cycle_condition(gm)
    verdict = "cycle condition holds" if cyc.passed else "small-gain violated"
    result = {"fit": fit.to_dict(), "cycle": cyc.to_dict()}
    text = "\n".join([
        f"k={k} sum-form fit (|x_i(k)| <= sum_j a_ij |xi_j| + b_i |u|)",
        _table(_matrix_rows(fit.a.tolist(), fit.b.tolist()),
               ["i"] + [f"a_i{j + 1}" for j in range(gm.n)] + ["b_i"]),
        "max-form gains", _gain_table(gm),
        f"worst cycle {[c + 1 for c in cyc.worst_cycle or ()]}: {_fmt(cyc.worst_value)}",
    ])
    return verdict, EXIT_OK if cyc.passed else EXIT_INCONCLUSIVE, result, text


def cmd_smallgain(cfg: dict):
    gm = load_gains(cfg)
    cyc = cycle_condition(gm)
    sample = smallgain_sample_check(gm, samples=int(cfg["samples"]), seed=int(cfg["seed"]))
    result = {"gains": gm.to_dict(), "cycle": cyc.to_dict(), "sampled": sample.to_dict()}
    lines = [_gain_table(gm), f"cycles checked: {len(cyc.cycles)}  worst: {_fmt(cyc.worst_value)}"]
    if gm.is_linear:
        result["maxplus_radius"] = maxplus_radius(gm)
        lines.append(f"max-plus spectral radius: {_fmt(result['maxplus_radius'])}")
    lines.append(f"sampled check on {sample.samples} points: {'pass' if sample.passed else 'fail'}")
    ok = cyc.passed and sample.passed
    return ("small-gain holds" if ok else "small-gain violated"), (EXIT_OK if ok else EXIT_FALSIFIED), \
        result, "\n".join(lines)


def cmd_omega_path(cfg: dict):
    gm = load_gains(cfg)
    if cfg["path"] is not None:
        path = load_path(cfg)
    else:
        cyc = cycle_condition(gm)
        if not cyc.passed:
            return "small-gain violated", EXIT_INCONCLUSIVE, {"cycle": cyc.to_dict()}, \
                f"no path: worst cycle value {_fmt(cyc.worst_value)}"
        path = omega_path_linear(gm) if gm.is_linear else omega_path_grid(gm)
    report = verify_omega_path(gm, path)
    result = {"path": path.to_dict(), "verify": report.to_dict()}
    _write(cfg, _dump(document(cfg, result)))
    text = "\n".join([
        "components: " + ", ".join(str(c) for c in path.components),
        f"Gamma(sigma(1)) = {[round(v, 10) for v in report.gamma_at_one.tolist()]}",
        f"margin: {_fmt(report.margin)}",
    ])
    return ("path verified" if report.passed else "path rejected"), \
        (EXIT_OK if report.passed else EXIT_FALSIFIED), result, text


def cmd_procedure1(cfg: dict):
    sys_ = load_system(cfg)
    res = procedure1(sys_, cfg["norm"], int(cfg["max_k"]), cloud_config(cfg))
    result = res.to_dict()
    rows = [[r["k"], r["sampled_ratio"], r["c"], r.get("d", ""), r["status"]] for r in res.table]
    text = _table(rows, ["k", "ratio", "c_k", "d_k", "status"])
    if res.succeeded:
        cert = res.certificate
        text += f"\ncertified: M={cert.M}  rho={cert.rho}  sigma={cert.sigma}"
        return "certified", EXIT_OK, result, text
    return "inconclusive", EXIT_INCONCLUSIVE, result, text


def cmd_certify(cfg: dict):
    sys_ = load_system(cfg)
    res = procedure2(sys_, cfg["blocks"], int(cfg["max_k"]), cloud_config(cfg))
    result = res.to_dict()
    rows = [[r["k"], (r.get("cycle") or {}).get("worst_value", ""), r["status"]] for r in res.table]
    lines = [_table(rows, ["k", "worst cycle", "status"])]
    if res.status == "certified":
        cert = res.certificate
        lines += [
            "max-form gains", _gain_table(res.fit.max_form),
            "Omega-path: " + ", ".join(str(c) for c in res.path.components),
            f"V weights: {cert.v.weights}",
            f"M={cert.M}  rho={cert.rho}  sigma={cert.sigma}",
            f"evidence: {cert.evidence}",
        ]
    code = {"certified": EXIT_OK, "falsified": EXIT_FALSIFIED}.get(res.status, EXIT_INCONCLUSIVE)
    return res.status, code, result, "\n".join(lines)


def cmd_verify(cfg: dict):
    sys_ = load_system(cfg)
    cert = load_certificate(cfg)
    check = verify_decrease(sys_, cert, cloud_config(cfg))
    result = {"certificate": cert.to_dict(), "decrease": check}
    text = (f"{check['samples']} samples, seed {check['seed']}: {check['violations']} violations, "
            f"worst slack {_fmt(check['worst_slack'])}")
    return ("holds" if check["pass"] else "falsified"), \
        (EXIT_OK if check["pass"] else EXIT_FALSIFIED), result, text


def cmd_report(cfg: dict):
    sys_ = load_system(cfg)
    cert = load_certificate(cfg)
    cloud = cloud_config(cfg)
    check = verify_decrease(sys_, cert, cloud)
    sandwich = check_sandwich(cert, sys_.n, cloud, samples=min(cloud.samples, 10_000))
    result = {"certificate": cert.to_dict(), "decrease": check, "sandwich": sandwich}
    lines = [f"V: {cert.v.to_dict()}", f"M={cert.M}  rho={cert.rho}  sigma={cert.sigma}",
             f"alpha1={cert.alpha1}  alpha2={cert.alpha2}",
             f"decrease: {check['violations']} violations on {check['samples']} samples"]
    try:
        if not check["pass"]:
            raise ValueError("the decrease inequality is falsified")
        kb = estimate_kbound(sys_, cloud.norm, cloud)
        est = expiss_constants(cert, kb)
    except ValueError as exc:
        result["expiss"] = {"error": str(exc)}
        lines.append(f"expISS constants unavailable: {exc}")
    else:
        result["kbound"] = kb.to_dict()
        result["expiss"] = est.to_dict()
        lines.append(f"|x(k)| <= {_fmt(est.C)} * {_fmt(est.kappa)}^k |xi| + {est.gamma}(|u|)")
    ok = check["pass"] and sandwich.get("pass", True)
    return ("holds" if ok else "falsified"), (EXIT_OK if ok else EXIT_FALSIFIED), result, "\n".join(lines)


COMMANDS = {
    "simulate": cmd_simulate,
    "gains": cmd_gains,
    "smallgain": cmd_smallgain,
    "omega-path": cmd_omega_path,
    "procedure1": cmd_procedure1,
    "certify": cmd_certify,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        verdict, code, result, text = COMMANDS[args.command](cfg)
    except (UsageError, ModelError, ScalarFnError, KeyError, ValueError, OSError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"fsiss {args.command}: error: {message}", file=sys.stderr)
        _verdict(args.command, "error", EXIT_INCONCLUSIVE, message=message)
        return EXIT_INCONCLUSIVE
    doc = document(cfg, result)
    if args.command not in ("simulate", "omega-path"):
        _write(cfg, _dump(doc))
    if text:
        print(text)
    if not cfg.get("out") and args.command != "simulate":
        print(_dump(doc))
    _verdict(args.command, verdict, code)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
