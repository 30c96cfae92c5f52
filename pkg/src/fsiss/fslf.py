"""Finite-step ISS Lyapunov certificates.

A certificate claims ``V(x(M, xi, u)) <= rho(V(xi)) + sigma(|u|)`` together with
``alpha1(|xi|) <= V(xi) <= alpha2(|xi|)``.  Everything here either builds such
a claim or tries to break it on a sample cloud.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gainnet import (
    EPS_SG,
    DiagonalOp,
    GainMatrix,
    OmegaPath,
    check_alphahat,
    verify_omega_path,
)
from .scalarfun import (
    ZERO,
    FnClass,
    ScalarFn,
    add,
    check_class,
    compose,
    compose_all,
    evaluate,
    gain_to_json,
    gap,
    identity,
    invert,
    is_zero,
    lin,
    parse,
    parse_gain,
    pointwise_max,
    pointwise_min,
    power,
    scale,
)
from .sysmodel import (
    CloudConfig,
    KBound,
    SystemModel,
    block_norms,
    input_sup,
    joint_cloud,
    simulate_batch,
    state_cloud,
    vec_norm,
)


class CompositionError(ValueError):
    pass


@dataclass(frozen=True)
class VSpec:
    """``kind`` is ``norm``, ``block_max`` (weights) or ``block_fn`` (per-block functions)."""

    kind: str = "norm"
    norm: str = "inf"
    weights: tuple | None = None
    fns: tuple | None = None
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind == "block_max":
            if not self.weights or any(not w > 0 for w in self.weights):
                raise ValueError("block weights must be positive")
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        elif self.kind == "block_fn":
            if not self.fns:
                raise ValueError("block_fn needs one function per block")
            object.__setattr__(self, "fns", tuple(self.fns))
        elif self.kind != "norm":
            raise ValueError(f"unknown V kind {self.kind!r}")
        if not self.exponent > 0:
            raise ValueError("exponent must be positive")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "norm": self.norm, "exponent": self.exponent}
        if self.weights is not None:
            out["weights"] = list(self.weights)
        if self.fns is not None:
            out["fns"] = [str(f) for f in self.fns]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "VSpec":
        fns = tuple(parse(f) for f in data["fns"]) if data.get("fns") else None
        weights = tuple(data["weights"]) if data.get("weights") else None
        return cls(data.get("kind", "norm"), data.get("norm", "inf"), weights, fns,
                   float(data.get("exponent", 1.0)))


def eval_v(v: VSpec, xi, blocks: Sequence[int] | None = None) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if v.kind == "norm":
        out = vec_norm(xi, v.norm)
    else:
        blocks = blocks or (xi.shape[0],)
        if sum(blocks) != xi.shape[0]:
            raise ValueError(f"blocks {tuple(blocks)} do not match state dimension {xi.shape[0]}")
        bn = block_norms(xi, blocks, v.norm)
        if v.kind == "block_max":
            if len(v.weights) != len(blocks):
                raise ValueError("one weight per block required")
            out = np.max(np.asarray(v.weights).reshape((-1,) + (1,) * (bn.ndim - 1)) * bn, axis=0)
        else:
            if len(v.fns) != len(blocks):
                raise ValueError("one function per block required")
            out = np.max(np.stack([np.asarray(evaluate(f, b)) for f, b in zip(v.fns, bn)]), axis=0)
    return out if v.exponent == 1.0 else out ** v.exponent


@dataclass
class Certificate:
    v: VSpec
    M: int
    rho: ScalarFn
    sigma: object
    alpha1: ScalarFn
    alpha2: ScalarFn
    blocks: tuple = ()
    evidence: dict = field(default_factory=dict)
    provenance: str = "user"

    def to_dict(self) -> dict:
        return {
            "v": self.v.to_dict(), "M": self.M, "rho": str(self.rho),
            "sigma": gain_to_json(self.sigma), "alpha1": str(self.alpha1),
            "alpha2": str(self.alpha2), "blocks": list(self.blocks),
            "evidence": self.evidence, "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Certificate":
        return cls(VSpec.from_dict(data["v"]), int(data["M"]), parse(data["rho"]),
                   parse_gain(data.get("sigma")), parse(data["alpha1"]), parse(data["alpha2"]),
                   tuple(data.get("blocks") or ()), dict(data.get("evidence") or {}),
                   data.get("provenance", "user"))

    def with_rho(self, rho: ScalarFn) -> "Certificate":
        return Certificate(self.v, self.M, rho, self.sigma, self.alpha1, self.alpha2,
                           self.blocks, dict(self.evidence), self.provenance)


def rho_margin_ok(rho: ScalarFn) -> bool:
    """``id - rho`` must be K-infinity (for linear rho: coefficient below 1)."""
    if rho.is_linear:
        return rho.coef < 1 - EPS_SG
    return check_class(gap(rho), FnClass.KINF).passed


# --------------------------------------------------------------------------
# falsification


def verify_decrease(sys: SystemModel, cert: Certificate, cfg: CloudConfig | None = None) -> dict:
    """Search a state/input cloud for a violation of the decrease inequality."""
    cfg = CloudConfig() if cfg is None else cfg
    blocks = cert.blocks or sys.blocks
    x0, u = joint_cloud(sys, cert.M, cfg, blocks)
    xm = simulate_batch(sys, x0, u, cert.M)
    v0 = eval_v(cert.v, x0, blocks)
    vm = eval_v(cert.v, xm, blocks)
    un = input_sup(u, cfg.norm)
    rhs = np.asarray(evaluate(cert.rho, v0)) + np.asarray(evaluate(cert.sigma, un))
    slack = rhs - vm
    bad = ~(vm <= rhs + 1e-12 * np.maximum(1.0, rhs))
    worst = int(np.argmin(np.where(np.isnan(slack), -np.inf, slack)))
    free = (un == 0) & (v0 > 0)
    ratio = np.where(free, vm / np.where(v0 > 0, v0, 1.0), -np.inf)
    top = int(np.argmax(ratio))
    return {
        "pass": not bad.any(),
        "violations": int(bad.sum()),
        "samples": int(x0.shape[1]),
        "seed": cfg.seed,
        "radius": cfg.radius_max,
        "input_max": cfg.input_max,
        "worst_slack": float(slack[worst]),
        "witness": {"xi": x0[:, worst].tolist(), "u": u[:, :, worst].tolist()},
        "max_v_ratio": float(ratio[top]) if free.any() else 0.0,
        "max_v_ratio_witness": x0[:, top].tolist() if free.any() else None,
    }


def check_sandwich(cert: Certificate, n: int, cfg: CloudConfig | None = None, samples: int = 10_000) -> dict:
    cfg = CloudConfig(samples=samples) if cfg is None else cfg
    rng = np.random.default_rng(cfg.seed)
    blocks = cert.blocks or (n,)
    xi = state_cloud(n, blocks, cfg, samples, rng)
    v = eval_v(cert.v, xi, blocks)
    r = vec_norm(xi, cert.v.norm)
    lo = np.asarray(evaluate(cert.alpha1, r))
    hi = np.asarray(evaluate(cert.alpha2, r))
    tol = 1e-12 * np.maximum(1.0, v)
    ok = (lo <= v + tol) & (v <= hi + tol)
    return {"pass": bool(ok.all()), "violations": int((~ok).sum()), "samples": int(xi.shape[1])}


# --------------------------------------------------------------------------
# the norm as candidate


@dataclass
class Procedure1Result:
    certificate: Certificate | None
    table: list

    @property
    def succeeded(self) -> bool:
        return self.certificate is not None

    def to_dict(self) -> dict:
        return {
            "status": "certified" if self.succeeded else "inconclusive",
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "table": self.table,
        }


def _free_cloud(sys: SystemModel, cfg: CloudConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return state_cloud(sys.n, sys.blocks, cfg, cfg.samples, rng)


def contraction_estimate(sys: SystemModel, k: int, cfg: CloudConfig) -> tuple[float, np.ndarray]:
    """``sup |x(k, xi, 0)| / |xi|`` over the zero-input cloud, with its maximiser."""
    xi = _free_cloud(sys, cfg)
    xk = simulate_batch(sys, xi, np.zeros((k, sys.m, xi.shape[1])), k)
    ratio = vec_norm(xk, cfg.norm) / vec_norm(xi, cfg.norm)
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    top = int(np.argmax(ratio))
    return float(ratio[top]), xi[:, top]


def input_coefficient(sys: SystemModel, k: int, c: float, cfg: CloudConfig) -> float:
    """Smallest ``d`` with ``|x(k)| <= c |xi| + d |u|`` on an input-active cloud."""
    xi, u = joint_cloud(sys, k, cfg)
    un = input_sup(u, cfg.norm)
    active = un > 0
    xk = simulate_batch(sys, xi[:, active], u[:, :, active], k)
    excess = vec_norm(xk, cfg.norm) - c * vec_norm(xi[:, active], cfg.norm)
    need = excess / un[active]
    return max(0.0, float(np.max(need))) if need.size else 0.0


def procedure1(sys: SystemModel, norm: str = "inf", max_k: int = 10,
               cfg: CloudConfig | None = None) -> Procedure1Result:
    """Try ``V = |.|`` with horizons ``k = 1..max_k``; the first contracting ``k`` wins."""
    if max_k < 1:
        raise ValueError("max_k must be at least 1")
    cfg = CloudConfig(norm=norm) if cfg is None else CloudConfig(**{**cfg.to_dict(), "norm": norm})
    eta = cfg.inflate
    table = []
    for k in range(1, max_k + 1):
        raw, witness = contraction_estimate(sys, k, cfg)
        c = (1 + eta) * raw
        row = {"k": k, "sampled_ratio": raw, "c": c, "witness": witness.tolist()}
        table.append(row)
        if not (math.isfinite(c) and c < 1 - EPS_SG):
            row["status"] = "no contraction"
            continue
        d = (1 + eta) * input_coefficient(sys, k, c, cfg)
        row["d"] = d
        cert = Certificate(
            VSpec("norm", norm), k, lin(c) if c > 0 else lin(EPS_SG), lin(d) if d > 0 else ZERO,
            identity(), identity(), tuple(sys.blocks),
            {"kind": "sampled", "samples": cfg.samples, "seed": cfg.seed, "radius": cfg.radius_max},
            "procedure1",
        )
        check = verify_decrease(sys, cert, cfg.reseeded(1))
        row["refalsify"] = {key: check[key] for key in ("pass", "violations", "worst_slack", "seed")}
        if not check["pass"]:
            row["status"] = "falsified on fresh seed"
            continue
        row["status"] = "certified"
        cert.evidence.update(refalsified_seed=cfg.seed + 1, worst_slack=check["worst_slack"])
        return Procedure1Result(cert, table)
    return Procedure1Result(None, table)


# --------------------------------------------------------------------------
# exponential ISS constants


@dataclass
class ExpIssEstimate:
    C: float
    kappa: float
    gamma: ScalarFn
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.kappa < 1:
            raise ValueError(f"kappa must be below 1, got {self.kappa}")

    def to_dict(self) -> dict:
        return {"C": self.C, "kappa": self.kappa, "gamma": str(self.gamma), "details": self.details}


def _power_bound(f: ScalarFn, lam: float) -> float:
    """Recover ``a`` from ``f(s) = a s**lam``; raise if ``f`` has another shape."""
    grid = np.logspace(-3, 3, 13)
    a = float(evaluate(f, 1.0))
    if not np.allclose(np.asarray(evaluate(f, grid)), a * grid ** lam, rtol=1e-9, atol=0):
        raise ValueError(f"{f} is not of the form a*s^{lam}")
    return a


def expiss_constants(cert: Certificate, kb: KBound, h: float = 0.5) -> ExpIssEstimate:
    """``|x(k)| <= C kappa^k |xi| + gamma(|u|)`` from a linear certificate and K-bound."""
    if not 0 < h < 1:
        raise ValueError("h must lie in (0, 1)")
    if not cert.rho.is_linear or not (is_zero(cert.sigma) or cert.sigma.is_linear):
        raise ValueError("expISS constants need linear rho and sigma")
    lam = cert.v.exponent
    c = cert.rho.coef
    d = 0.0 if is_zero(cert.sigma) else cert.sigma.coef
    a = _power_bound(cert.alpha1, lam)
    b = _power_bound(cert.alpha2, lam)
    if not (b >= a > 0 and 0 <= c < 1):
        raise ValueError(f"need b >= a > 0 and c in [0, 1), got a={a}, b={b}, c={c}")
    M = cert.M
    w1, w2 = kb.w1, kb.w2
    kt = c + h * (1 - c)
    kappa = kt ** (1.0 / (lam * M))
    wt1 = max(w1 ** j for j in range(M))
    wt2 = max(w2 * sum(w1 ** i for i in range(j)) for j in range(M))
    root = (b / (a * kt)) ** (1.0 / lam)
    C = root * wt1
    # (p + q)^(1/lam) <= K (p^(1/lam) + q^(1/lam)) splits the state and input parts
    K = 2.0 ** max(0.0, 1.0 / lam - 1.0)
    lin_part = K * root * wt2
    pow_part = K * C * (d / (a * h * (1 - c))) ** (1.0 / lam)
    terms = []
    if lin_part > 0:
        terms.append(lin(lin_part))
    if pow_part > 0:
        terms.append(scale(pow_part, power(1.0 / lam)))
    gamma = add(*terms) if terms else ZERO
    if C < 1:
        raise ArithmeticError(f"assembled C={C} < 1")
    return ExpIssEstimate(C, kappa, gamma, {
        "kappa_tilde": kt, "h": h, "a": a, "b": b, "c": c, "d": d, "lambda": lam,
        "M": M, "w1": w1, "w2": w2, "w1_tilde": wt1, "w2_tilde": wt2,
    })


def check_iss_estimate(sys: SystemModel, est: ExpIssEstimate, cfg: CloudConfig | None = None,
                       horizon: int = 50, zero_input: bool = False) -> dict:
    cfg = CloudConfig(samples=10_000) if cfg is None else cfg
    x0, u = joint_cloud(sys, horizon, cfg)
    if zero_input:
        u = np.zeros_like(u)
    hist = simulate_batch(sys, x0, u, horizon, keep=True)
    r0 = vec_norm(x0, cfg.norm)
    worst = np.inf
    first_bad = None
    violations = 0
    sup = np.zeros(x0.shape[1])
    for k in range(horizon + 1):
        if k > 0:
            sup = np.maximum(sup, vec_norm(u[k - 1], cfg.norm))
        lhs = vec_norm(hist[k], cfg.norm)
        rhs = est.C * est.kappa ** k * r0 + np.asarray(evaluate(est.gamma, sup))
        slack = rhs - lhs
        bad = ~(lhs <= rhs + 1e-12 * np.maximum(1.0, rhs))
        violations += int(bad.sum())
        if bad.any() and first_bad is None:
            i = int(np.flatnonzero(bad)[0])
            first_bad = {"k": k, "xi": x0[:, i].tolist()}
        worst = min(worst, float(np.nanmin(slack)))
    return {"pass": violations == 0, "violations": violations, "worst_slack": worst,
            "horizon": horizon, "samples": int(x0.shape[1]), "witness": first_bad}


# --------------------------------------------------------------------------
# composition from gains and an Omega-path


def _norm_constant(nblocks: int, norm: str) -> float:
    """``|xi| <= kappa * max_i |xi_i|`` for block p-norms."""
    return {"inf": 1.0, "1": float(nblocks), "2": math.sqrt(nblocks)}[norm]


def _delta_of(d: ScalarFn) -> ScalarFn:
    if d.is_linear:
        if d.coef <= 1:
            raise CompositionError("factor entry is not of the form id + delta")
        return lin(d.coef - 1.0)
    if d.kind == "sum" and len(d.args) == 2 and d.args[0] == identity():
        return d.args[1]
    raise CompositionError(f"cannot read delta from factor entry {d}")


def compose_certificate(gm: GainMatrix, path: OmegaPath, D: DiagonalOp | None = None,
                        M: int = 1, blocks: Sequence[int] | None = None,
                        norm: str = "inf") -> Certificate:
    """Composite ``V = max_i sigma_i^-1 d_i^-1 |xi_i|`` with its decrease pair."""
    blocks = tuple(blocks) if blocks else tuple([1] * gm.n)
    if len(blocks) != gm.n or path.n != gm.n:
        raise CompositionError("gains, path and blocks disagree on the number of subsystems")
    kappa = _norm_constant(gm.n, norm)
    linear = gm.is_linear and path.is_linear and all(
        is_zero(g) or g.is_linear for g in gm.gamma_u) and (
        D is None or all(d.is_linear for d in D.entries))
    if linear:
        return _compose_linear(gm, path, D, M, blocks, norm, kappa)
    if D is None:
        raise CompositionError("nonlinear gains need a diagonal operator with a verified alpha-hat")
    if gm.form == "max":
        return _compose_max(gm, path, D, M, blocks, norm, kappa)
    return _compose_sum(gm, path, D, M, blocks, norm, kappa)


def _compose_linear(gm, path, D, M, blocks, norm, kappa) -> Certificate:
    report = verify_omega_path(gm, path, D, order="inner")
    if not report.passed:
        raise CompositionError(f"Omega-path fails verification (margin {report.margin:.3g})")
    a = gm.coefficients()
    b = gm.input_coefficients()
    s = path.coefficients()
    e = np.ones(gm.n) if D is None else np.array([d.coef for d in D.entries])
    scale_ = s * e
    weights = 1.0 / scale_
    rho_c = float(np.max(a * scale_[None, :] / scale_[:, None]))
    sigma_c = float(np.max(b / scale_))
    if not rho_c < 1 - EPS_SG:
        raise CompositionError(f"rho coefficient {rho_c!r} is not below 1")
    return Certificate(
        VSpec("block_max", norm, tuple(weights)), M, lin(rho_c),
        lin(sigma_c) if sigma_c > 0 else ZERO,
        lin(float(np.min(weights)) / kappa), lin(float(np.max(weights))), blocks,
        {"kind": "composed", "path_margin": report.margin}, "composed",
    )


def _compose_max(gm, path, D, M, blocks, norm, kappa) -> Certificate:
    report = verify_omega_path(gm, path, D, order="inner")
    if not report.passed:
        raise CompositionError(f"Omega-path for G o D fails (margin {report.margin:.3g})")
    alpha = check_alphahat(path, D, "full")
    if not alpha["pass"]:
        raise CompositionError("alpha-hat condition fails: "
                               + "; ".join(r.summary() for r in alpha["reports"]))
    inv_sig = path.inverses
    scalers = [compose(si, invert(d)) for si, d in zip(inv_sig, D.entries)]
    rho = pointwise_max([compose_all(w, sig) for w, sig in zip(scalers, path.components)])
    sigma = pointwise_max([compose(w, g) for w, g in zip(scalers, gm.gamma_u)])
    return _finish(scalers, rho, sigma, M, blocks, norm, kappa, report.margin)


def _compose_sum(gm, path, D, M, blocks, norm, kappa) -> Certificate:
    if D.factors is None:
        raise CompositionError("sum-form composition needs a factorisation D = D2 o D1")
    d1, d2 = D.factors
    if not D.check()["factor_match"]:
        raise CompositionError("factor pair does not reproduce D")
    report = verify_omega_path(gm, path, D, order="split")
    if not report.passed:
        raise CompositionError(f"Omega-path for D1 o G o D2 fails (margin {report.margin:.3g})")
    alpha = check_alphahat(path, D, "factor")
    if not alpha["pass"]:
        raise CompositionError("alpha-hat condition fails for the D2 factor")
    inv_sig = path.inverses
    scalers = [compose(si, invert(d)) for si, d in zip(inv_sig, d2.entries)]
    rho = pointwise_max([compose_all(w, sig) for w, sig in zip(scalers, path.components)])
    phis = []
    for i in range(gm.n):
        gu = gm.gamma_u[i]
        gu = identity() if is_zero(gu) else gu
        if gu.declared not in (FnClass.KINF, FnClass.LINEAR):
            raise CompositionError(f"input gain {gu} must be K-infinity for the sum-form route")
        row = [(j, g) for j, g in enumerate(gm.gamma[i]) if not is_zero(g)]
        if not row:
            phis.append(compose_all(lin(0.5), invert(gu), path.components[i]))
            continue
        delta1 = _delta_of(d1.entries[i])
        phis.append(pointwise_max([
            compose_all(invert(gu), delta1, g, d2.entries[j], path.components[j]) for j, g in row]))
    phi = pointwise_min(phis)
    phi_class = check_class(phi, FnClass.KINF)
    if not phi_class.passed:
        raise CompositionError(f"sum-form route needs K-infinity gains; phi is {phi_class.summary()}")
    sigma = compose(rho, invert(phi))
    return _finish(scalers, rho, sigma, M, blocks, norm, kappa, report.margin)


def _finish(scalers, rho, sigma, M, blocks, norm, kappa, margin) -> Certificate:
    if not rho_margin_ok(rho):
        raise CompositionError(f"id - rho is not K-infinity for rho = {rho}")
    alpha1 = compose(pointwise_min(scalers), lin(1.0 / kappa))
    alpha2 = pointwise_max(scalers)
    return Certificate(VSpec("block_fn", norm, fns=tuple(scalers)), M, rho, sigma, alpha1, alpha2,
                       blocks, {"kind": "composed", "path_margin": margin}, "composed")
