"""Finite-step gains fitted from simulation, and the gain-based certification loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fslf import Certificate, CompositionError, compose_certificate, verify_decrease
from .gainnet import (
    GainError,
    GainMatrix,
    OmegaPath,
    cycle_condition,
    omega_path_linear,
)
from .scalarfun import evaluate, is_zero
from .sysmodel import (
    CloudConfig,
    SystemModel,
    block_norms,
    input_sup,
    joint_cloud,
    fit_linear_envelope,
    simulate_batch,
)

DROP_TOL = 1e-9
REFITS = 3


class GainFitError(RuntimeError):
    pass


@dataclass
class GainFit:
    k: int
    a: np.ndarray
    b: np.ndarray
    blocks: tuple
    residuals: dict = field(default_factory=dict)
    cloud: dict = field(default_factory=dict)

    @property
    def max_form(self) -> GainMatrix:
        """``gamma_ij = z_i a_ij`` with ``z_i`` the number of couplings in row ``i``."""
        z = np.count_nonzero(self.a, axis=1)
        return GainMatrix.linear(self.a * z[:, None], self.b, form="sum")

    def scaled(self, factor: float) -> "GainFit":
        return GainFit(self.k, self.a * factor, self.b * factor, self.blocks)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "blocks": list(self.blocks),
            "sum_form": {"a": self.a.tolist(), "b": self.b.tolist()},
            "max_form": self.max_form.to_dict(),
            "residuals": self.residuals,
            "cloud": self.cloud,
        }


def _block_data(sys: SystemModel, blocks, k: int, cfg: CloudConfig):
    x0, u = joint_cloud(sys, k, cfg, blocks)
    xk = simulate_batch(sys, x0, u, k)
    return block_norms(x0, blocks, cfg.norm), input_sup(u, cfg.norm), block_norms(xk, blocks, cfg.norm), x0


def fit_gains(sys: SystemModel, blocks: Sequence[int] | None = None, k: int = 1,
              cfg: CloudConfig | None = None) -> GainFit:
    """Row-wise LP: ``|x_i(k)| <= sum_j a_ij |xi_j| + b_i |u|`` on the cloud, then inflate."""
    if k < 1:
        raise ValueError("k must be at least 1")
    blocks = tuple(blocks or sys.blocks)
    cfg = CloudConfig() if cfg is None else cfg
    for attempt in range(REFITS + 1):
        run = cfg.resized(cfg.samples * 2 ** attempt)
        xi_n, u_n, xk_n, _ = _block_data(sys, blocks, k, run)
        if not np.all(np.isfinite(xk_n)):
            raise GainFitError(f"non-finite states after {k} steps; shrink --radius-max")
        feats = np.vstack([xi_n, u_n])
        coef = np.array([fit_linear_envelope(feats, row) for row in xk_n]) * (1 + cfg.inflate)
        coef[coef < DROP_TOL] = 0.0
        fit = GainFit(k, coef[:, :-1], coef[:, -1], blocks,
                      cloud={"samples": run.samples, "seed": run.seed, "radius": run.radius_max})
        check = falsify_gains(sys, fit, cfg=run.reseeded(1))
        fit.residuals = {key: check[key] for key in ("pass", "worst_residual", "violations", "seed")}
        if check["pass"]:
            return fit
    raise GainFitError(f"gain fit at k={k} keeps failing validation: {fit.residuals}")


def falsify_gains(sys: SystemModel, gains, k: int | None = None, cfg: CloudConfig | None = None,
                  blocks: Sequence[int] | None = None) -> dict:
    """Fresh-cloud check of the block inequalities.

    ``gains`` is a :class:`GainFit` (both the sum-form fit and its max-form
    conversion are checked) or a :class:`GainMatrix` with an explicit ``k``.
    """
    cfg = CloudConfig() if cfg is None else cfg
    if isinstance(gains, GainFit):
        k, blocks, gm = gains.k, gains.blocks, gains.max_form
    else:
        if k is None:
            raise ValueError("a horizon k is needed to falsify a bare gain matrix")
        gm = gains
        blocks = tuple(blocks or sys.blocks)
    if len(blocks) != gm.n:
        raise GainError(f"{gm.n} gain rows but {len(blocks)} blocks")
    xi_n, u_n, xk_n, x0 = _block_data(sys, blocks, k, cfg)
    rhs = _gain_rhs(gm, xi_n, u_n)
    checks = [("max_form", rhs)]
    if isinstance(gains, GainFit):
        checks.insert(0, ("sum_form", gains.a @ xi_n + gains.b[:, None] * u_n[None, :]))
    out = {"k": k, "samples": int(x0.shape[1]), "seed": cfg.seed, "violations": {}}
    worst_val, worst_at = -np.inf, None
    for name, bound in checks:
        excess = xk_n - bound
        bad = excess > 1e-12 * np.maximum(1.0, bound)
        out["violations"][name] = int(bad.sum())
        rel = excess / np.maximum(bound, 1e-300)
        idx = np.unravel_index(np.argmax(rel), rel.shape)
        if rel[idx] > worst_val:
            worst_val, worst_at = float(rel[idx]), (name, int(idx[0]), int(idx[1]))
    out["pass"] = not any(out["violations"].values())
    out["worst_residual"] = worst_val
    if worst_at is not None:
        name, row, col = worst_at
        out["witness"] = {"form": name, "block": row + 1, "xi": x0[:, col].tolist()}
    return out


def _gain_rhs(gm: GainMatrix, xi_n: np.ndarray, u_n: np.ndarray) -> np.ndarray:
    internal = np.zeros_like(xi_n)
    for i, row in enumerate(gm.gamma):
        for j, g in enumerate(row):
            if not is_zero(g):
                internal[i] = np.maximum(internal[i], evaluate(g, xi_n[j]))
    external = np.stack([np.asarray(evaluate(g, u_n)) for g in gm.gamma_u])
    return internal + external if gm.form == "sum" else np.maximum(internal, external)


@dataclass
class Procedure2Result:
    status: str
    certificate: Certificate | None = None
    fit: GainFit | None = None
    path: OmegaPath | None = None
    table: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "fit": None if self.fit is None else self.fit.to_dict(),
            "path": None if self.path is None else self.path.to_dict(),
            "table": self.table,
        }


def certify_from_gains(sys: SystemModel, gm: GainMatrix, M: int, blocks, cfg: CloudConfig,
                       row: dict) -> tuple[Certificate | None, OmegaPath | None]:
    """Cycle check, linear Omega-path, composition and falsification for one gain set."""
    cyc = cycle_condition(gm)
    row["cycle"] = cyc.to_dict()
    if not cyc.passed:
        row["status"] = "small-gain violated"
        return None, None
    try:
        path = omega_path_linear(gm)
        cert = compose_certificate(gm, path, M=M, blocks=blocks, norm=cfg.norm)
    except (GainError, CompositionError) as exc:
        row["status"] = f"composition failed: {exc}"
        return None, None
    check = verify_decrease(sys, cert, cfg.reseeded(2))
    row["decrease"] = {key: check[key] for key in ("pass", "violations", "worst_slack", "samples", "seed")}
    if not check["pass"]:
        row["status"] = "certificate falsified"
        return None, path
    cert.evidence.update(kind="sampled", samples=check["samples"], seed=check["seed"],
                         radius=cfg.radius_max, worst_slack=check["worst_slack"])
    row["status"] = "certified"
    return cert, path


def procedure2(sys: SystemModel, blocks: Sequence[int] | None = None, max_k: int = 5,
               cfg: CloudConfig | None = None) -> Procedure2Result:
    """Increase the horizon until fitted gains satisfy the small-gain condition."""
    if max_k < 1:
        raise ValueError("max_k must be at least 1")
    blocks = tuple(blocks or sys.blocks)
    cfg = CloudConfig() if cfg is None else cfg
    table = []
    falsified = False
    for k in range(1, max_k + 1):
        row: dict = {"k": k}
        table.append(row)
        try:
            fit = fit_gains(sys, blocks, k, cfg)
        except GainFitError as exc:
            row["status"] = f"fit failed: {exc}"
            continue
        row["a"] = fit.a.tolist()
        row["b"] = fit.b.tolist()
        cert, path = certify_from_gains(sys, fit.max_form, k, blocks, cfg, row)
        if cert is not None:
            cert.provenance = "composed"
            return Procedure2Result("certified", cert, fit, path, table)
        falsified |= row["status"] == "certificate falsified"
    return Procedure2Result("falsified" if falsified else "inconclusive", table=table)


__all__ = ["GainFit", "GainFitError", "fit_gains", "falsify_gains", "procedure2",
           "Procedure2Result", "certify_from_gains"]
