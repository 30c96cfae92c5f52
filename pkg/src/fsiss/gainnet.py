"""Gain operators on the nonnegative orthant and the small-gain machinery.

``GainMatrix`` holds internal gains ``gamma[i][j]`` (how block ``j`` drives
block ``i``) and input gains ``gamma_u[i]``.  The induced monotone operator is
``[G(s)]_i = max_j gamma[i][j](s_j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scalarfun import (
    ZERO,
    ClassReport,
    FnClass,
    PreconditionError,
    ScalarFn,
    check_class,
    compose_all,
    evaluate,
    gain_to_json,
    identity,
    invert,
    is_zero,
    lin,
    loglog,
    parse_gain,
)

EPS_SG = 1e-9
CYCLE_ENUM_CAP = 12
VERIFY_GRID = np.logspace(-6, 6, 512)
PATH_GRID = np.logspace(-4, 4, 64)


class GainError(ValueError):
    pass


class InfeasibleError(GainError):
    pass


class ConstructionError(GainError):
    pass


@dataclass(frozen=True)
class GainMatrix:
    gamma: tuple
    gamma_u: tuple
    form: str = "max"

    def __post_init__(self):
        gamma = tuple(tuple(row) for row in self.gamma)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "gamma_u", tuple(self.gamma_u))
        n = len(gamma)
        if any(len(row) != n for row in gamma) or len(self.gamma_u) != n:
            raise GainError("gain matrix must be N x N with N input gains")
        if self.form not in ("max", "sum"):
            raise GainError(f"form must be 'max' or 'sum', got {self.form!r}")
        for i, row in enumerate(gamma):
            for j, g in enumerate(row):
                _require_class(g, FnClass.K, f"gamma[{i}][{j}]")
        for i, g in enumerate(self.gamma_u):
            _require_class(g, FnClass.K, f"gamma_u[{i}]")

    @classmethod
    def linear(cls, a, b=None, form: str = "max") -> "GainMatrix":
        a = np.asarray(a, dtype=float)
        b = np.zeros(len(a)) if b is None else np.asarray(b, dtype=float)
        gamma = [[lin(v) if v > 0 else ZERO for v in row] for row in a]
        return cls(gamma, [lin(v) if v > 0 else ZERO for v in b], form)

    @property
    def n(self) -> int:
        return len(self.gamma)

    @property
    def is_linear(self) -> bool:
        return all(is_zero(g) or g.is_linear for row in self.gamma for g in row)

    def coefficients(self) -> np.ndarray:
        if not self.is_linear:
            raise PreconditionError("gain matrix has nonlinear entries")
        return np.array([[0.0 if is_zero(g) else g.coef for g in row] for row in self.gamma])

    def input_coefficients(self) -> np.ndarray:
        if not all(is_zero(g) or g.is_linear for g in self.gamma_u):
            raise PreconditionError("input gains are not linear")
        return np.array([0.0 if is_zero(g) else g.coef for g in self.gamma_u])

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in range(self.n) if not is_zero(self.gamma[i][j])]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "form": self.form,
            "gamma": [[gain_to_json(g) for g in row] for row in self.gamma],
            "gamma_u": [gain_to_json(g) for g in self.gamma_u],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GainMatrix":
        gm = cls(
            [[parse_gain(v) for v in row] for row in data["gamma"]],
            [parse_gain(v) for v in data.get("gamma_u", [None] * len(data["gamma"]))],
            data.get("form", "max"),
        )
        if "n" in data and data["n"] != gm.n:
            raise GainError(f"declared n={data['n']} but matrix is {gm.n} x {gm.n}")
        return gm


def _require_class(g, claimed: FnClass, label: str) -> None:
    if is_zero(g):
        return
    report = check_class(g, claimed)
    if not report.passed:
        raise GainError(f"{label} = {g} fails {report.summary()}")


def apply(gm: GainMatrix, s) -> np.ndarray:
    """``[G(s)]_i = max_j gamma_ij(s_j)``; ``s`` has shape ``(N,)`` or ``(N, B)``."""
    s = np.asarray(s, dtype=float)
    if s.shape[0] != gm.n:
        raise GainError(f"expected {gm.n} components, got {s.shape[0]}")
    out = np.zeros_like(s)
    for i, row in enumerate(gm.gamma):
        for j, g in enumerate(row):
            if not is_zero(g):
                out[i] = np.maximum(out[i], evaluate(g, s[j]))
    return out


def iterate(gm: GainMatrix, s, k: int) -> np.ndarray:
    out = np.asarray(s, dtype=float)
    for _ in range(k):
        out = apply(gm, out)
    return out


# --------------------------------------------------------------------------
# cycles


def simple_cycles(edges: Sequence[tuple[int, int]], n: int) -> list[tuple[int, ...]]:
    """Every elementary cycle once, rooted at its smallest node."""
    succ: dict[int, list[int]] = {v: [] for v in range(n)}
    for i, j in edges:
        succ[i].append(j)
    cycles = []
    for root in range(n):
        stack = [(root, iter(sorted(succ[root])))]
        path = [root]
        on_path = {root}
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                on_path.discard(path.pop())
                continue
            if nxt == root:
                cycles.append(tuple(path))
            elif nxt > root and nxt not in on_path:
                path.append(nxt)
                on_path.add(nxt)
                stack.append((nxt, iter(sorted(succ[nxt]))))
    return cycles


def cycle_gain(gm: GainMatrix, cycle: Sequence[int]):
    """``gamma_{i0 i1} o gamma_{i1 i2} o ... o gamma_{ik i0}``."""
    nodes = list(cycle) + [cycle[0]]
    return compose_all(*[gm.gamma[a][b] for a, b in zip(nodes, nodes[1:])])


def _contraction_value(f) -> float:
    if isinstance(f, ScalarFn) and f.is_linear:
        return f.coef
    grid = VERIFY_GRID
    with np.errstate(all="ignore"):
        return float(np.max(np.asarray(evaluate(f, grid)) / grid))


@dataclass
class CycleReport:
    passed: bool
    cycles: list = field(default_factory=list)
    worst_cycle: tuple | None = None
    worst_value: float = 0.0
    method: str = "enumeration"

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "method": self.method,
            "cycles": [{"nodes": [i + 1 for i in c], "value": v} for c, v in self.cycles],
            "worst_cycle": None if self.worst_cycle is None else [i + 1 for i in self.worst_cycle],
            "worst_value": self.worst_value,
        }


def cycle_condition(gm: GainMatrix) -> CycleReport:
    """Every simple cycle composition must lie below ``(1 - EPS_SG) * id``."""
    if gm.n > CYCLE_ENUM_CAP:
        if gm.is_linear:
            mu = maxplus_radius(gm)
            return CycleReport(mu < 1 - EPS_SG, worst_value=mu, method="karp")
        sample = smallgain_sample_check(gm)
        return CycleReport(sample.passed, worst_cycle=None, worst_value=math.nan, method="sampling")
    cycles = []
    for c in simple_cycles(gm.edges(), gm.n):
        cycles.append((c, _contraction_value(cycle_gain(gm, c))))
    if not cycles:
        return CycleReport(True, [], None, 0.0)
    worst = max(cycles, key=lambda cv: cv[1])
    return CycleReport(worst[1] < 1 - EPS_SG, cycles, worst[0], worst[1])


# --------------------------------------------------------------------------
# diagonal operators


@dataclass(frozen=True)
class DiagonalOp:
    """``D = diag(d_1, ..., d_N)`` with ``d_i = id + delta_i``."""

    entries: tuple
    factors: tuple | None = None

    @classmethod
    def from_deltas(cls, deltas, factors=None) -> "DiagonalOp":
        entries = []
        for k, delta in enumerate(deltas):
            if is_zero(delta):
                entries.append(identity())
                continue
            d = ScalarFn("sum", args=(identity(), delta), declared=FnClass.KINF)
            if delta.is_linear:
                d = lin(1.0 + delta.coef)
            report = check_class(d, FnClass.KINF)
            if not report.passed:
                raise GainError(f"id + delta[{k}] is not increasing: {report.summary()}")
            entries.append(d)
        return cls(tuple(entries), factors)

    @classmethod
    def identity(cls, n: int) -> "DiagonalOp":
        return cls(tuple(identity() for _ in range(n)))

    @property
    def n(self) -> int:
        return len(self.entries)

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.shape[0] != self.n:
            raise GainError(f"expected {self.n} components, got {s.shape[0]}")
        return np.stack([evaluate(d, s[i]) for i, d in enumerate(self.entries)])

    def check(self, grid=None) -> dict:
        grid = VERIFY_GRID if grid is None else grid
        expanding = []
        for d in self.entries:
            with np.errstate(all="ignore"):
                vals = np.asarray(evaluate(d, grid))
            expanding.append(bool(np.all(vals > grid)) and check_class(d, FnClass.KINF).passed)
        out = {"expanding": expanding, "factor_match": None}
        if self.factors is not None:
            d1, d2 = self.factors
            s = np.tile(grid, (self.n, 1))
            with np.errstate(all="ignore"):
                lhs = d2(d1(s))
                rhs = self(s)
            out["factor_match"] = bool(np.all(np.abs(lhs - rhs) <= 1e-12 * np.maximum(1.0, np.abs(rhs))))
        return out


# --------------------------------------------------------------------------
# small-gain condition by sampling


@dataclass
class SampleReport:
    passed: bool
    samples: int
    seed: int
    witness: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "samples": self.samples,
            "seed": self.seed,
            "witness": None if self.witness is None else self.witness.tolist(),
        }


def _orthant_cloud(n: int, samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    radii = np.logspace(-4, 4, 17)
    basis = np.vstack([np.eye(n), np.ones((1, n)) / math.sqrt(n)])
    fixed = (basis[:, :, None] * radii[None, None, :]).transpose(1, 0, 2).reshape(n, -1)
    rest = max(samples - fixed.shape[1], 0)
    dirs = np.abs(rng.standard_normal((n, rest)))
    # half the cloud lives on random faces: witnesses often need zero components
    mask = rng.random((n, rest)) < 0.5
    mask[rng.integers(0, n, rest), np.arange(rest)] = True
    mask[:, : rest // 2] = True
    dirs *= mask
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    r = 10.0 ** rng.uniform(-4, 4, rest)
    return np.hstack([fixed, dirs * r])


def smallgain_sample_check(gm: GainMatrix, D: DiagonalOp | None = None,
                           samples: int = 100_000, seed: int = 0) -> SampleReport:
    """Search for ``s > 0`` with ``(D o G)(s) >= s`` componentwise."""
    s = _orthant_cloud(gm.n, samples, seed)
    img = apply(gm, s)
    if D is not None:
        img = D(img)
    decreases = np.any(img < (1 - EPS_SG) * s, axis=0)
    bad = np.flatnonzero(~decreases)
    witness = s[:, bad[0]].copy() if bad.size else None
    return SampleReport(not bad.size, s.shape[1], seed, witness)


# --------------------------------------------------------------------------
# max-plus spectral radius


def _karp_radius(a: np.ndarray) -> float:
    n = a.shape[0]
    with np.errstate(divide="ignore"):
        w = np.where(a > 0, -np.log(np.where(a > 0, a, 1.0)), np.inf)
    d = np.full((n + 1, n), np.inf)
    d[0] = 0.0
    for k in range(1, n + 1):
        d[k] = np.min(d[k - 1][:, None] + w, axis=0)
    best = np.inf
    for v in range(n):
        if not np.isfinite(d[n, v]):
            continue
        ks = [k for k in range(n) if np.isfinite(d[k, v])]
        best = min(best, max((d[n, v] - d[k, v]) / (n - k) for k in ks))
    return 0.0 if not np.isfinite(best) else math.exp(-best)


def _enumerated_radius(a: np.ndarray) -> float:
    n = a.shape[0]
    edges = [(i, j) for i in range(n) for j in range(n) if a[i, j] > 0]
    best = 0.0
    for c in simple_cycles(edges, n):
        nodes = list(c) + [c[0]]
        logs = sum(math.log(a[x, y]) for x, y in zip(nodes, nodes[1:]))
        best = max(best, math.exp(logs / len(c)))
    return best


def maxplus_radius(gm: GainMatrix | np.ndarray, enumerate_cycles: bool | None = None) -> float:
    """Largest geometric-mean cycle weight; Karp and enumeration must agree."""
    a = gm.coefficients() if isinstance(gm, GainMatrix) else np.asarray(gm, dtype=float)
    karp = _karp_radius(a)
    if enumerate_cycles is None:
        enumerate_cycles = a.shape[0] <= CYCLE_ENUM_CAP
    if enumerate_cycles:
        enum = _enumerated_radius(a)
        if abs(karp - enum) > 1e-12 * max(1.0, karp):
            raise ArithmeticError(f"Karp radius {karp!r} disagrees with enumeration {enum!r}")
    return karp


def maxplus_matvec(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.max(a * v[None, :], axis=1)


# --------------------------------------------------------------------------
# Omega-paths


@dataclass(frozen=True)
class OmegaPath:
    components: tuple
    margin: float = float("nan")
    lam: float | None = None

    @property
    def n(self) -> int:
        return len(self.components)

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return np.stack([np.asarray(evaluate(c, r) if isinstance(c, ScalarFn) else c(r), dtype=float)
                         for c in self.components])

    @property
    def inverses(self) -> tuple:
        return tuple(invert(c) for c in self.components)

    @property
    def is_linear(self) -> bool:
        return all(isinstance(c, ScalarFn) and c.is_linear for c in self.components)

    def coefficients(self) -> np.ndarray:
        if not self.is_linear:
            raise PreconditionError("path is not linear")
        return np.array([c.coef for c in self.components])

    def to_dict(self) -> dict:
        return {"components": [str(c) for c in self.components], "margin": self.margin}

    @classmethod
    def from_dict(cls, data: dict) -> "OmegaPath":
        comps = tuple(parse_gain(c) for c in data["components"])
        return cls(comps, float(data.get("margin", float("nan"))))

    @classmethod
    def linear(cls, coefs) -> "OmegaPath":
        return cls(tuple(lin(c) for c in coefs))


@dataclass
class PathReport:
    passed: bool
    margin: float
    worst_r: float
    worst_component: int
    gamma_at_one: np.ndarray
    class_reports: list

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "margin": self.margin,
            "worst_r": self.worst_r,
            "worst_component": self.worst_component + 1,
            "gamma_at_one": self.gamma_at_one.tolist(),
            "class_checks": [r.summary() for r in self.class_reports],
        }


def verify_omega_path(gm: GainMatrix, path: OmegaPath, D: DiagonalOp | None = None,
                      order: str = "outer", grid=None) -> PathReport:
    """Check ``G(sigma(r)) < sigma(r)`` on a log grid.

    With ``D`` the operator is ``D o G`` (``order="outer"``), ``G o D``
    (``"inner"``) or ``D1 o G o D2`` for a factor pair (``"split"``).
    """
    if path.n != gm.n:
        raise GainError(f"path has {path.n} components, gains have {gm.n}")
    grid = VERIFY_GRID if grid is None else np.asarray(grid, dtype=float)
    reports = [check_class(c if isinstance(c, ScalarFn) else c, FnClass.KINF) for c in path.components]

    if order not in ("outer", "inner", "split"):
        raise ValueError(f"order must be outer, inner or split, got {order!r}")
    if D is not None and order == "split" and D.factors is None:
        raise PreconditionError("split order needs a factor pair D = D2 o D1")

    def op(s):
        if D is None:
            return apply(gm, s)
        if order == "outer":
            return D(apply(gm, s))
        if order == "inner":
            return apply(gm, D(s))
        d1, d2 = D.factors
        return d1(apply(gm, d2(s)))

    with np.errstate(all="ignore"):
        s = path(grid)
        rel = (s - op(s)) / s
        rel = np.where(np.isnan(rel), -np.inf, rel)
    idx = np.unravel_index(np.argmin(rel), rel.shape)
    margin = float(rel[idx])
    at_one = op(path(np.ones(1)))[:, 0]
    passed = all(r.passed for r in reports) and margin > EPS_SG
    return PathReport(passed, margin, float(grid[idx[1]]), int(idx[0]), at_one, reports)


def omega_path_linear(gm: GainMatrix, lam: float | None = None) -> OmegaPath:
    """Linear path ``sigma_i(r) = s_i r`` from the max-plus Kleene star of ``A/lam``."""
    a = gm.coefficients()
    mu = maxplus_radius(a)
    if mu >= 1:
        raise InfeasibleError(f"max-plus spectral radius {mu:.6g} >= 1; no linear Omega-path")
    if lam is None:
        lam = (1.0 + mu) / 2.0
    if not (mu < lam < 1):
        raise GainError(f"lambda must lie in ({mu:.6g}, 1), got {lam}")
    b = a / lam
    s = np.ones(gm.n)
    term = s.copy()
    for _ in range(gm.n - 1):
        term = maxplus_matvec(b, term)
        s = np.maximum(s, term)
    path = OmegaPath.linear(s)
    report = verify_omega_path(gm, path)
    if not report.passed:
        raise ConstructionError(f"Kleene-star path failed verification (margin {report.margin:.3g})")
    return OmegaPath(path.components, report.margin, lam)


_THETAS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999, 1 - 1e-6)


def _fixed_point(gm: GainMatrix, r: np.ndarray, theta: float, cap: int = 20_000):
    s = np.tile(r, (gm.n, 1))
    for _ in range(cap):
        new = np.maximum(np.tile(r, (gm.n, 1)), apply(gm, s) / theta)
        if np.all(new == s):
            return s, None
        if not np.all(np.isfinite(new)):
            break
        s = new
    stalled = np.flatnonzero(np.any(~np.isfinite(s) | (s > 1e12 * r), axis=0))
    return None, (float(r[stalled[0]]) if stalled.size else float(r[-1]))


def omega_path_grid(gm: GainMatrix, r_grid=None) -> OmegaPath:
    """Nonlinear Omega-path from per-point fixed points ``s = max(r*1, G(s)/theta)``."""
    if not cycle_condition(gm).passed:
        raise PreconditionError("cycle condition fails; no Omega-path exists")
    r = PATH_GRID if r_grid is None else np.asarray(r_grid, dtype=float)
    thetas = ((1.0 + maxplus_radius(gm)) / 2.0,) if gm.is_linear else _THETAS
    where = None
    for theta in thetas:
        s, where = _fixed_point(gm, r, theta)
        if s is not None:
            break
    else:
        raise ConstructionError(f"fixed-point iteration stalled at r={where:.3g}")
    # upward projection keeps every component strictly increasing in r
    for k in range(1, s.shape[1]):
        s[:, k] = np.maximum(s[:, k], s[:, k - 1] * (1 + 1e-12))
    comps = []
    for row in s:
        ratios = row / r
        if np.allclose(ratios, ratios[0], rtol=1e-13, atol=0):
            comps.append(lin(ratios[0]))
        else:
            comps.append(loglog(r, row))
    path = OmegaPath(tuple(comps))
    report = verify_omega_path(gm, path)
    if not report.passed:
        raise ConstructionError(
            f"grid path failed verification at r={report.worst_r:.3g} (margin {report.margin:.3g})")
    return OmegaPath(path.components, report.margin, theta)


def check_alphahat(path: OmegaPath, D: DiagonalOp, which: str = "full") -> dict:
    """``s - sigma_i^-1(d_i^-1(sigma_i(s)))`` must be K-infinity for every block."""
    if which == "full":
        entries = D.entries
    elif which == "factor":
        if D.factors is None:
            raise PreconditionError("diagonal operator has no factor pair")
        entries = D.factors[1].entries
    else:
        raise ValueError(f"which must be 'full' or 'factor', got {which!r}")
    if len(entries) != path.n:
        raise GainError("path and diagonal operator differ in dimension")
    reports: list[ClassReport] = []
    for sig, d in zip(path.components, entries):
        shrink = compose_all(invert(sig), invert(d), sig)

        def gap_fn(s, shrink=shrink):
            s = np.asarray(s, dtype=float)
            return s - np.asarray(evaluate(shrink, s))

        reports.append(check_class(gap_fn, FnClass.KINF))
    return {"pass": all(r.passed for r in reports), "reports": reports}


def conjugated_coefficients(gm: GainMatrix, path: OmegaPath) -> np.ndarray:
    """``sigma_i^-1 o gamma_ij o sigma_j`` coefficients for linear data."""
    a = gm.coefficients()
    s = path.coefficients()
    return a * s[None, :] / s[:, None]


__all__ = [
    "EPS_SG", "GainError", "InfeasibleError", "ConstructionError", "GainMatrix", "apply",
    "iterate", "simple_cycles", "cycle_gain", "CycleReport", "cycle_condition", "DiagonalOp",
    "SampleReport", "smallgain_sample_check", "maxplus_radius", "maxplus_matvec", "OmegaPath",
    "PathReport", "verify_omega_path", "conjugated_coefficients", "omega_path_linear", "omega_path_grid", "check_alphahat",
]
