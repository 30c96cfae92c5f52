"""Discrete-time systems ``x(k+1) = G(x(k), u(k))`` given by update expressions.

States are column-major batches: a state cloud has shape ``(n, B)`` and an input
sequence has shape ``(horizon, m, B)``; unbatched calls drop the last axis.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from ._expr import ExprError, compile_expr, referenced_names
from .scalarfun import FnClass, ScalarFn, evaluate, invert

NORMS = ("inf", "1", "2")
G0_TOL = 1e-12


class ModelError(ValueError):
    """Invalid system definition."""


def vec_norm(x, norm: str = "inf") -> np.ndarray:
    """Norm along axis 0."""
    x = np.asarray(x, dtype=float)
    if norm == "inf":
        return np.max(np.abs(x), axis=0) if x.shape[0] else np.zeros(x.shape[1:])
    if norm == "1":
        return np.sum(np.abs(x), axis=0)
    if norm == "2":
        return np.sqrt(np.sum(x * x, axis=0))
    raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")


def block_slices(blocks: Sequence[int]) -> list[slice]:
    out, start = [], 0
    for size in blocks:
        out.append(slice(start, start + size))
        start += size
    return out


def block_norms(x, blocks: Sequence[int], norm: str = "inf") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.stack([vec_norm(x[sl], norm) for sl in block_slices(blocks)])


def input_sup(u, norm: str = "inf") -> np.ndarray:
    """``sup_k |u(k)|`` for a sequence of shape ``(horizon, m[, B])``."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] == 0:
        return np.zeros(u.shape[2:]) if u.ndim == 3 else 0.0
    return np.max(np.stack([vec_norm(uk, norm) for uk in u]), axis=0)


@dataclass(frozen=True)
class SystemModel:
    name: str
    n: int
    m: int
    blocks: tuple
    update: tuple
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "update", tuple(self.update))
        blocks = tuple(self.blocks) if self.blocks else (self.n,)
        object.__setattr__(self, "blocks", blocks)
        if len(self.update) != self.n:
            raise ModelError(f"{self.name}: {len(self.update)} update expressions for n={self.n}")
        if sum(blocks) != self.n or any(b <= 0 for b in blocks):
            raise ModelError(f"{self.name}: blocks {blocks} do not partition n={self.n}")
        allowed = set(self.variables)
        for i, text in enumerate(self.update):
            try:
                names = referenced_names(text)
                compile_expr(text, self.variables)
            except ExprError as exc:
                raise ModelError(f"{self.name}: update[{i + 1}]: {exc}") from None
            extra = names - allowed
            if extra:
                raise ModelError(f"{self.name}: update[{i + 1}] uses undeclared {sorted(extra)}")
        at_origin = self.step(np.zeros(self.n), np.zeros(self.m))
        if np.max(np.abs(at_origin), initial=0.0) > G0_TOL:
            raise ModelError(f"{self.name}: G(0, 0) = {at_origin.tolist()} is not the origin")

    @property
    def variables(self) -> tuple:
        return tuple(f"x{i + 1}" for i in range(self.n)) + tuple(f"u{j + 1}" for j in range(self.m))

    @property
    def nblocks(self) -> int:
        return len(self.blocks)

    def step(self, x, u) -> np.ndarray:
        """One application of ``G``; batched over a trailing axis."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[0] != self.n or u.shape[0] != self.m:
            raise ModelError(f"{self.name}: expected x in R^{self.n}, u in R^{self.m}")
        shape = np.broadcast_shapes(x.shape[1:], u.shape[1:])
        env = {f"x{i + 1}": x[i] for i in range(self.n)}
        env.update({f"u{j + 1}": u[j] for j in range(self.m)})
        out = np.empty((self.n,) + shape)
        with np.errstate(over="ignore", invalid="ignore"):
            for i, text in enumerate(self.update):
                out[i] = compile_expr(text, self.variables)(env)
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "n": self.n, "m": self.m, "blocks": list(self.blocks),
                "update": list(self.update), "description": self.description}

    @classmethod
    def from_dict(cls, data: dict) -> "SystemModel":
        missing = {"n", "m", "update"} - set(data)
        if missing:
            raise ModelError(f"system file lacks {sorted(missing)}")
        return cls(data.get("name", "system"), int(data["n"]), int(data["m"]),
                   tuple(data.get("blocks") or (int(data["n"]),)), tuple(data["update"]),
                   data.get("description", ""))

    def with_blocks(self, blocks: Sequence[int]) -> "SystemModel":
        return SystemModel(self.name, self.n, self.m, tuple(blocks), self.update, self.description)


# --------------------------------------------------------------------------
# inputs and simulation


@dataclass(frozen=True)
class InputSignal:
    kind: str = "zero"
    value: tuple | None = None
    bound: float = 1.0
    seed: int = 0

    def sequence(self, horizon: int, m: int) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros((horizon, m))
        if self.kind == "constant":
            v = np.asarray(self.value, dtype=float).reshape(m)
            return np.tile(v, (horizon, 1))
        if self.kind == "random":
            rng = np.random.default_rng(self.seed)
            return rng.uniform(-self.bound, self.bound, (horizon, m))
        if self.kind == "explicit":
            seq = np.asarray(self.value, dtype=float).reshape(-1, m)
            if len(seq) < horizon:
                raise ValueError(f"explicit input has {len(seq)} samples, horizon is {horizon}")
            return seq[:horizon]
        raise ValueError(f"unknown input kind {self.kind!r}")


@dataclass
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray

    @property
    def last(self) -> np.ndarray:
        return self.states[-1]

    def prefix(self, j: int) -> "Trajectory":
        return Trajectory(self.states[: j + 1], self.inputs[:j])

    def to_csv(self) -> str:
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.ndim == 2 else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)])
        for k, x in enumerate(self.states):
            u = [repr(float(v)) for v in self.inputs[k]] if k < len(self.inputs) else [""] * m
            w.writerow([k] + [repr(float(v)) for v in x] + u)
        return buf.getvalue()


def simulate(sys: SystemModel, x0, u, k: int) -> Trajectory:
    if k < 0:
        raise ValueError("horizon must be nonnegative")
    seq = u.sequence(k, sys.m) if isinstance(u, InputSignal) else np.asarray(u, dtype=float)[:k]
    if len(seq) < k:
        raise ValueError(f"input sequence shorter than horizon {k}")
    x = np.asarray(x0, dtype=float).reshape(sys.n)
    states = [x]
    for j in range(k):
        x = sys.step(x, seq[j])
        states.append(x)
    return Trajectory(np.array(states), np.asarray(seq, dtype=float).reshape(k, sys.m))


def simulate_batch(sys: SystemModel, x0, u, k: int | None = None, keep: bool = False):
    """Run a cloud forward; ``u`` has shape ``(horizon, m, B)``.  Returns the
    final states or, with ``keep``, all states stacked as ``(k+1, n, B)``."""
    x = np.asarray(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    k = u.shape[0] if k is None else k
    hist = [x]
    for j in range(k):
        x = sys.step(x, u[j])
        if keep:
            hist.append(x)
    return np.stack(hist) if keep else x


@dataclass(frozen=True)
class MIterate:
    """The system whose single step is ``M`` steps of ``sys``."""

    sys: SystemModel
    M: int

    def step(self, x, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape[0] != self.M:
            raise ValueError(f"M-iterate step needs {self.M} inputs, got {w.shape[0]}")
        x = np.asarray(x, dtype=float)
        for j in range(self.M):
            x = self.sys.step(x, w[j])
        return x


def m_iterate(sys: SystemModel, M: int) -> MIterate:
    if M < 1:
        raise ValueError("M must be at least 1")
    return MIterate(sys, int(M))


# --------------------------------------------------------------------------
# sample clouds


@dataclass(frozen=True)
class CloudConfig:
    samples: int = 100_000
    seed: int = 0
    radius_min: float = 1e-3
    radius_max: float = 1e3
    input_max: float = 1.0
    norm: str = "inf"
    inflate: float = 0.02

    def reseeded(self, offset: int = 1) -> "CloudConfig":
        return CloudConfig(**{**asdict(self), "seed": self.seed + offset})

    def resized(self, samples: int) -> "CloudConfig":
        return CloudConfig(**{**asdict(self), "samples": int(samples)})

    def to_dict(self) -> dict:
        return asdict(self)


def unit_directions(n: int, count: int, norm: str, rng: np.random.Generator) -> np.ndarray:
    """``count`` directions on the unit sphere of ``norm`` in R^n."""
    if count <= 0 or n == 0:
        return np.zeros((n, max(count, 0)))
    if norm == "inf":
        v = rng.uniform(-1.0, 1.0, (n, count))
        face = rng.integers(0, n, count)
        v[face, np.arange(count)] = rng.choice([-1.0, 1.0], count)
        return v
    if norm == "1":
        v = rng.laplace(size=(n, count))
    else:
        v = rng.standard_normal((n, count))
    return v / vec_norm(v, norm)[None, :]


def structured_states(n: int, blocks: Sequence[int], norm: str, radii: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """Axes, sign corners, the all-ones point and single-block points at each radius."""
    dirs = [np.eye(n), -np.eye(n)]
    if n <= 10:
        corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T
        dirs.append(corners)
    else:
        dirs.append(np.ones((1, n)))
    for sl in block_slices(blocks):
        size = sl.stop - sl.start
        sub = unit_directions(size, 4, norm, rng)
        pts = np.zeros((4, n))
        pts[:, sl] = sub.T
        dirs.append(pts)
    d = np.vstack(dirs).T
    d = d / vec_norm(d, norm)[None, :]
    return (d[:, :, None] * radii[None, None, :]).reshape(n, -1)


def state_cloud(n: int, blocks: Sequence[int], cfg: CloudConfig, count: int,
                rng: np.random.Generator, structured: bool = True) -> np.ndarray:
    lo, hi = math.log10(cfg.radius_min), math.log10(cfg.radius_max)
    fixed = np.zeros((n, 0))
    if structured:
        radii = np.logspace(lo, hi, int(round(hi - lo)) + 1)
        fixed = structured_states(n, blocks, cfg.norm, radii, rng)
    rest = max(count - fixed.shape[1], 0)
    r = 10.0 ** rng.uniform(lo, hi, rest)
    cloud = np.hstack([fixed, unit_directions(n, rest, cfg.norm, rng) * r])
    return cloud[:, :count] if cloud.shape[1] > count else cloud


def input_cloud(horizon: int, m: int, count: int, cfg: CloudConfig,
                rng: np.random.Generator) -> np.ndarray:
    """Three families in equal share: constant, random, bang-bang.

    Magnitudes are log-uniform in ``[1e-3, 1] * input_max`` with one in eight
    pinned at ``input_max``.
    """
    if count == 0 or horizon == 0:
        return np.zeros((horizon, m, count))
    mag = cfg.input_max * 10.0 ** rng.uniform(-3, 0, count)
    mag[rng.random(count) < 0.125] = cfg.input_max
    family = np.arange(count) % 3
    u = np.empty((horizon, m, count))
    const = unit_directions(m, count, cfg.norm, rng)
    u[:] = const[None, :, :]
    rand = rng.uniform(-1.0, 1.0, (horizon, m, count))
    bang = rng.choice([-1.0, 1.0], (horizon, m, count))
    u = np.where(family == 1, rand, u)
    u = np.where(family == 2, bang, u)
    sup = input_sup(u, cfg.norm)
    sup = np.where(sup > 0, sup, 1.0)
    return u * (mag / sup)[None, None, :]


def joint_cloud(sys: SystemModel, horizon: int, cfg: CloudConfig, blocks=None):
    """State/input pairs: ~40% zero input, ~10% zero state, the rest mixed."""
    blocks = sys.blocks if blocks is None else blocks
    rng = np.random.default_rng(cfg.seed)
    total = cfg.samples
    n_free = int(round(0.4 * total))
    n_forced = int(round(0.1 * total))
    n_mixed = total - n_free - n_forced
    x_free = state_cloud(sys.n, blocks, cfg, n_free, rng)
    x_mixed = state_cloud(sys.n, blocks, cfg, n_mixed, rng)
    x = np.hstack([x_free, np.zeros((sys.n, n_forced)), x_mixed])
    u = np.concatenate([
        np.zeros((horizon, sys.m, x_free.shape[1])),
        input_cloud(horizon, sys.m, n_forced, cfg, rng),
        input_cloud(horizon, sys.m, x_mixed.shape[1], cfg, rng),
    ], axis=2)
    return x, u


# --------------------------------------------------------------------------
# global K-bound


@dataclass
class KBound:
    w1: float
    w2: float
    norm: str = "inf"
    evidence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"w1": self.w1, "w2": self.w2, "norm": self.norm, "evidence": self.evidence}


def fit_linear_envelope(features: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Minimal-sum nonnegative ``c`` with ``features.T @ c >= target`` on every sample.

    Constraints are scaled per sample so the LP stays well conditioned across
    radii spanning many decades.
    """
    feats = np.asarray(features, dtype=float)
    target = np.asarray(target, dtype=float)
    scale = np.sum(feats, axis=0) + target
    keep = scale > 0
    feats, target, scale = feats[:, keep], target[keep], scale[keep]
    k = feats.shape[0]
    if target.size == 0 or not np.any(target > 0):
        return np.zeros(k)
    # an unreachable target (positive output with all-zero features) has no bound
    if np.any((np.sum(feats, axis=0) == 0) & (target > 0)):
        raise ArithmeticError("output is nonzero where every regressor vanishes")
    a_ub = -(feats / scale).T
    b_ub = -(target / scale)
    res = linprog(np.ones(k), A_ub=a_ub, b_ub=b_ub, bounds=[(0, None)] * k, method="highs")
    if res.status != 0:
        raise ArithmeticError(f"envelope LP failed: {res.message}")
    coef = np.maximum(res.x, 0.0)
    # solver tolerances can leave tiny violations; rescale until every sample
    # holds with room for k-term rounding in any summation order
    need = target * (1 + 2 * k * np.finfo(float).eps)
    for _ in range(8):
        fitted = feats.T @ coef
        short = (need > fitted) & (fitted > 0)
        if not short.any():
            break
        coef = coef * (float(np.max(need[short] / fitted[short])) * (1 + 4 * np.finfo(float).eps))
    return coef


def estimate_kbound(sys: SystemModel, norm: str = "inf", cfg: CloudConfig | None = None) -> KBound:
    """Linear ``|G(x, u)| <= w1 |x| + w2 |u|`` fitted on a one-step cloud."""
    cfg = CloudConfig(norm=norm) if cfg is None else CloudConfig(**{**asdict(cfg), "norm": norm})
    x, u = joint_cloud(sys, 1, cfg)
    y = vec_norm(sys.step(x, u[0]), norm)
    a = vec_norm(x, norm)
    b = input_sup(u, norm)
    if not np.all(np.isfinite(y)):
        raise ArithmeticError(f"{sys.name}: non-finite successor states in the cloud")
    w1, w2 = fit_linear_envelope(np.vstack([a, b]), y) * (1.0 + cfg.inflate)
    free = (b == 0) & (a > 0)
    ratios = y[free] / a[free]
    radii = a[free]
    bins = np.logspace(math.log10(cfg.radius_min), math.log10(cfg.radius_max), 7)
    idx = np.digitize(radii, bins)
    per_bin = [float(np.max(ratios[idx == k])) for k in range(1, len(bins)) if np.any(idx == k)]
    growing = len(per_bin) > 2 and all(q > 1.5 * p for p, q in zip(per_bin, per_bin[1:]))
    if growing:
        warnings.warn(f"{sys.name}: |G(x,0)|/|x| grows with |x|; no linear K-bound is plausible",
                      RuntimeWarning, stacklevel=2)
    slack = w1 * a + w2 * b - y
    return KBound(float(w1), float(w2), norm, {
        "samples": int(x.shape[1]), "seed": cfg.seed, "radius": cfg.radius_max,
        "min_slack": float(np.min(slack)), "growth_warning": growing,
    })


def trajectory_bounds(kb: KBound, j: int) -> tuple[float, float]:
    """Coefficients of ``|x(j)| <= w1^j |x0| + w2 * sum_{i<j} w1^i * |u|``."""
    if j < 0:
        raise ValueError("j must be nonnegative")
    return kb.w1 ** j, kb.w2 * sum(kb.w1 ** i for i in range(j))


def check_trajectory_bound(sys: SystemModel, kb: KBound, j: int, cfg: CloudConfig | None = None) -> dict:
    cfg = CloudConfig(norm=kb.norm) if cfg is None else cfg
    theta, zeta = trajectory_bounds(kb, j)
    x0, u = joint_cloud(sys, j, cfg)
    xj = simulate_batch(sys, x0, u, j)
    lhs = vec_norm(xj, kb.norm)
    rhs = theta * vec_norm(x0, kb.norm) + zeta * input_sup(u, kb.norm)
    slack = rhs - lhs
    bad = slack < -1e-12 * np.maximum(1.0, rhs)
    worst = int(np.argmin(slack))
    return {
        "pass": not bad.any(), "j": j, "violations": int(bad.sum()), "samples": int(x0.shape[1]),
        "worst_slack": float(slack[worst]), "witness": x0[:, worst].tolist(),
    }


# --------------------------------------------------------------------------
# change of coordinates T(x) = phi(|x|) x / |x|


@dataclass(frozen=True)
class TransformedSystem:
    sys: SystemModel
    phi: ScalarFn
    norm: str = "2"

    def forward(self, x) -> np.ndarray:
        return _radial(x, self.phi, self.norm)

    def backward(self, z) -> np.ndarray:
        return _radial(z, invert(self.phi), self.norm)

    def step(self, z, u) -> np.ndarray:
        return self.forward(self.sys.step(self.backward(z), u))


def _radial(x, f: ScalarFn, norm: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r = vec_norm(x, norm)
    safe = np.where(r > 0, r, 1.0)
    scale = np.where(r > 0, np.asarray(evaluate(f, r)) / safe, 0.0)
    return x * scale


def coordinate_transform(sys: SystemModel, phi: ScalarFn, norm: str = "2") -> TransformedSystem:
    if phi.declared not in (FnClass.KINF, FnClass.LINEAR):
        raise ValueError("phi must be K-infinity")
    return TransformedSystem(sys, phi, norm)
