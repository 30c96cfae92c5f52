"""Comparison functions: construction, evaluation, composition, inversion.

A :class:`ScalarFn` is an immutable expression tree over one nonnegative
variable ``s``.  Every node kind maps 0 to 0, so ``f(0) == 0`` holds by
construction.  The zero function is the separate sentinel :data:`ZERO`; it is
accepted where gains may vanish but never carries a comparison class.

Textual form (prefix, whitespace-insensitive)::

    lin 0.89                      c*s
    id                            s
    pow 2                         s**p
    sq_over_1p                    s**2/(1+s**2)
    expm1 | log1p                 exp(s)-1 | log(1+s)
    sum(f, g, ...)                pointwise sum
    max(f, ...) | min(f, ...)     pointwise max / min
    comp(f, g)                    f o g
    inv(f)                        numeric inverse of f
    expr:Kinf{ s*(1 - exp(-s)) }  arithmetic in ``s`` with a declared class
    phi(2, lin 4)                 solution of phi(h(s)) = 2 phi(s)
    loglog[r1 s1; r2 s2; ...]     log-log interpolation through knots
    0                             the zero sentinel
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from ._expr import compile_expr

# Class-checking grid and thresholds.
CHECK_GRID = np.logspace(-8, 8, 256)
UNBOUNDED_PROBE = 1e8
UNBOUNDED_LEVEL = 1e4
TOL_INV = 1e-10
TOL_FE = 1e-8
EXPAND_FACTOR = 4.0
EXPAND_CAP = 200
TIE_ULPS = 4


class ScalarFnError(ValueError):
    """Base error for comparison-function operations."""


class DomainError(ScalarFnError):
    pass


class ClassError(ScalarFnError):
    pass


class NonConvergenceError(ScalarFnError):
    pass


class PreconditionError(ScalarFnError):
    pass


class FnClass(str, Enum):
    K = "K"
    KINF = "Kinf"
    POSDEF = "PosDef"
    LINEAR = "Linear"


_KLIKE = (FnClass.K, FnClass.KINF, FnClass.LINEAR)
_UNBOUNDED = (FnClass.KINF, FnClass.LINEAR)


class _Zero:
    """The zero function ``s -> 0`` (sentinel, not a comparison function)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        return float(out) if out.ndim == 0 else out

    def __repr__(self):
        return "ZERO"

    def __str__(self):
        return "0"

    def __reduce__(self):
        return (_Zero, ())


ZERO = _Zero()
Gain = Union["ScalarFn", _Zero]


def is_zero(f) -> bool:
    return f is ZERO


@dataclass(frozen=True)
class ScalarFn:
    kind: str
    args: tuple = ()
    params: tuple = ()
    declared: FnClass = FnClass.KINF

    def __call__(self, s):
        return evaluate(self, s)

    def __str__(self):
        return to_text(self)

    @property
    def is_linear(self) -> bool:
        return self.kind == "lin"

    @property
    def coef(self) -> float:
        if self.kind != "lin":
            raise ClassError(f"{to_text(self)} is not linear")
        return self.params[0]


# --------------------------------------------------------------------------
# constructors


def lin(c: float) -> ScalarFn:
    c = float(c)
    if not c > 0 or not math.isfinite(c):
        raise ClassError(f"linear coefficient must be positive and finite, got {c}")
    return ScalarFn("lin", params=(c,), declared=FnClass.LINEAR)


def identity() -> ScalarFn:
    return lin(1.0)


def power(p: float) -> ScalarFn:
    p = float(p)
    if not p > 0:
        raise ClassError(f"power exponent must be positive, got {p}")
    if p == 1.0:
        return identity()
    return ScalarFn("pow", params=(p,), declared=FnClass.KINF)


def sq_over_1p() -> ScalarFn:
    return ScalarFn("sq_over_1p", declared=FnClass.K)


def expm1() -> ScalarFn:
    return ScalarFn("expm1", declared=FnClass.KINF)


def log1p() -> ScalarFn:
    return ScalarFn("log1p", declared=FnClass.KINF)


def from_expr(text: str, declared: FnClass | str = FnClass.KINF) -> ScalarFn:
    """Scalar function given by arithmetic in the variable ``s``.

    The node must vanish at zero; the declared class is trusted until
    :func:`check_class` is run on it.
    """
    declared = FnClass(declared)
    text = " ".join(text.split())
    fn = compile_expr(text, ("s",))
    at_zero = np.asarray(fn({"s": np.zeros(1)}), dtype=float).reshape(-1)[0]
    if at_zero != 0.0:
        raise ScalarFnError(f"expr{{{text}}} does not vanish at 0")
    return ScalarFn("expr", params=(text,), declared=declared)


def _join_class(fs: Sequence[ScalarFn], rule: str) -> FnClass:
    classes = [f.declared for f in fs]
    if any(c == FnClass.POSDEF for c in classes):
        return FnClass.POSDEF
    if rule == "any" and any(c in _UNBOUNDED for c in classes):
        return FnClass.KINF
    if rule == "all" and all(c in _UNBOUNDED for c in classes):
        return FnClass.KINF
    return FnClass.K


def _nonzero(fs: Iterable) -> list:
    fs = list(fs)
    if not fs:
        raise ScalarFnError("empty function list")
    return [f for f in fs if not is_zero(f)]


def add(*fs: Gain) -> Gain:
    """Pointwise sum; linear summands collapse to one linear node."""
    parts = _nonzero(fs)
    if not parts:
        return ZERO
    if len(parts) == 1:
        return parts[0]
    if all(f.is_linear for f in parts):
        return lin(sum(f.coef for f in parts))
    return ScalarFn("sum", args=tuple(parts), declared=_join_class(parts, "any"))


def pointwise_max(fs: Sequence[Gain]) -> Gain:
    parts = _nonzero(fs)
    if not parts:
        return ZERO
    if len(parts) == 1:
        return parts[0]
    if all(f.is_linear for f in parts):
        return lin(max(f.coef for f in parts))
    return ScalarFn("max", args=tuple(parts), declared=_join_class(parts, "any"))


def pointwise_min(fs: Sequence[Gain]) -> Gain:
    fs = list(fs)
    if not fs:
        raise ScalarFnError("empty function list")
    if any(is_zero(f) for f in fs):
        return ZERO
    if len(fs) == 1:
        return fs[0]
    if all(f.is_linear for f in fs):
        return lin(min(f.coef for f in fs))
    return ScalarFn("min", args=tuple(fs), declared=_join_class(fs, "all"))


def compose(f: Gain, g: Gain) -> Gain:
    """``f o g``.  Both arguments must be of class K (or zero)."""
    if is_zero(f) or is_zero(g):
        return ZERO
    for h in (f, g):
        if h.declared not in _KLIKE:
            raise ClassError(f"cannot compose {h.declared.value} function {to_text(h)}")
    if f.is_linear and g.is_linear:
        return lin(f.coef * g.coef)
    if f.is_linear and f.coef == 1.0:
        return g
    if g.is_linear and g.coef == 1.0:
        return f
    declared = FnClass.KINF if (f.declared in _UNBOUNDED and g.declared in _UNBOUNDED) else FnClass.K
    return ScalarFn("comp", args=(f, g), declared=declared)


def compose_all(*fs: Gain) -> Gain:
    """``f1 o f2 o ... o fn``."""
    out = fs[-1]
    for f in reversed(fs[:-1]):
        out = compose(f, out)
    return out


def scale(c: float, f: Gain) -> Gain:
    return compose(lin(c), f)


def invert(f: ScalarFn) -> ScalarFn:
    """Inverse of a K-infinity function; exact where the tree allows it."""
    if is_zero(f) or f.declared not in _UNBOUNDED:
        raise ClassError(f"only K-infinity functions are invertible, got {f!s}")
    if f.kind == "lin":
        return lin(1.0 / f.coef)
    if f.kind == "pow":
        return power(1.0 / f.params[0])
    if f.kind == "expm1":
        return log1p()
    if f.kind == "log1p":
        return expm1()
    if f.kind == "inv":
        return f.args[0]
    if f.kind == "comp":
        outer, inner = f.args
        return compose(invert(inner), invert(outer))
    return ScalarFn("inv", args=(f,), declared=FnClass.KINF)


# --------------------------------------------------------------------------
# evaluation


def evaluate(f: Gain, s):
    """Evaluate ``f`` at ``s`` (scalar or array), with ``s >= 0`` required."""
    arr = np.asarray(s, dtype=float)
    if np.any(arr < 0):
        raise DomainError("comparison functions are defined on s >= 0 only")
    if is_zero(f):
        out = np.zeros_like(arr)
    else:
        # large arguments may overflow to inf, which is the right limit here
        with np.errstate(over="ignore"):
            out = _ev(f, arr)
    return float(out) if np.ndim(out) == 0 else out


def _ev(f: ScalarFn, s: np.ndarray) -> np.ndarray:
    k = f.kind
    if k == "lin":
        return f.params[0] * s
    if k == "pow":
        return np.power(s, f.params[0])
    if k == "sq_over_1p":
        s2 = s * s
        with np.errstate(invalid="ignore"):
            out = s2 / (1.0 + s2)
        return np.where(np.isinf(s), 1.0, out)
    if k == "expm1":
        with np.errstate(over="ignore"):
            return np.expm1(s)
    if k == "log1p":
        return np.log1p(s)
    if k == "sum":
        acc = _ev(f.args[0], s)
        for g in f.args[1:]:
            acc = acc + _ev(g, s)
        return acc
    if k == "max":
        acc = _ev(f.args[0], s)
        for g in f.args[1:]:
            acc = np.maximum(acc, _ev(g, s))
        return acc
    if k == "min":
        acc = _ev(f.args[0], s)
        for g in f.args[1:]:
            acc = np.minimum(acc, _ev(g, s))
        return acc
    if k == "comp":
        return _ev(f.args[0], _ev(f.args[1], s))
    if k == "inv":
        return _inverse_values(f.args[0], s)
    if k == "expr":
        fn = compile_expr(f.params[0], ("s",))
        with np.errstate(over="ignore", invalid="ignore"):
            out = fn({"s": s})
        return np.broadcast_to(np.asarray(out, dtype=float), s.shape).copy()
    if k == "phi":
        return _phi_values(f.args[0], f.params[0], s)
    if k == "loglog":
        return _loglog_values(f.params[0], f.params[1], s)
    raise ScalarFnError(f"unknown node kind {k!r}")


def _expand(f: ScalarFn, t: np.ndarray, up: bool) -> np.ndarray:
    """Move from ``t`` until ``f`` crosses ``t``; the step grows by squaring."""
    x = t.copy()
    step = np.full_like(t, EXPAND_FACTOR)
    for _ in range(EXPAND_CAP):
        with np.errstate(over="ignore"):
            fx = _ev(f, x)
        bad = fx < t if up else fx > t
        if not bad.any():
            return x
        x = np.where(bad, x * step if up else x / step, x)
        step = np.where(bad, np.minimum(step * step, 1e16), step)
    side = "above" if up else "below"
    raise NonConvergenceError(f"cannot bracket inverse of {to_text(f)} from {side}")


def _inverse_values(f: ScalarFn, y: np.ndarray) -> np.ndarray:
    """Bisection with geometric bracket expansion; ``f`` strictly increasing."""
    y = np.asarray(y, dtype=float)
    shape = y.shape
    y = y.reshape(-1)
    out = np.zeros_like(y)
    out[np.isinf(y)] = np.inf
    idx = np.flatnonzero((y > 0) & np.isfinite(y))
    if idx.size == 0:
        return out.reshape(shape)
    t = y[idx]
    lo = _expand(f, t, up=False)
    hi = _expand(f, t, up=True)
    # geometric halving while the bracket spans decades, arithmetic after
    for _ in range(400):
        wide = (lo > 0) & (hi > 4.0 * lo)
        mid = np.where(wide, np.sqrt(lo) * np.sqrt(hi), 0.5 * (lo + hi))
        active = (mid > lo) & (mid < hi)
        if not active.any():
            break
        below = _ev(f, mid) < t
        lo = np.where(active & below, mid, lo)
        hi = np.where(active & ~below, mid, hi)
    flo = _ev(f, lo)
    fhi = _ev(f, hi)
    out[idx] = np.where(np.abs(flo - t) <= np.abs(fhi - t), lo, hi)
    return out.reshape(shape)


# --------------------------------------------------------------------------
# change-of-coordinates function phi with phi(h(s)) = lam * phi(s)

_PHI_ITER_CAP = 100_000


def _phi_values(h: ScalarFn, lam: float, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    shape = s.shape
    t = s.reshape(-1).copy()
    n = np.zeros(t.shape, dtype=float)
    b = float(_ev(h, np.array([1.0]))[0])
    hinv = invert(h)
    pos = (t > 0) & np.isfinite(t)
    up = pos & (t >= b)
    for _ in range(_PHI_ITER_CAP):
        if not up.any():
            break
        t[up] = _ev(hinv, t[up])
        n[up] += 1
        up = up & (t >= b)
    else:
        raise NonConvergenceError("phi reduction from above did not terminate")
    down = pos & (t < 1.0)
    for _ in range(_PHI_ITER_CAP):
        if not down.any():
            break
        t[down] = _ev(h, t[down])
        n[down] -= 1
        down = down & (t < 1.0)
    else:
        raise NonConvergenceError("phi reduction from below did not terminate")
    # Affine seed on [1, b] with seed(b) = lam * seed(1) keeps phi continuous.
    seed = 1.0 + (lam - 1.0) * (t - 1.0) / (b - 1.0)
    out = np.where(pos, np.power(lam, n) * seed, 0.0)
    out[np.isinf(s.reshape(-1))] = np.inf
    return out.reshape(shape)


def solve_phi(omega1: ScalarFn, lam: float) -> ScalarFn:
    """K-infinity ``phi`` with ``phi(2*omega1(s)) = lam*phi(s)`` for all s.

    Requires ``2*omega1 - id`` of class K-infinity and ``lam > 1``.
    """
    if not lam > 1:
        raise PreconditionError(f"lambda must exceed 1, got {lam}")
    h = scale(2.0, omega1)
    report = check_class(gap(h, reverse=True), FnClass.KINF)
    if not report.passed:
        raise PreconditionError(f"2*omega1 - id is not K-infinity: {report.summary()}")
    return ScalarFn("phi", args=(h,), params=(float(lam),), declared=FnClass.KINF)


def phi_residual(phi: ScalarFn, s) -> np.ndarray:
    """Relative functional-equation residual ``|phi(h(s)) - lam phi(s)| / (1 + lam phi(s))``."""
    h = phi.args[0]
    lam = phi.params[0]
    s = np.asarray(s, dtype=float)
    rhs = lam * evaluate(phi, s)
    lhs = evaluate(phi, evaluate(h, s))
    return np.abs(lhs - rhs) / (1.0 + rhs)


# --------------------------------------------------------------------------
# log-log interpolated functions (used for grid Omega-paths)


def loglog(rs: Sequence[float], ss: Sequence[float]) -> ScalarFn:
    rs = tuple(float(r) for r in rs)
    ss = tuple(float(v) for v in ss)
    if len(rs) < 2 or len(rs) != len(ss):
        raise ScalarFnError("loglog needs at least two matching knots")
    if any(b <= a for a, b in zip(rs, rs[1:])) or any(b <= a for a, b in zip(ss, ss[1:])):
        raise ClassError("loglog knots must be strictly increasing")
    if rs[0] <= 0 or ss[0] <= 0:
        raise ClassError("loglog knots must be positive")
    return ScalarFn("loglog", params=(rs, ss), declared=FnClass.KINF)


def _loglog_values(rs, ss, s):
    lr = np.log(np.asarray(rs))
    ls = np.log(np.asarray(ss))
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    x = np.log(s[pos])
    y = np.interp(x, lr, ls)
    lo_slope = (ls[1] - ls[0]) / (lr[1] - lr[0])
    hi_slope = (ls[-1] - ls[-2]) / (lr[-1] - lr[-2])
    y = np.where(x < lr[0], ls[0] + lo_slope * (x - lr[0]), y)
    y = np.where(x > lr[-1], ls[-1] + hi_slope * (x - lr[-1]), y)
    with np.errstate(over="ignore"):
        out[pos] = np.exp(y)
    return out


# --------------------------------------------------------------------------
# class checking


@dataclass
class ClassReport:
    claimed: FnClass
    passed: bool
    witnesses: list = field(default_factory=list)

    def summary(self) -> str:
        if self.passed:
            return f"{self.claimed.value}: pass"
        first = {}
        for w in self.witnesses:
            first.setdefault(w[0], w)
        kinds = ", ".join(f"{w[0]}@{w[1]:.3g}" for w in first.values())
        return f"{self.claimed.value}: fail ({kinds})"

    @property
    def failed_kinds(self) -> set:
        return {w[0] for w in self.witnesses}


def gap(f: Callable, reverse: bool = False) -> Callable:
    """``s - f(s)`` (or ``f(s) - s`` with ``reverse``) as a plain callable."""
    if reverse:
        return lambda s: np.asarray(f(s), dtype=float) - np.asarray(s, dtype=float)
    return lambda s: np.asarray(s, dtype=float) - np.asarray(f(s), dtype=float)


def check_class(f: Callable, claimed: FnClass | str, grid=None) -> ClassReport:
    """Grid-based certification that ``f`` belongs to ``claimed``.

    ``f`` may be any vectorised callable, so derived functions such as gaps
    ``s - g(s)`` can be checked without being representable as trees.
    """
    claimed = FnClass(claimed)
    grid = CHECK_GRID if grid is None else np.asarray(grid, dtype=float)
    wit: list = []
    with np.errstate(all="ignore"):
        f0 = float(np.asarray(f(np.zeros(1)), dtype=float).reshape(-1)[0])
        vals = np.asarray(f(grid), dtype=float).reshape(grid.shape)
    if f0 != 0.0:
        wit.append(("zero", 0.0, f0))
    nan = np.isnan(vals)
    for i in np.flatnonzero(nan)[:3]:
        wit.append(("nan", float(grid[i]), float(vals[i])))
    ok = ~nan
    for i in np.flatnonzero(ok & ~(vals > 0))[:3]:
        wit.append(("positivity", float(grid[i]), float(vals[i])))
    if claimed in _KLIKE:
        a, b = vals[:-1], vals[1:]
        both = ok[:-1] & ok[1:]
        both_inf = np.isposinf(a) & np.isposinf(b)
        with np.errstate(all="ignore"):
            tol = TIE_ULPS * np.spacing(np.abs(a))
            bad = both & ~both_inf & ~(b > a) & ~((np.abs(b - a) <= tol) & (a > 0))
        for i in np.flatnonzero(bad)[:3]:
            wit.append(("monotonicity", float(grid[i + 1]), float(vals[i + 1])))
    if claimed in _UNBOUNDED:
        with np.errstate(all="ignore"):
            top = float(np.asarray(f(np.array([UNBOUNDED_PROBE])), dtype=float).reshape(-1)[0])
        if not top > UNBOUNDED_LEVEL:
            wit.append(("unbounded", UNBOUNDED_PROBE, top))
    if claimed == FnClass.LINEAR:
        with np.errstate(all="ignore"):
            c = float(np.asarray(f(np.ones(1)), dtype=float).reshape(-1)[0])
            dev = np.abs(vals - c * grid) > 1e-12 * np.abs(c * grid)
        for i in np.flatnonzero(dev & ok)[:3]:
            wit.append(("linearity", float(grid[i]), float(vals[i])))
    return ClassReport(claimed, not wit, wit)


def max_ratio(f: Callable, grid=None) -> float:
    """``max f(s)/s`` over the check grid (the gain's worst amplification)."""
    grid = CHECK_GRID if grid is None else np.asarray(grid, dtype=float)
    with np.errstate(all="ignore"):
        return float(np.max(np.asarray(f(grid), dtype=float) / grid))


def roundtrip_error(f: ScalarFn, ys) -> np.ndarray:
    """Relative error ``|f(f^-1(y)) - y| / (1 + y)``."""
    ys = np.asarray(ys, dtype=float)
    return np.abs(evaluate(f, evaluate(invert(f), ys)) - ys) / (1.0 + ys)


# --------------------------------------------------------------------------
# KL functions from the comparison lemma


def iterate_fn(f: ScalarFn, s, times: int):
    out = np.asarray(s, dtype=float)
    for _ in range(times):
        out = _ev(f, out)
    return out


@dataclass(frozen=True)
class KLFn:
    """``beta(s, r)`` affine in ``r`` between knots ``t_l = l*M + k0``.

    ``beta(s, t_l) = chi^l(s)`` exactly; on ``[0, k0)`` the segment runs up from
    ``chi^{-1}`` so that ``beta(s, .)`` stays strictly decreasing.
    """

    chi: ScalarFn
    M: int
    k0: int

    def knot(self, l: int) -> int:
        return l * self.M + self.k0

    def __call__(self, s, r: float):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0) or r < 0:
            raise DomainError("KL functions take nonnegative arguments")
        M, k0 = self.M, self.k0
        if r < k0:
            w = (k0 - r) / M
            out = w * _ev(invert(self.chi), s) + (1.0 - w) * s
        else:
            l = int((r - k0) // M)
            w = (r - self.knot(l)) / M
            base = iterate_fn(self.chi, s, l)
            out = base if w == 0 else (1.0 - w) * base + w * _ev(self.chi, base)
        return float(out) if np.ndim(out) == 0 else out


def build_kl(chi: ScalarFn, M: int, k0: int) -> KLFn:
    if M < 1 or not 0 <= k0 < M:
        raise PreconditionError(f"need M >= 1 and 0 <= k0 < M, got M={M}, k0={k0}")
    if chi.declared not in _UNBOUNDED:
        raise PreconditionError("chi must be K-infinity")
    with np.errstate(all="ignore"):
        below = _ev(chi, CHECK_GRID) < CHECK_GRID
    if not below.all():
        bad = CHECK_GRID[~below][0]
        raise PreconditionError(f"chi >= id at s={bad:.3g}")
    return KLFn(chi, int(M), int(k0))


@dataclass(frozen=True)
class ExpKLBound:
    """``y(k) <= (ymax / theta) * theta**(k/M)``."""

    theta: float
    M: int

    def __call__(self, ymax, k):
        return np.asarray(ymax, dtype=float) * self.theta ** (np.asarray(k, dtype=float) / self.M - 1.0)


def build_kl_exp(theta: float, M: int) -> ExpKLBound:
    if not 0 < theta < 1:
        raise DomainError(f"theta must lie in (0, 1), got {theta}")
    if M < 1:
        raise DomainError(f"M must be positive, got {M}")
    return ExpKLBound(float(theta), int(M))


# --------------------------------------------------------------------------
# text form

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_TOKEN = re.compile(
    rf"\s*(?:(?P<num>{_NUM})|(?P<name>[A-Za-z_][A-Za-z0-9_]*)(?::(?P<cls>[A-Za-z]+))?"
    rf"|(?P<brace>\{{[^{{}}]*\}})|(?P<bracket>\[[^\[\]]*\])|(?P<punct>[(),]))"
)


def _fmt(x: float) -> str:
    return repr(float(x))


def to_text(f: Gain) -> str:
    if is_zero(f):
        return "0"
    k = f.kind
    if k == "lin":
        return "id" if f.coef == 1.0 else f"lin {_fmt(f.coef)}"
    if k == "pow":
        return f"pow {_fmt(f.params[0])}"
    if k in ("sq_over_1p", "expm1", "log1p"):
        return k
    if k in ("sum", "max", "min"):
        return f"{k}(" + ", ".join(to_text(g) for g in f.args) + ")"
    if k == "comp":
        return f"comp({to_text(f.args[0])}, {to_text(f.args[1])})"
    if k == "inv":
        return f"inv({to_text(f.args[0])})"
    if k == "expr":
        return f"expr:{f.declared.value}{{{f.params[0]}}}"
    if k == "phi":
        return f"phi({_fmt(f.params[0])}, {to_text(f.args[0])})"
    if k == "loglog":
        knots = "; ".join(f"{_fmt(r)} {_fmt(v)}" for r, v in zip(*f.params))
        return f"loglog[{knots}]"
    raise ScalarFnError(f"unknown node kind {k!r}")


def _tokenize(text: str) -> list[tuple[str, str, str | None]]:
    pos = 0
    out = []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ScalarFnError(f"cannot parse {text!r} at position {pos}")
        pos = m.end()
        for kind in ("num", "name", "brace", "bracket", "punct"):
            if m.group(kind) is not None:
                out.append((kind, m.group(kind), m.group("cls")))
                break
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            raise ScalarFnError(f"unexpected {tok[1]!r} in {self.text!r}, expected {value or kind}")
        self.i += 1
        return tok

    def number(self) -> float:
        return float(self.take("num")[1])

    def arglist(self) -> list:
        self.take("punct", "(")
        items = [self.term()]
        while self.peek()[1] == ",":
            self.take()
            items.append(self.term())
        self.take("punct", ")")
        return items

    def term(self) -> Gain:
        kind, val, cls = self.take()
        if kind == "num":
            if float(val) != 0.0:
                raise ScalarFnError(f"bare constant {val} is not a comparison function")
            return ZERO
        if kind != "name":
            raise ScalarFnError(f"unexpected {val!r} in {self.text!r}")
        if val in ("zero",):
            return ZERO
        if val == "id":
            return identity()
        if val == "lin":
            return lin(self.number())
        if val == "pow":
            return power(self.number())
        if val == "sq_over_1p":
            return sq_over_1p()
        if val == "expm1":
            return expm1()
        if val == "log1p":
            return log1p()
        if val == "sum":
            return add(*self.arglist())
        if val == "max":
            return pointwise_max(self.arglist())
        if val == "min":
            return pointwise_min(self.arglist())
        if val == "comp":
            args = self.arglist()
            if len(args) < 2:
                raise ScalarFnError("comp needs at least two arguments")
            return compose_all(*args)
        if val == "inv":
            (arg,) = self.arglist()
            return invert(arg)
        if val == "expr":
            body = self.take("brace")[1][1:-1]
            return from_expr(body, cls or FnClass.KINF)
        if val == "phi":
            self.take("punct", "(")
            lam = self.number()
            self.take("punct", ",")
            h = self.term()
            self.take("punct", ")")
            return ScalarFn("phi", args=(h,), params=(lam,), declared=FnClass.KINF)
        if val == "loglog":
            body = self.take("bracket")[1][1:-1]
            pairs = [p.split() for p in body.split(";") if p.strip()]
            return loglog([float(p[0]) for p in pairs], [float(p[1]) for p in pairs])
        raise ScalarFnError(f"unknown function {val!r} in {self.text!r}")


@lru_cache(maxsize=1024)
def parse(text: str) -> Gain:
    """Parse the prefix text form (see module docstring)."""
    p = _Parser(text)
    out = p.term()
    if p.i != len(p.toks):
        raise ScalarFnError(f"trailing input in {text!r}")
    return out


def parse_gain(value) -> Gain:
    """JSON helper: ``None`` and ``"0"`` denote the zero sentinel."""
    if value is None:
        return ZERO
    if isinstance(value, (int, float)):
        if value == 0:
            return ZERO
        return lin(value)
    return parse(value)


def gain_to_json(f: Gain):
    return None if is_zero(f) else to_text(f)
