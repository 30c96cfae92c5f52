"""Compiled-in example systems, gains, paths and certificates."""

from __future__ import annotations

from .gainnet import GainMatrix, OmegaPath
from .sysmodel import SystemModel

SYSTEMS = {
    "paper-ex-nonlinear": SystemModel(
        "paper-ex-nonlinear", 2, 1, (1, 1),
        ("x1 - 0.3*x2 + u1", "x1 + 0.3*sq_over_1p(x2)"),
        "Two scalar subsystems; the first is 0-input unstable on its own.",
    ),
    "paper-ex-linear2d": SystemModel(
        "paper-ex-linear2d", 2, 2, (1, 1),
        ("1.5*x1 + x2 + u1", "-2*x1 - x2 + u2"),
        "x+ = A x + u with A = [[1.5, 1], [-2, -1]] (spectral radius sqrt(2)/2).",
    ),
    "scalar-contraction": SystemModel(
        "scalar-contraction", 1, 1, (1,), ("0.5*x1 + u1",), "x+ = 0.5 x + u",
    ),
    "scalar-unstable": SystemModel(
        "scalar-unstable", 1, 1, (1,), ("2*x1 + u1",), "x+ = 2 x + u",
    ),
    "decoupled": SystemModel(
        "decoupled", 2, 1, (1, 1), ("0.5*x1 + u1", "0.25*x2"), "Two independent contractions.",
    ),
    "zero": SystemModel("zero", 2, 1, (1, 1), ("0", "0"), "G = 0"),
}

# Hand-derived three-step gains of the nonlinear example, in the form
# |x_i(3)| <= max_j a_ij |xi_j| + b_i |u|.
NONLINEAR_GAINS_K3 = GainMatrix.linear(
    [[0.89, 0.5235], [1.745, 0.78675]], [2.7, 2.0], form="sum",
)
# The published input gain 2 of row 2 is too small: with xi = 0 and u = 1
# constant, x_2(3) = 2 + 0.3/2. Keeping u(0) inside the saturating term
# gives 2 + 0.15.
NONLINEAR_GAINS_K3_SOUND = GainMatrix.linear(
    [[0.89, 0.5235], [1.745, 0.78675]], [2.7, 2.15], form="sum",
)
NONLINEAR_PATH = OmegaPath.linear([0.5, 0.9])
NONLINEAR_CERTIFICATE = {
    "v": {"kind": "block_max", "weights": [2.0, 10.0 / 9.0], "norm": "inf", "exponent": 1.0},
    "M": 3,
    "rho": "lin 0.9694444444444444",
    "sigma": "lin 5.4",
    "alpha1": "lin 1.1111111111111112",
    "alpha2": "lin 2.0",
    "blocks": [1, 1],
    "provenance": "user",
    "evidence": {"kind": "analytic"},
}


GAINS = {
    "paper-ex-nonlinear-k3": NONLINEAR_GAINS_K3,
    "paper-ex-nonlinear-k3-sound": NONLINEAR_GAINS_K3_SOUND,
}
PATHS = {"paper-ex-nonlinear": NONLINEAR_PATH}
CERTIFICATES = {"paper-ex-nonlinear": NONLINEAR_CERTIFICATE}


def _lookup(table: dict, key: str, what: str):
    try:
        return table[key]
    except KeyError:
        raise KeyError(f"unknown corpus {what} {key!r}; known: {', '.join(sorted(table))}") from None


def get_system(key: str) -> SystemModel:
    return _lookup(SYSTEMS, key, "system")


def get_gains(key: str) -> GainMatrix:
    return _lookup(GAINS, key, "gain set")


def get_path(key: str) -> OmegaPath:
    return _lookup(PATHS, key, "path")


def get_certificate(key: str) -> dict:
    return dict(_lookup(CERTIFICATES, key, "certificate"))
