import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsiss.corpus import (
    NONLINEAR_CERTIFICATE,
    NONLINEAR_GAINS_K3,
    NONLINEAR_GAINS_K3_SOUND,
    NONLINEAR_PATH,
    SYSTEMS,
)
from fsiss.fslf import (
    Certificate,
    CompositionError,
    ExpIssEstimate,
    VSpec,
    check_iss_estimate,
    check_sandwich,
    compose_certificate,
    eval_v,
    expiss_constants,
    procedure1,
    rho_margin_ok,
    verify_decrease,
)
from fsiss.gainnet import DiagonalOp, GainMatrix, OmegaPath
from fsiss.scalarfun import add, compose, evaluate, identity, lin, sq_over_1p
from fsiss.sysmodel import CloudConfig, KBound, SystemModel, estimate_kbound

NONLINEAR = SYSTEMS["paper-ex-nonlinear"]
LINEAR2D = SYSTEMS["paper-ex-linear2d"]
PAPER_CERT = Certificate.from_dict(NONLINEAR_CERTIFICATE)


# --- V evaluation -----------------------------------------------------------

def test_eval_v_examples():
    v = VSpec("block_max", weights=(2.0, 10 / 9))
    assert eval_v(v, [100.0, 0.0], (1, 1)) == 200.0
    assert eval_v(v, [0.0, 90.0], (1, 1)) == pytest.approx(100.0, rel=1e-15)
    assert eval_v(v, [0.0, 0.0], (1, 1)) == 0.0
    assert eval_v(VSpec("norm", "1"), [3.0, -4.0]) == 7.0
    assert eval_v(VSpec("norm", "2", exponent=2.0), [3.0, -4.0]) == pytest.approx(25.0)
    fn = VSpec("block_fn", fns=(lin(2.0), sq_over_1p()))
    assert eval_v(fn, [1.0, 1.0], (1, 1)) == 2.0


def test_vspec_validation():
    with pytest.raises(ValueError):
        VSpec("block_max", weights=(1.0, 0.0))
    with pytest.raises(ValueError):
        VSpec("block_fn")
    with pytest.raises(ValueError):
        VSpec("ellipsoid")
    with pytest.raises(ValueError):
        eval_v(VSpec("block_max", weights=(1.0,)), [1.0, 2.0], (1, 1))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2), st.floats(1e-3, 1e3))
def test_block_max_v_is_positively_homogeneous(xi, t):
    v = VSpec("block_max", weights=(2.0, 10 / 9))
    xi = np.array(xi)
    assert eval_v(v, t * xi, (1, 1)) == pytest.approx(t * eval_v(v, xi, (1, 1)), rel=1e-12, abs=1e-300)


def test_certificate_dict_roundtrip():
    data = json.loads(json.dumps(PAPER_CERT.to_dict()))
    back = Certificate.from_dict(data)
    assert back.to_dict() == PAPER_CERT.to_dict()
    assert back.v.weights == (2.0, 10 / 9)


def test_rho_margin():
    assert rho_margin_ok(lin(0.97))
    assert not rho_margin_ok(lin(1.0))
    assert rho_margin_ok(compose(lin(0.5), sq_over_1p()))


# --- decrease falsification -----------------------------------------------------

def test_published_certificate_survives_sampling():
    rep = verify_decrease(NONLINEAR, PAPER_CERT, CloudConfig(samples=20_000))
    assert rep["pass"] and rep["violations"] == 0 and rep["worst_slack"] >= 0


def test_forged_rho_is_falsified():
    rep = verify_decrease(NONLINEAR, PAPER_CERT.with_rho(lin(0.5)), CloudConfig(samples=20_000))
    assert not rep["pass"] and rep["violations"] > 0
    assert rep["max_v_ratio"] >= 0.6


def test_forged_rho_witness_by_hand():
    # x(3) from xi = (-100, 100) with zero input
    x1, x2 = -100.0, 100.0
    for _ in range(3):
        x1, x2 = x1 - 0.3 * x2, x1 + 0.3 * x2 * x2 / (1 + x2 * x2)
    assert (x1, x2) == pytest.approx((-61.18, -99.79), abs=0.01)
    v = PAPER_CERT.v
    ratio = eval_v(v, [x1, x2], (1, 1)) / eval_v(v, [-100.0, 100.0], (1, 1))
    assert ratio == pytest.approx(0.61, abs=0.005)
    assert ratio > 0.5


def test_sandwich():
    assert check_sandwich(PAPER_CERT, 2)["pass"]
    tight = Certificate.from_dict({**NONLINEAR_CERTIFICATE, "alpha2": "lin 1.9"})
    assert not check_sandwich(tight, 2)["pass"]


# --- norm-based candidate ---------------------------------------------------------

def test_procedure1_linear_example():
    res = procedure1(LINEAR2D, "inf", max_k=6, cfg=CloudConfig(samples=20_000))
    assert res.succeeded
    cert = res.certificate
    assert cert.M == 3
    # |A^3|_inf = 0.875; the sampled sup is inflated by 2 %
    assert 0.875 <= cert.rho.coef <= 0.875 * 1.02 + 1e-12
    # with unit input weight |x(3)| <= 0.875 |xi| + (1 + 3 + 2) |u|
    assert cert.sigma.coef == pytest.approx(6.0 * 1.02, rel=1e-3)
    assert [row["status"] for row in res.table] == ["no contraction", "no contraction", "certified"]


def test_procedure1_one_norm_negative_control():
    res = procedure1(NONLINEAR, "1", max_k=3, cfg=CloudConfig(samples=20_000))
    assert not res.succeeded
    assert res.table[-1]["sampled_ratio"] >= 1.05
    # hand witness xi = (100, 0)
    x1, x2 = 100.0, 0.0
    for _ in range(3):
        x1, x2 = x1 - 0.3 * x2, x1 + 0.3 * x2 * x2 / (1 + x2 * x2)
    assert (abs(x1) + abs(x2)) / 100 == pytest.approx(1.102, abs=1e-3)


def test_procedure1_scalar():
    res = procedure1(SYSTEMS["scalar-contraction"], max_k=3, cfg=CloudConfig(samples=5000))
    assert res.certificate.M == 1
    assert res.certificate.rho.coef == pytest.approx(0.51, rel=1e-9)
    assert res.to_dict()["status"] == "certified"
    bad = procedure1(SYSTEMS["scalar-unstable"], max_k=3, cfg=CloudConfig(samples=2000))
    assert not bad.succeeded and bad.to_dict()["status"] == "inconclusive"
    with pytest.raises(ValueError):
        procedure1(LINEAR2D, max_k=0)


# --- exponential ISS constants ---------------------------------------------------

def _linear_cert(c, d, M, a=1.0, b=1.0):
    return Certificate(VSpec("norm"), M, lin(c), lin(d), lin(a), lin(b), (1, 1))


def test_expiss_constants_example():
    est = expiss_constants(_linear_cert(0.875, 6.0, 3), KBound(3.0, 1.0, "inf"))
    assert est.details["kappa_tilde"] == pytest.approx(0.9375)
    assert est.kappa == pytest.approx(0.9375 ** (1 / 3))
    assert est.kappa == pytest.approx(0.97872, abs=1e-5)
    # C = sqrt-free case lambda = 1: (b / (a kappa~)) * max(1, w1, w1^2)
    assert est.C == pytest.approx(9.0 / 0.9375)


def test_expiss_estimate_holds_on_linear_example():
    cert = procedure1(LINEAR2D, "inf", max_k=6, cfg=CloudConfig(samples=20_000)).certificate
    kb = estimate_kbound(LINEAR2D, "inf", CloudConfig(samples=20_000))
    est = expiss_constants(cert, kb)
    assert check_iss_estimate(LINEAR2D, est, CloudConfig(samples=5000), horizon=30)["pass"]
    forged = ExpIssEstimate(0.1, est.kappa, est.gamma)
    rep = check_iss_estimate(LINEAR2D, forged, CloudConfig(samples=2000), horizon=5, zero_input=True)
    assert not rep["pass"] and rep["witness"]["k"] == 0


def test_expiss_preconditions():
    with pytest.raises(ValueError):
        expiss_constants(_linear_cert(0.875, 6.0, 3), KBound(3.0, 1.0, "inf"), h=1.5)
    with pytest.raises(ValueError):
        expiss_constants(_linear_cert(1.2, 6.0, 3), KBound(3.0, 1.0, "inf"))
    with pytest.raises(ValueError):
        ExpIssEstimate(1.0, 1.0, lin(1.0))


# --- composite certificates ------------------------------------------------------

def test_compose_reproduces_published_certificate():
    cert = compose_certificate(NONLINEAR_GAINS_K3, NONLINEAR_PATH, M=3, blocks=(1, 1))
    assert cert.v.weights[0] == pytest.approx(2.0, abs=1e-12)
    assert cert.v.weights[1] == pytest.approx(10 / 9, abs=1e-10)
    assert cert.rho.coef == pytest.approx(0.9694444444444444, rel=1e-12)
    assert round(cert.rho.coef, 4) == 0.9694
    assert cert.sigma.coef == pytest.approx(5.4, rel=1e-15)
    assert cert.alpha2.coef == pytest.approx(2.0)
    assert cert.alpha1.coef == pytest.approx(10 / 9)
    sound = compose_certificate(NONLINEAR_GAINS_K3_SOUND, NONLINEAR_PATH, M=3, blocks=(1, 1))
    assert sound.sigma.coef == pytest.approx(5.4, rel=1e-15)


def test_composed_certificate_survives_sampling():
    cert = compose_certificate(NONLINEAR_GAINS_K3_SOUND, NONLINEAR_PATH, M=3, blocks=(1, 1))
    assert verify_decrease(NONLINEAR, cert, CloudConfig(samples=20_000, seed=3))["pass"]
    assert check_sandwich(cert, 2)["pass"]


def test_compose_single_block():
    gm = GainMatrix.linear([[0.5]], [1.0], form="sum")
    cert = compose_certificate(gm, OmegaPath.linear([1.0]), M=1)
    assert cert.v.weights == (1.0,)
    assert cert.rho.coef == pytest.approx(0.5)
    assert verify_decrease(SYSTEMS["scalar-contraction"], cert, CloudConfig(samples=5000))["pass"]


def test_compose_rejects_failing_path():
    gm = GainMatrix.linear([[0.0, 1.0], [1.0, 0.0]], [1.0, 1.0], form="sum")
    with pytest.raises(CompositionError):
        compose_certificate(gm, OmegaPath.linear([1.0, 1.0]))
    with pytest.raises(CompositionError):
        compose_certificate(NONLINEAR_GAINS_K3, OmegaPath.linear([1.0]))


def test_compose_max_form_nonlinear():
    gm = GainMatrix([[compose(lin(0.5), sq_over_1p())]], [lin(1.0)], form="max")
    D = DiagonalOp.from_deltas([lin(0.5)])
    cert = compose_certificate(gm, OmegaPath((identity(),)), D, M=1)
    grid = np.logspace(-3, 3, 13)
    for f in (cert.rho, cert.sigma, cert.v.fns[0]):
        np.testing.assert_allclose(evaluate(f, grid), grid / 1.5, rtol=1e-12)
    sys = SystemModel("m", 1, 1, (1,), ("max(0.5*sq_over_1p(x1), abs(u1))",))
    assert verify_decrease(sys, cert, CloudConfig(samples=20_000))["pass"]


def test_compose_sum_form_nonlinear():
    gain = add(lin(0.2), compose(lin(0.3), sq_over_1p()))
    gm = GainMatrix([[gain]], [lin(1.0)], form="sum")
    D = DiagonalOp.from_deltas([lin(0.5)], factors=(DiagonalOp.from_deltas([lin(0.2)]),
                                                      DiagonalOp.from_deltas([lin(0.25)])))
    cert = compose_certificate(gm, OmegaPath((identity(),)), D, M=1)
    sys = SystemModel("s", 1, 1, (1,), ("0.2*x1 + 0.3*sq_over_1p(x1) + u1",))
    assert verify_decrease(sys, cert, CloudConfig(samples=20_000))["pass"]
    assert check_sandwich(cert, 1)["pass"]
    with pytest.raises(CompositionError):
        compose_certificate(gm, OmegaPath((identity(),)), DiagonalOp.from_deltas([lin(0.5)]))


def test_compose_sum_form_needs_unbounded_gains():
    gm = GainMatrix([[compose(lin(0.5), sq_over_1p())]], [lin(1.0)], form="sum")
    D = DiagonalOp.from_deltas([lin(0.5)], factors=(DiagonalOp.from_deltas([lin(0.2)]),
                                                      DiagonalOp.from_deltas([lin(0.25)])))
    with pytest.raises(CompositionError):
        compose_certificate(gm, OmegaPath((identity(),)), D)


def test_compose_nonlinear_requires_operator():
    gm = GainMatrix([[compose(lin(0.5), sq_over_1p())]], [lin(1.0)], form="max")
    with pytest.raises(CompositionError):
        compose_certificate(gm, OmegaPath((identity(),)))
