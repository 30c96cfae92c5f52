import numpy as np
import pytest

from fsiss.corpus import NONLINEAR_GAINS_K3, NONLINEAR_GAINS_K3_SOUND, SYSTEMS
from fsiss.gainest import GainFit, falsify_gains, fit_gains, procedure2
from fsiss.gainnet import GainMatrix, cycle_condition
from fsiss.sysmodel import CloudConfig

NONLINEAR = SYSTEMS["paper-ex-nonlinear"]
FAST = CloudConfig(samples=20_000)


def _worst_cycle(gm):
    return max(c["value"] for c in cycle_condition(gm).to_dict()["cycles"])


def test_one_step_fit_violates_small_gain():
    fit = fit_gains(NONLINEAR, k=1, cfg=FAST)
    # |x_1(1)| <= |xi_1| + 0.3 |xi_2| + |u| and s^2 / (1 + s^2) <= s / 2;
    # the max form doubles each two-term row
    np.testing.assert_allclose(fit.a, [[1.02, 0.306], [1.02, 0.153]], rtol=1e-3)
    assert fit.max_form.gamma[0][0].coef == pytest.approx(2.04, rel=1e-3)
    assert not cycle_condition(fit.max_form).passed
    assert fit.residuals["pass"]


def test_three_step_fit_passes_cycle_condition():
    fit = fit_gains(NONLINEAR, k=3, cfg=FAST)
    assert cycle_condition(fit.max_form).passed
    assert _worst_cycle(fit.max_form) < 1


def test_decoupled_fit_has_no_coupling():
    fit = fit_gains(SYSTEMS["decoupled"], k=1, cfg=FAST)
    assert fit.a[0, 1] == 0 and fit.a[1, 0] == 0
    assert fit.a[0, 0] == pytest.approx(0.51, rel=1e-6)
    assert fit.b[1] == 0


def test_zero_system():
    fit = fit_gains(SYSTEMS["zero"], k=2, cfg=CloudConfig(samples=2000))
    assert not fit.a.any() and not fit.b.any()
    assert falsify_gains(SYSTEMS["zero"], fit, cfg=CloudConfig(samples=2000))["pass"]


def test_max_form_dominates_sum_form():
    fit = fit_gains(NONLINEAR, k=3, cfg=FAST)
    mf = fit.max_form.coefficients()
    assert np.all(mf >= fit.a)
    data = fit.to_dict()
    assert data["sum_form"]["a"] == fit.a.tolist()


def test_fit_is_deterministic():
    a = fit_gains(NONLINEAR, k=2, cfg=FAST)
    b = fit_gains(NONLINEAR, k=2, cfg=FAST)
    assert np.array_equal(a.a, b.a) and np.array_equal(a.b, b.b)


def test_halved_fit_is_falsified():
    fit = fit_gains(NONLINEAR, k=3, cfg=FAST)
    rep = falsify_gains(NONLINEAR, fit.scaled(0.5), cfg=FAST.reseeded(7))
    assert not rep["pass"] and rep["worst_residual"] > 0
    assert rep["witness"]["block"] in (1, 2)


def test_hand_derived_gains():
    sound = falsify_gains(NONLINEAR, NONLINEAR_GAINS_K3_SOUND, k=3, cfg=FAST)
    assert sound["pass"], sound
    published = falsify_gains(NONLINEAR, NONLINEAR_GAINS_K3, k=3, cfg=FAST)
    assert not published["pass"]
    assert published["witness"]["block"] == 2
    # xi = 0 and u = 1 constant give x_2(3) = 2.15 > 2
    assert published["worst_residual"] == pytest.approx(0.075, rel=1e-6)


def test_bare_matrix_needs_horizon():
    with pytest.raises(ValueError):
        falsify_gains(NONLINEAR, NONLINEAR_GAINS_K3)
    with pytest.raises(ValueError):
        fit_gains(NONLINEAR, k=0)


def test_procedure2_nonlinear_example():
    res = procedure2(NONLINEAR, max_k=5, cfg=FAST)
    assert res.status == "certified"
    assert res.certificate.M == 3
    assert [row["status"] for row in res.table] == [
        "small-gain violated", "small-gain violated", "certified"]
    assert res.certificate.rho.coef < 1
    assert res.table[-1]["decrease"]["pass"]
    assert isinstance(res.fit, GainFit) and res.to_dict()["certificate"]["M"] == 3


def test_procedure2_gives_up_at_cap():
    res = procedure2(NONLINEAR, max_k=1, cfg=FAST)
    assert res.status == "inconclusive" and res.certificate is None
    unstable = procedure2(SYSTEMS["scalar-unstable"], max_k=3, cfg=CloudConfig(samples=5000))
    assert unstable.status == "inconclusive"
    cycles = [_worst_cycle(GainMatrix.linear(row["a"], row["b"])) for row in unstable.table]
    assert cycles == sorted(cycles) and cycles[0] > 2


def test_procedure2_linear_example():
    res = procedure2(SYSTEMS["paper-ex-linear2d"], max_k=6, cfg=FAST)
    assert res.status == "certified" and res.certificate.M <= 6
