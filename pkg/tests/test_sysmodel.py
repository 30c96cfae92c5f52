import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsiss.corpus import SYSTEMS, get_system
from fsiss.scalarfun import lin, power
from fsiss.sysmodel import (
    CloudConfig,
    InputSignal,
    KBound,
    ModelError,
    SystemModel,
    block_norms,
    check_trajectory_bound,
    coordinate_transform,
    estimate_kbound,
    fit_linear_envelope,
    input_sup,
    joint_cloud,
    m_iterate,
    simulate,
    simulate_batch,
    trajectory_bounds,
    vec_norm,
)

NONLINEAR = SYSTEMS["paper-ex-nonlinear"]
LINEAR2D = SYSTEMS["paper-ex-linear2d"]
A = np.array([[1.5, 1.0], [-2.0, -1.0]])


def hand_step(x1, x2, u):
    return x1 - 0.3 * x2 + u, x1 + 0.3 * x2 * x2 / (1 + x2 * x2)


# --- model ------------------------------------------------------------------

def test_step_examples():
    assert NONLINEAR.step([100.0, 0.0], [0.0]).tolist() == [100.0, 100.0]
    assert LINEAR2D.step([1.0, 0.0], [0.0, 0.0]).tolist() == [1.5, -2.0]


def test_three_steps_against_hand_iteration():
    x = (100.0, 0.0)
    for _ in range(3):
        x = hand_step(*x, 0.0)
    traj = simulate(NONLINEAR, [100.0, 0.0], InputSignal("zero"), 3)
    np.testing.assert_allclose(traj.last, x, rtol=1e-15)
    np.testing.assert_allclose(traj.last, [39.910009, 70.29997], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
       st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_simulation_matches_hand_iteration(x0, us):
    x = tuple(x0)
    for u in us:
        x = hand_step(*x, u)
    traj = simulate(NONLINEAR, x0, np.array(us).reshape(6, 1), 6)
    np.testing.assert_allclose(traj.last, x, rtol=1e-12, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2), st.integers(0, 8))
def test_linear_system_matches_matrix_power(x0, k):
    traj = simulate(LINEAR2D, x0, InputSignal("zero"), k)
    np.testing.assert_allclose(traj.last, np.linalg.matrix_power(A, k) @ x0, rtol=1e-12, atol=1e-9)


def test_model_validation():
    with pytest.raises(ModelError):
        SystemModel("bad", 1, 1, (1,), ("x1 + 1",))
    with pytest.raises(ModelError):
        SystemModel("bad", 1, 1, (1,), ("x2",))
    with pytest.raises(ModelError):
        SystemModel("bad", 2, 1, (1, 2), ("x1", "x2"))
    with pytest.raises(ModelError):
        SystemModel("bad", 1, 1, (1,), ("import_os(x1)",))
    with pytest.raises(ModelError):
        SystemModel.from_dict({"n": 1})


def test_system_dict_roundtrip():
    for sys in SYSTEMS.values():
        back = SystemModel.from_dict(json.loads(json.dumps(sys.to_dict())))
        assert back == sys


def test_unknown_corpus_key():
    with pytest.raises(KeyError):
        get_system("nope")


def test_batched_step_matches_columns():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 50))
    u = rng.normal(size=(1, 50))
    batch = NONLINEAR.step(x, u)
    for b in range(50):
        assert np.array_equal(batch[:, b], NONLINEAR.step(x[:, b], u[:, b]))


# --- inputs and trajectories ----------------------------------------------------

def test_input_signals():
    assert InputSignal("zero").sequence(3, 2).shape == (3, 2)
    c = InputSignal("constant", (0.5,)).sequence(4, 1)
    assert np.all(c == 0.5)
    r1 = InputSignal("random", bound=0.3, seed=9).sequence(5, 2)
    r2 = InputSignal("random", bound=0.3, seed=9).sequence(5, 2)
    assert np.array_equal(r1, r2) and np.max(np.abs(r1)) <= 0.3
    with pytest.raises(ValueError):
        InputSignal("explicit", (1.0,)).sequence(3, 1)
    with pytest.raises(ValueError):
        InputSignal("sawtooth").sequence(3, 1)


def test_trajectory_csv():
    traj = simulate(LINEAR2D, [1.0, 0.0], InputSignal("zero"), 1)
    lines = traj.to_csv().splitlines()
    assert lines[0] == "k,x1,x2,u1,u2"
    assert lines[2] == "1,1.5,-2.0,,"
    zero = simulate(LINEAR2D, [1.0, 0.0], InputSignal("zero"), 0)
    assert len(zero.to_csv().splitlines()) == 2
    assert traj.prefix(0).states.shape == (1, 2)


def test_negative_horizon():
    with pytest.raises(ValueError):
        simulate(LINEAR2D, [1.0, 0.0], InputSignal("zero"), -1)


# --- M-iterates ---------------------------------------------------------------

@pytest.mark.parametrize("key", sorted(SYSTEMS))
@pytest.mark.parametrize("M", [1, 2, 3, 5])
def test_m_iterate_bitwise(key, M):
    sys = SYSTEMS[key]
    rng = np.random.default_rng(M)
    x = rng.normal(scale=10, size=sys.n)
    w = rng.uniform(-1, 1, (M, sys.m))
    assert np.array_equal(m_iterate(sys, M).step(x, w), simulate(sys, x, w, M).last)
    xb = rng.normal(size=(sys.n, 7))
    wb = rng.uniform(-1, 1, (M, sys.m, 7))
    assert np.array_equal(m_iterate(sys, M).step(xb, wb), simulate_batch(sys, xb, wb, M))


def test_m_iterate_validation():
    with pytest.raises(ValueError):
        m_iterate(LINEAR2D, 0)
    with pytest.raises(ValueError):
        m_iterate(LINEAR2D, 2).step([1.0, 0.0], np.zeros((3, 2)))


# --- norms and clouds ---------------------------------------------------------

def test_norms():
    x = np.array([[3.0], [-4.0]])
    assert vec_norm(x, "inf")[0] == 4.0
    assert vec_norm(x, "1")[0] == 7.0
    assert vec_norm(x, "2")[0] == 5.0
    assert block_norms(np.array([1.0, -2.0, 3.0]), (1, 2), "inf").tolist() == [1.0, 3.0]
    u = np.array([[[1.0], [0.5]], [[-2.0], [0.0]]])
    assert input_sup(u, "inf").tolist() == [2.0]


def test_cloud_is_deterministic_and_bounded():
    cfg = CloudConfig(samples=5000, seed=4, radius_max=100.0, input_max=0.5)
    x1, u1 = joint_cloud(NONLINEAR, 3, cfg)
    x2, u2 = joint_cloud(NONLINEAR, 3, cfg)
    assert np.array_equal(x1, x2) and np.array_equal(u1, u2)
    assert x1.shape == (2, 5000) and u1.shape == (3, 1, 5000)
    assert np.max(vec_norm(x1, "inf")) <= 100.0 * (1 + 1e-12)
    assert np.max(input_sup(u1, "inf")) <= 0.5 * (1 + 1e-12)
    assert np.any(input_sup(u1, "inf") == 0.5)
    zero_state = vec_norm(x1, "inf") == 0
    assert zero_state.sum() == 500


def test_cloud_includes_single_block_states():
    x, _ = joint_cloud(LINEAR2D, 1, CloudConfig(samples=2000))
    assert np.any((x[0] == 0) & (x[1] != 0))
    assert np.any((x[1] == 0) & (x[0] != 0))


# --- LP envelope and K-bounds ---------------------------------------------------

def test_envelope_recovers_exact_linear_law():
    rng = np.random.default_rng(1)
    f = rng.uniform(0, 1, (2, 400))
    target = 0.7 * f[0] + 0.2 * f[1]
    coef = fit_linear_envelope(f, target)
    assert np.all(f.T @ coef >= target)
    np.testing.assert_allclose(coef, [0.7, 0.2], rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_envelope_is_an_upper_bound(seed):
    rng = np.random.default_rng(seed)
    f = rng.uniform(0, 10, (3, 200))
    target = np.abs(rng.normal(size=3)) @ f * rng.uniform(0.5, 1.0, 200)
    coef = fit_linear_envelope(f, target)
    assert np.all(coef >= 0) and np.all(f.T @ coef >= target)


def test_envelope_unreachable_target():
    with pytest.raises(ArithmeticError):
        fit_linear_envelope(np.zeros((1, 3)), np.array([0.0, 1.0, 0.0]))


def test_kbound_examples():
    kb = estimate_kbound(NONLINEAR, "inf", CloudConfig(samples=20_000))
    # |G| <= 1.3 |x| + |u| analytically; the sampled envelope is tighter
    assert kb.w1 <= 1.3 * 1.02 + 1e-12 and kb.w1 >= 1.0
    assert kb.w2 == pytest.approx(1.02, rel=1e-6)
    lin2 = estimate_kbound(LINEAR2D, "inf", CloudConfig(samples=20_000))
    assert lin2.w1 == pytest.approx(3.0 * 1.02, rel=1e-6)
    zero = estimate_kbound(SYSTEMS["zero"], "inf", CloudConfig(samples=2000))
    assert zero.w1 == 0 and zero.w2 == 0


def test_kbound_growth_warning():
    sys = SystemModel("cubic", 1, 1, (1,), ("x1*x1*x1 + u1",))
    with pytest.warns(RuntimeWarning):
        estimate_kbound(sys, "inf", CloudConfig(samples=5000, radius_max=10.0))


def test_trajectory_bound_lemma():
    kb = estimate_kbound(NONLINEAR, "inf", CloudConfig(samples=10_000))
    for j in range(1, 6):
        rep = check_trajectory_bound(NONLINEAR, kb, j, CloudConfig(samples=10_000, seed=j))
        assert rep["pass"], rep
        assert trajectory_bounds(kb, j)[0] == kb.w1 ** j


def test_trajectory_bound_detects_halved_constant():
    kb = estimate_kbound(LINEAR2D, "inf", CloudConfig(samples=10_000))
    weak = KBound(kb.w1 / 2, kb.w2, "inf")
    assert not check_trajectory_bound(LINEAR2D, weak, 1, CloudConfig(samples=10_000))["pass"]


# --- coordinate change ----------------------------------------------------------

def test_coordinate_transform_roundtrip_and_conjugacy():
    ts = coordinate_transform(NONLINEAR, power(2.0), "2")
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 100))
    np.testing.assert_allclose(ts.backward(ts.forward(x)), x, rtol=1e-10, atol=1e-12)
    u = rng.uniform(-1, 1, (1, 100))
    np.testing.assert_allclose(ts.step(ts.forward(x), u), ts.forward(NONLINEAR.step(x, u)),
                               rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(vec_norm(ts.forward(x), "2"), vec_norm(x, "2") ** 2, rtol=1e-12)
    assert np.array_equal(ts.forward(np.zeros((2, 1))), np.zeros((2, 1)))
    assert np.array_equal(coordinate_transform(LINEAR2D, lin(1.0)).forward(x), x)


def test_coordinate_transform_rejects_bounded():
    from fsiss.scalarfun import sq_over_1p
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError):
            coordinate_transform(NONLINEAR, sq_over_1p())
