import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import filled
from sitgru.cells import (
    CellKind,
    CellParams,
    CellState,
    CellStateError,
    backward_sequence,
    cell_backward,
    finite_diff_grad,
    gru_step,
    max_relative_error,
    param_count,
    step,
    unroll_sequence,
)
from sitgru.gradcheck import check_cell
from sitgru.tensor import DimensionError

ALL_KINDS = list(CellKind)


def random_params(kind, d, n, rng):
    p = CellParams.init(kind, d, n, rng)
    for v in p.tensors.values():
        v += rng.normal(scale=0.5, size=v.shape)
    return p


def test_gru_zero_fixed_point():
    p = CellParams.zeros(CellKind.GRU, 3, 2)
    assert np.all(step(p, [1.0, -2.0, 5.0], np.zeros(2)).h == 0)


def test_gru_scalar_hand_value():
    h = step(filled(CellKind.GRU, 1, 1, 1.0), [1.0], [0.5]).h
    assert h[0] == pytest.approx(0.53684, abs=1e-5)


def test_sitgru_zero_params_gives_quarter():
    h = step(CellParams.zeros(CellKind.SITGRU, 2, 3), [0.3, -0.1], np.zeros(3)).h
    np.testing.assert_allclose(h, 0.25, rtol=0, atol=0)


def test_sitgru_scalar_hand_value():
    h = step(filled(CellKind.SITGRU, 1, 1, 1.0), [1.0], [0.5]).h
    assert h[0] == pytest.approx(0.53217, abs=1e-5)


@pytest.mark.parametrize("kind", [CellKind.GRU, CellKind.SITGRU, CellKind.SITGRU_TANH_NORESET,
                                  CellKind.SITGRU_RELU])
def test_saturated_update_gate_keeps_state(kind, rng):
    p = random_params(kind, 2, 3, rng)
    p["b_z"][...] = 20.0
    p["W_z"][...] = 0.0
    p["U_z"][...] = 0.0
    h_prev = rng.uniform(size=3)
    np.testing.assert_allclose(step(p, rng.normal(size=2), h_prev).h, h_prev, atol=1e-8)


def test_no_update_passes_state_through(rng):
    p = random_params(CellKind.GRU_NO_UPDATE, 2, 1, rng)
    assert step(p, rng.normal(size=2), [0.7]).h[0] == 0.7
    assert step(p, rng.normal(size=2), [0.0]).h[0] == 0.0
    h0 = rng.uniform(size=1)
    states, h_T = unroll_sequence(p, list(rng.normal(size=(4, 2))), h0)
    assert np.array_equal(h_T, h0) and all(np.array_equal(s.h, h0) for s in states)


def test_no_update_backward_is_identity_on_state(rng):
    p = random_params(CellKind.GRU_NO_UPDATE, 2, 3, rng)
    st_ = step(p, rng.normal(size=2), rng.uniform(size=3))
    d_h = rng.normal(size=3)
    g = cell_backward(st_, d_h, CellKind.GRU_NO_UPDATE)
    assert np.array_equal(g.h_prev, d_h)
    assert all(np.all(v == 0) for v in g.params.values())


def test_reset_gate_of_ones_matches_tanh_noreset(rng):
    gru = random_params(CellKind.GRU, 3, 4, rng)
    alt = CellParams.zeros(CellKind.SITGRU_TANH_NORESET, 3, 4)
    for name in alt.names():
        alt[name][...] = gru[name]
    x, h = rng.normal(size=3), rng.uniform(size=4)
    assert np.array_equal(gru_step(gru, x, h, reset_gate=1.0).h, step(alt, x, h).h)


def test_candidate_path_with_zero_preactivation():
    for kind, expected in ((CellKind.SITGRU, 0.5), (CellKind.SITGRU_TANH_NORESET, 0.0)):
        p = CellParams.zeros(kind, 2, 2)
        assert np.all(step(p, [1.0, 2.0], [0.3, 0.6]).cache["cand"] == expected)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_zero_upstream_gradient_gives_zero(kind, rng):
    p = random_params(kind, 2, 3, rng)
    g = cell_backward(step(p, rng.normal(size=2), rng.uniform(size=3)), np.zeros(3), kind)
    assert all(np.all(v == 0) for v in g.params.values())
    assert np.all(g.x == 0) and np.all(g.h_prev == 0)


def test_backward_without_cache_is_state_error(rng):
    with pytest.raises(CellStateError):
        cell_backward(CellState(np.zeros(2), None), np.ones(2), CellKind.GRU)
    p = random_params(CellKind.GRU, 1, 2, rng)
    with pytest.raises(CellStateError):
        cell_backward(step(p, [0.1], [0.2, 0.3]), np.ones(2), CellKind.LSTM)


def test_shape_mismatch_is_dimension_error(rng):
    p = random_params(CellKind.SITGRU, 2, 3, rng)
    with pytest.raises(DimensionError):
        step(p, np.zeros(3), np.zeros(3))
    with pytest.raises(DimensionError):
        step(p, np.zeros(2), np.zeros(2))


def test_unroll_rejects_empty_and_single_step_is_step(rng):
    p = random_params(CellKind.GRU, 2, 3, rng)
    with pytest.raises(ValueError):
        unroll_sequence(p, [], np.zeros(3))
    x, h0 = rng.normal(size=2), rng.uniform(size=3)
    _, h_T = unroll_sequence(p, [x], h0)
    assert np.array_equal(h_T, step(p, x, h0).h)


def test_param_counts():
    assert param_count(CellKind.SITGRU, 1, 8) == 160
    assert param_count(CellKind.GRU, 1, 8) == 240
    for d, n in [(1, 1), (3, 5), (32, 16)]:
        base = d * n + n * n + n
        assert param_count(CellKind.LSTM, d, n) == 4 * base
        assert param_count(CellKind.GRU_NO_UPDATE, d, n) == 2 * base
        assert CellParams.zeros(CellKind.SITGRU_RELU, d, n).size() == 2 * base


def test_params_round_trip_bytes(rng):
    p = random_params(CellKind.LSTM, 2, 3, rng)
    q = CellParams.from_bytes(p.to_bytes())
    assert q.kind is p.kind and all(np.array_equal(p[k], q[k]) for k in p.names())


def test_fd_one_step_one_unit_absolute():
    p = filled(CellKind.SITGRU, 1, 1, 0.3)
    loss = lambda hs: float(hs[0] @ hs[0])
    states, _ = unroll_sequence(p, [[0.4]], [0.2])
    analytic = backward_sequence(p, states, [2 * states[0].h])
    numeric = finite_diff_grad(p, [[0.4]], [0.2], None, loss)
    for name in p.names():
        np.testing.assert_allclose(analytic[name], numeric[name], atol=1e-6)


def test_fd_zero_loss_gives_zero(rng):
    p = random_params(CellKind.GRU, 2, 2, rng)
    g = finite_diff_grad(p, rng.normal(size=(3, 2)), np.zeros(2), None, lambda hs: 0.0)
    assert all(np.all(v == 0) for v in g.params.values())


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_bptt_matches_finite_differences(kind):
    result = check_cell(kind, seed=3, T=4, d=2, n=3)
    assert result.worst < 1e-4, result


def test_mutated_gradient_is_detected():
    from sitgru.gradcheck import flip_first_sign
    assert not check_cell(CellKind.SITGRU, 0, mutate=flip_first_sign).passed


def test_max_relative_error_ignores_tiny_components():
    assert max_relative_error(np.array([1e-12, 1.0]), np.array([-1e-12, 1.0])) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sitgru_states_stay_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    p = random_params(CellKind.SITGRU, 3, 4, rng)
    states, _ = unroll_sequence(p, list(rng.normal(scale=5, size=(12, 3))), rng.uniform(size=4))
    for s in states:
        assert np.all((s.h >= 0) & (s.h <= 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([CellKind.GRU, CellKind.SITGRU,
                                                   CellKind.SITGRU_TANH_NORESET, CellKind.SITGRU_RELU]))
def test_gates_bounded_and_state_is_convex_combination(seed, kind):
    rng = np.random.default_rng(seed)
    p = random_params(kind, 2, 3, rng)
    h_prev = rng.uniform(-1, 1, size=3)
    s = step(p, rng.normal(size=2), h_prev)
    for gate in ("z", "r"):
        if gate in s.cache:
            assert np.all((s.cache[gate] > 0) & (s.cache[gate] < 1))
    lo = np.minimum(h_prev, s.cache["cand"]) - 1e-12
    hi = np.maximum(h_prev, s.cache["cand"]) + 1e-12
    assert np.all((s.h >= lo) & (s.h <= hi))
