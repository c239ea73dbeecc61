import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacritic.approximator import (KINDS, Approximator, ParamVector, finite_difference_gradient,
                                     gradcheck_case, load_checkpoint, relative_error, run_sequence,
                                     save_checkpoint)
from metacritic.errors import RejectedInputError, UsageError


def make(kind, in_dim, out_dim, hidden=(), seed=0):
    approx = Approximator(kind, in_dim, out_dim, "h", hidden)
    params = ParamVector.build(approx.param_entries())
    approx.initialize(params, np.random.default_rng(seed))
    return approx, params


def test_linear_identity_forward():
    approx, params = make("linear", 2, 2)
    params.get("h", "W")[...] = np.eye(2)
    params.get("h", "b")[...] = 0.0
    y, hidden = approx.forward(params, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(y, [1.0, 2.0])
    assert hidden is None


def test_mlp_zero_params_give_zero_output():
    approx, params = make("mlp", 3, 2, (5, 4))
    params.values[:] = 0.0
    y, _ = approx.forward(params, np.array([0.3, -7.0, 2.0]))
    np.testing.assert_array_equal(y, np.zeros(2))


def _lstm_by_hand(Wx, Wh, b, Wy, by, xs):
    """Scalar-loop evaluation of the gated cell, gate order (input, forget, output, candidate)."""
    n = len(Wh)
    h = [0.0] * n
    c = [0.0] * n
    outs = []
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    for x in xs:
        z = [sum(x[k] * Wx[k][j] for k in range(len(x))) + sum(h[k] * Wh[k][j] for k in range(n)) + b[j]
             for j in range(4 * n)]
        i = [sig(z[j]) for j in range(n)]
        f = [sig(z[n + j]) for j in range(n)]
        o = [sig(z[2 * n + j]) for j in range(n)]
        g = [math.tanh(z[3 * n + j]) for j in range(n)]
        c = [f[j] * c[j] + i[j] * g[j] for j in range(n)]
        h = [o[j] * math.tanh(c[j]) for j in range(n)]
        outs.append([sum(h[k] * Wy[k][m] for k in range(n)) + by[m] for m in range(len(by))])
    return outs


def test_recurrent_two_step_matches_hand_computation():
    approx, params = make("recurrent", 2, 1, (2,))
    Wx = [[0.5, -0.3, 0.1, 0.2, 0.4, -0.1, 0.3, 0.6], [-0.2, 0.1, 0.5, -0.4, 0.2, 0.3, -0.5, 0.1]]
    Wh = [[0.1, 0.2, -0.1, 0.3, 0.0, 0.1, 0.2, -0.3], [0.2, -0.1, 0.1, 0.0, 0.3, -0.2, 0.1, 0.4]]
    b = [0.1, 0.0, -0.1, 0.2, 0.0, 0.1, 0.0, -0.2]
    Wy = [[0.7], [-0.4]]
    by = [0.05]
    for name, val in (("Wx", Wx), ("Wh", Wh), ("b", b), ("Wy", Wy), ("by", by)):
        params.get("h", name)[...] = np.array(val)
    xs = [[1.0, -0.5], [0.3, 0.8]]
    got = run_sequence(approx, params, [np.array(x) for x in xs])
    want = _lstm_by_hand(Wx, Wh, b, Wy, by, xs)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g, w, rtol=0, atol=1e-12)


def test_linear_backward_is_outer_product():
    approx, params = make("linear", 3, 2)
    x = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -1.1])
    tape = approx.new_tape()
    approx.forward(params, x, tape=tape)
    grad = approx.backward(params, tape, [g])
    np.testing.assert_allclose(grad.get("h", "W"), np.outer(x, g))
    np.testing.assert_allclose(grad.get("h", "b"), g)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_output_gradient_gives_zero_parameter_gradient(kind):
    hidden = {"tabular": (), "linear": (), "mlp": (4,), "recurrent": (3,)}[kind]
    approx, params = make(kind, 3, 2, hidden)
    tape = approx.new_tape()
    out = run_sequence(approx, params, [np.eye(3)[0], np.eye(3)[2]] if approx.recurrent else [np.eye(3)[1]],
                       tape=tape)
    grad = approx.backward(params, tape, [np.zeros_like(y) for y in out])
    assert not np.any(grad.values)


def test_backward_without_forward_is_usage_error():
    approx, params = make("mlp", 2, 1, (3,))
    with pytest.raises(UsageError):
        approx.backward(params, approx.new_tape(), [])
    with pytest.raises(UsageError):
        approx.backward(params, None, [np.zeros(1)])


def test_dimension_mismatch_rejected():
    approx, params = make("linear", 3, 1)
    with pytest.raises(RejectedInputError):
        approx.forward(params, np.zeros(4))
    rec, rparams = make("recurrent", 2, 1, (3,))
    with pytest.raises(RejectedInputError):
        rec.forward(rparams, np.zeros(2))  # missing hidden
    with pytest.raises(RejectedInputError):
        approx.forward(params, np.zeros(3), rec.initial_hidden())


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    approx, params = make("mlp", 4, 3, (6, 5), seed=1)
    params.values[:] = rng.normal(scale=0.3, size=len(params))
    x = rng.normal(size=(2, 4))
    w = rng.normal(size=(2, 3))
    tape = approx.new_tape()
    approx.forward(params, x, tape=tape)
    analytic = approx.backward(params, tape, [w])
    numeric = finite_difference_gradient(approx, params, [x], lambda ys: float(np.sum(w * ys[0])))
    assert relative_error(analytic.values, numeric.values).max() < 1e-4


def test_fd_of_constant_loss_is_zero():
    approx, params = make("mlp", 2, 2, (3,))
    grad = finite_difference_gradient(approx, params, [np.ones(2)], lambda ys: 4.2)
    assert not np.any(grad.values)


def test_fd_of_sum_of_linear_outputs_is_repeated_input():
    approx, params = make("linear", 3, 2)
    x = np.array([0.5, -1.0, 2.0])
    grad = finite_difference_gradient(approx, params, [x], lambda ys: float(np.sum(ys[0])))
    np.testing.assert_allclose(grad.get("h", "W"), np.repeat(x[:, None], 2, axis=1), atol=1e-8)
    np.testing.assert_allclose(grad.get("h", "b"), np.ones(2), atol=1e-8)


def test_recurrent_three_step_squared_error_matches_fd():
    rng = np.random.default_rng(11)
    approx, params = make("recurrent", 3, 2, (4,))
    params.values[:] = rng.normal(scale=0.5, size=len(params))
    xs = [rng.normal(size=3) for _ in range(3)]
    targets = [rng.normal(size=2) for _ in range(3)]
    tape = approx.new_tape()
    ys = run_sequence(approx, params, xs, tape=tape)
    analytic = approx.backward(params, tape, [2 * (y - t) for y, t in zip(ys, targets)])
    numeric = finite_difference_gradient(
        approx, params, xs, lambda out: float(sum(np.sum((y - t) ** 2) for y, t in zip(out, targets))))
    assert relative_error(analytic.values, numeric.values).max() < 1e-4


def test_one_step_recurrent_equals_feedforward_cell():
    # with zero initial state one step is h = o * tanh(i * g), y = h Wy + by
    rng = np.random.default_rng(5)
    approx, params = make("recurrent", 2, 1, (3,))
    params.values[:] = rng.normal(scale=0.5, size=len(params))
    x = rng.normal(size=2)
    n = 3
    sig = lambda z: 1 / (1 + np.exp(-z))

    def feedforward(theta):
        p = params.with_values(theta)
        z = x @ p.get("h", "Wx") + p.get("h", "b")
        h = sig(z[2 * n:3 * n]) * np.tanh(sig(z[:n]) * np.tanh(z[3 * n:]))
        return float((h @ p.get("h", "Wy") + p.get("h", "by"))[0])

    eps = 1e-6
    numeric = np.zeros(len(params))
    for k in range(len(params)):
        up, down = params.values.copy(), params.values.copy()
        up[k] += eps
        down[k] -= eps
        numeric[k] = (feedforward(up) - feedforward(down)) / (2 * eps)
    tape = approx.new_tape()
    run_sequence(approx, params, [x], tape=tape)
    analytic = approx.backward(params, tape, [np.ones(1)])
    assert relative_error(analytic.values, numeric).max() < 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_gradcheck_fifty_cases(kind):
    rng = np.random.default_rng(2024)
    assert max(gradcheck_case(kind, rng) for _ in range(50)) < 1e-4


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(-10, 10), seed=st.integers(0, 2 ** 16))
def test_linear_is_homogeneous_without_bias(alpha, seed):
    approx, params = make("linear", 4, 3, seed=seed)
    x = np.random.default_rng(seed).normal(size=4)
    np.testing.assert_allclose(approx.forward(params, alpha * x)[0], alpha * approx.forward(params, x)[0],
                               rtol=1e-12, atol=1e-12)


def test_forward_is_deterministic():
    approx, params = make("recurrent", 3, 2, (4,))
    x = np.array([0.1, 0.2, 0.3])
    h = approx.initial_hidden()
    a = approx.forward(params, x, h)
    b = approx.forward(params, x, h)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1].c, b[1].c)


@pytest.mark.parametrize("kind", KINDS)
def test_output_dimension_and_hidden_presence(kind):
    hidden = {"tabular": (), "linear": (), "mlp": (4,), "recurrent": (3,)}[kind]
    approx, params = make(kind, 5, 3, hidden)
    y, h = approx.forward(params, np.eye(5)[:2], approx.initial_hidden(2))
    assert y.shape == (2, 3)
    assert (h is not None) == approx.recurrent


def test_param_segments_are_contiguous_and_cover_everything():
    entries = make("recurrent", 3, 2, (4,))[0].param_entries() + make("mlp", 3, 1, (2,))[0].param_entries()
    entries = [("a",) + e[1:] for e in entries[:5]] + [("b",) + e[1:] for e in entries[5:]]
    pv = ParamVector.build(entries)
    pos = 0
    for seg in pv.segments:
        assert seg.start == pos and seg.stop - seg.start == int(np.prod(seg.shape))
        pos = seg.stop
    assert pos == len(pv)


def test_init_scale_and_zero_biases():
    approx, params = make("mlp", 16, 2, (8,), seed=4)
    assert np.all(np.abs(params.get("h", "W0")) <= 1 / 4)
    assert not np.any(params.get("h", "b0"))


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    approx, params = make("recurrent", 3, 2, (4,), seed=9)
    params.values[0] = np.nextafter(0.1, 1.0)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, params, seed=123, meta={"note": "x"})
    loaded, seed, meta = load_checkpoint(path)
    assert seed == 123 and meta == {"note": "x"}
    assert loaded.values.tobytes() == params.values.tobytes()
    assert loaded.segments == params.segments
