import numpy as np
import pytest
from hypothesis import given, strategies as st

from hierplan.nnet import (
    DenseNet,
    DenseSpec,
    NonFiniteGradient,
    OptimizerState,
    ParamLayout,
    ShapeError,
    Tape,
    TapeError,
    autodiff as ad,
    backward,
    forward,
    step,
)

import oracles


# --- dense forward / backward ---------------------------------------------------

def test_zero_net_outputs_zero():
    net = DenseNet(DenseSpec((4, 7, 3)))
    out, _ = forward(net, np.arange(4.0))
    assert np.array_equal(out, np.zeros(3))


def test_identity_layer():
    net = DenseNet.from_arrays(DenseSpec((3, 3)), [np.eye(3), np.zeros(3)])
    out, _ = forward(net, [1.0, -2.0, 0.5])
    assert out.tolist() == [1.0, -2.0, 0.5]


def test_forward_is_deterministic():
    net = DenseNet.init((5, 8, 8, 2), seed=4)
    x = np.linspace(-1, 1, 5)
    a, _ = forward(net, x)
    b, _ = forward(DenseNet.init((5, 8, 8, 2), seed=4), x)
    assert a.tobytes() == b.tobytes()


def test_input_width_mismatch():
    with pytest.raises(ShapeError):
        forward(DenseNet.init((3, 2)), np.zeros(4))


def test_zero_output_grad_gives_zero_gradients():
    net = DenseNet.init((3, 4, 2), seed=1)
    _, tape = forward(net, [0.3, -0.2, 0.9])
    pg, xg = backward(tape, np.zeros(2))
    assert not pg.any() and not xg.any()


def test_scalar_linear_chain_rule():
    net = DenseNet.from_arrays(DenseSpec((3, 1)), [np.array([[0.5], [-1.0], [2.0]]), np.zeros(1)])
    x = np.array([1.5, 2.0, -0.5])
    _, tape = forward(net, x)
    pg, xg = backward(tape, [3.0])
    W_grad = pg[:3]
    assert W_grad.tolist() == (x * 3.0).tolist()
    assert xg.tolist() == [1.5, -3.0, 6.0]


def test_tape_reuse_rejected():
    _, tape = forward(DenseNet.init((2, 2)), [1.0, 1.0])
    backward(tape, [1.0, 0.0])
    with pytest.raises(TapeError):
        backward(tape, [1.0, 0.0])


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_three_layer_gradients_match_finite_differences(seed, activation):
    rng = np.random.default_rng(seed)
    net = DenseNet.init((4, 6, 5, 3), activation=activation, seed=seed)
    net.params = net.params + rng.normal(0, 0.1, net.params.size)  # non-zero biases
    x = rng.normal(size=4)
    w = rng.normal(size=3)
    _, tape = forward(net, x)
    pg, xg = backward(tape, w)

    def loss_p(p):
        return float(forward(DenseNet(net.spec, p), x)[0] @ w)

    def loss_x(xx):
        return float(forward(net, xx)[0] @ w)

    for i, fd in oracles.central_diff(loss_p, net.params).items():
        assert oracles.rel_err(pg[i], fd) <= 1e-4
    for i, fd in oracles.central_diff(loss_x, x).items():
        assert oracles.rel_err(xg[i], fd) <= 1e-4


def test_flatten_round_trip():
    net = DenseNet.init((3, 5, 2), seed=9)
    assert DenseNet.from_arrays(net.spec, net.unflatten()) == net
    assert DenseNet(net.spec, net.flatten()) == net


def test_parameter_count():
    assert DenseSpec((4, 6, 5, 3)).n_params == 4 * 6 + 6 + 6 * 5 + 5 + 5 * 3 + 3


def test_glorot_bounds():
    net = DenseNet.init((30, 20), seed=0)
    W = net.unflatten()[0]
    lim = np.sqrt(6 / 50)
    assert np.all(np.abs(W) <= lim) and np.abs(W).max() > 0.8 * lim


# --- tape ops -------------------------------------------------------------------

def _check_op(fn, *arrays, seed=0):
    """Reverse-mode gradient of sum(fn(*vars) * weights) against central differences."""
    rng = np.random.default_rng(seed)
    tape = Tape()
    vs = [tape.leaf(a) for a in arrays]
    out = fn(*vs)
    w = rng.normal(size=out.shape)
    tape.backward((out * w).sum())
    for k, a in enumerate(arrays):
        def f(x, k=k):
            t = Tape()
            args = [t.const(x if j == k else arrays[j]) for j in range(len(arrays))]
            return float(np.sum(fn(*args).value * w))

        for i, fd in oracles.central_diff(f, a).items():
            g = vs[k].grad.reshape(-1)[i] if vs[k].grad is not None else 0.0
            assert oracles.rel_err(g, fd) <= 1e-4, (fn, k, i, g, fd)


def test_elementwise_ops(rng):
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (3, 4))
    for fn in [ad.add, ad.sub, ad.mul, ad.div, lambda x, y: ad.minimum(x, y)]:
        _check_op(fn, a, b)
    for fn in [ad.tanh, ad.softplus, ad.exp, ad.log, ad.sqrt, ad.square, lambda x: ad.clip(x, 0.8, 1.5)]:
        _check_op(fn, a)


def test_broadcasting_ops(rng):
    _check_op(ad.add, rng.normal(size=(3, 4)), rng.normal(size=(4,)))
    _check_op(ad.mul, rng.normal(size=(3, 4)), rng.normal(size=(3, 1)))


def test_structural_ops(rng):
    a = rng.normal(size=(4, 3))
    _check_op(lambda x: x @ x.T, a)
    _check_op(lambda x: ad.softmax(x, axis=1), a)
    _check_op(lambda x: ad.concat([x, x * 2.0], axis=1), a)
    _check_op(lambda x: ad.stack([x[0], x[2]], axis=0), a)
    _check_op(lambda x: x.reshape(2, 6).sum(axis=0), a)
    _check_op(lambda x: x[1:3].mean(), a)
    _check_op(lambda x: ad.row_norm(x), a)
    _check_op(lambda x: ad.vabs(x), a + np.sign(a) * 0.1)


def test_grid_ops(rng):
    grid = rng.normal(size=(4, 5, 2))
    _check_op(ad.stencil3x3, grid)
    u = np.array([0.3, 2.7, 3.5, 1.0 + 1e-3])
    v = np.array([0.2, 1.4, 2.9, 0.6])
    _check_op(lambda g, uu, vv: ad.bilinear(g, uu, vv), grid, u, v)


def test_bilinear_reproduces_cell_values_and_clamps(rng):
    grid = rng.normal(size=(3, 4, 2))
    t = Tape()
    out = ad.bilinear(t.const(grid), np.array([0.0, 3.0, -5.0, 9.0]), np.array([0.0, 2.0, 1.0, -1.0])).value
    np.testing.assert_array_equal(out[0], grid[0, 0])
    np.testing.assert_array_equal(out[1], grid[2, 3])
    np.testing.assert_array_equal(out[2], grid[1, 0])
    np.testing.assert_array_equal(out[3], grid[0, 3])


def test_row_norm_subgradient_at_zero():
    t = Tape()
    x = t.leaf(np.zeros((2, 2)))
    t.backward(ad.row_norm(x).sum())
    assert np.array_equal(x.grad, np.zeros((2, 2)))


def test_backward_needs_scalar_or_grad():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        t.backward(x * 2.0)


def test_mixing_tapes_rejected():
    a, b = Tape().leaf(np.ones(2)), Tape().leaf(np.ones(2))
    with pytest.raises(TapeError):
        ad.add(a, b)


# --- optimizers -----------------------------------------------------------------

def test_zero_grads_leave_params_unchanged():
    p = np.array([1.0, -2.0, 3.0])
    for kind in ("sgd", "adam"):
        opt = OptimizerState.create(kind, 0.1, 3)
        assert np.array_equal(step(opt, p, np.zeros(3)), p)


def test_sgd_unit_lr_on_params_gives_zero():
    p = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(step(OptimizerState.create("sgd", 1.0, 3), p, p.copy()), np.zeros(3))


def test_adam_first_step_by_hand():
    # m1 = 0.1 g, v1 = 0.001 g^2, mhat = g, vhat = g^2 -> update lr * g / (|g| + eps)
    g = np.array([0.5, -2.0, 1e-3])
    opt = OptimizerState.create("adam", 0.01, 3)
    new = step(opt, np.zeros(3), g)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new, expected, rtol=1e-12, atol=0)
    assert opt.step_count == 1


def test_adam_second_step_by_hand():
    g1, g2 = np.array([1.0, -1.0]), np.array([0.5, 2.0])
    opt = OptimizerState.create("adam", 0.1, 2)
    p = step(opt, np.zeros(2), g1)
    p = step(opt, p, g2)
    m = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.999 * (0.001 * g1**2) + 0.001 * g2**2
    upd2 = 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(p, -0.1 * g1 / (np.abs(g1) + 1e-8) - upd2, rtol=1e-12)


def test_non_finite_gradient_aborts_step():
    opt = OptimizerState.create("adam", 0.1, 2)
    with pytest.raises(NonFiniteGradient):
        step(opt, np.zeros(2), np.array([np.nan, 1.0]))
    assert opt.step_count == 0 and not opt.m.any()


def test_mask_freezes_entries_and_their_moments():
    opt = OptimizerState.create("adam", 0.1, 3)
    mask = np.array([True, False, True])
    p = step(opt, np.ones(3), np.array([1.0, 1.0, 1.0]), mask)
    assert p[1] == 1.0 and opt.m[1] == 0.0 and p[0] < 1.0


def test_gradient_clipping_caps_norm():
    opt = OptimizerState.create("sgd", 1.0, 2, grad_clip=1.0)
    p = step(opt, np.zeros(2), np.array([30.0, 40.0]))
    np.testing.assert_allclose(p, [-0.6, -0.8])


def test_bad_optimizer_config():
    with pytest.raises(ValueError):
        OptimizerState.create("rmsprop", 0.1, 2)
    with pytest.raises(ValueError):
        OptimizerState.create("sgd", 0.0, 2)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_sgd_matches_formula(vals):
    p = np.array(vals)
    g = np.cos(p)
    np.testing.assert_array_equal(step(OptimizerState.create("sgd", 0.3, len(p)), p, g), p - 0.3 * g)


# --- parameter layout -------------------------------------------------------------

def test_layout_slices_and_masks():
    lay = ParamLayout()
    lay.add_dense("a/net", DenseSpec((2, 3)))
    lay.add_array("b/q", (2, 2))
    assert lay.size == 9 + 4
    assert lay.slice("b/q") == slice(9, 13)
    assert lay.group_of("a/").sum() == 9
    with pytest.raises(ValueError):
        lay.add_array("b/q", (1,))


def test_bound_gradients_land_in_flat_vector():
    lay = ParamLayout()
    lay.add_dense("net", DenseSpec((2, 1)))
    lay.add_array("q", (3,))
    flat = np.arange(1.0, 7.0)
    t = Tape()
    b = lay.bind(t, flat)
    x = t.const(np.array([[2.0, -1.0]]))
    y = (x @ b["net"][0] + b["net"][1]).sum() + (b["q"] * b["q"]).sum()
    t.backward(y)
    g = b.grad()
    assert g.tolist() == [2.0, -1.0, 1.0, 8.0, 10.0, 12.0]
