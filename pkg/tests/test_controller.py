import numpy as np
import pytest

from mnm import controller
from mnm.autodiff import Tape, Tensor, grad, sum_all, add
from oracles import fd_grad, max_rel_err

D_I, D_H, D_K, D_V, D_O, HEADS = 5, 6, 4, 3, 7, 2


def zero_params():
    rng = np.random.default_rng(0)
    params = controller.init_params(rng, D_I, D_H, D_K, D_V, D_O, HEADS)
    return {k: np.zeros_like(v) for k, v in params.items()}


def as_tensors(params):
    return {k: Tensor(v) for k, v in params.items()}


def test_zero_weights_give_zero_hidden_state():
    params = as_tensors(zero_params())
    state = controller.initial_state(2, D_H, D_V)
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, D_I)))
    out = controller.lstm_step(params, state, x)
    assert np.array_equal(out.h.data, np.zeros((2, D_H)))
    assert np.array_equal(out.c.data, np.zeros((2, D_H)))


def test_lstm_step_deterministic():
    rng = np.random.default_rng(3)
    params = controller.init_params(rng, D_I, D_H, D_K, D_V, D_O, HEADS)
    x = np.random.default_rng(4).uniform(-1, 1, (1, D_I))

    def run():
        state = controller.initial_state(1, D_H, D_V)
        out = controller.lstm_step(as_tensors(params), state, Tensor(x.copy()))
        return out.h.data.copy()

    assert np.array_equal(run(), run())


def test_lstm_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    params = controller.init_params(rng, D_I, D_H, D_K, D_V, D_O, HEADS)
    x = rng.uniform(-1, 1, (2, D_I))

    def loss_for(w):
        p = dict(params)
        p["lstm_w"] = w
        state = controller.initial_state(2, D_H, D_V)
        out = controller.lstm_step(as_tensors(p), state, Tensor(x))
        return float(out.h.data.sum())

    with Tape() as t:
        tensors = {k: t.leaf(v) for k, v in params.items()}
        state = controller.initial_state(2, D_H, D_V)
        out = controller.lstm_step(tensors, state, Tensor(x))
        g = grad(sum_all(out.h), [tensors["lstm_w"]])[0].data
    fd = fd_grad(lambda arrs: loss_for(arrs[0]), [params["lstm_w"]])[0]
    assert max_rel_err(g, fd, floor=1e-4) < 1e-5


def test_zero_interaction_weights():
    params = as_tensors(zero_params())
    h = Tensor(np.random.default_rng(6).uniform(-1, 1, (3, D_H)))
    iset = controller.emit_interactions(params, h, D_K, D_V, HEADS)
    for key in iset.read_keys + iset.write_keys + iset.target_values:
        assert np.array_equal(key.data, np.zeros_like(key.data))
    # rate bias is zero, so the squashed rate sits at 1/2
    assert np.allclose(iset.rate.data, 0.5)


def test_interaction_vector_width():
    rng = np.random.default_rng(7)
    params = controller.init_params(rng, D_I, D_H, D_K, D_V, D_O, HEADS)
    assert params["inter_w"].shape == (D_H, 2 * HEADS * D_K + HEADS * D_V + D_K)


def test_interaction_slices_land_in_declared_order():
    # single head, 2-dim keys/values: hand-set rows so each slice is readable
    d_k = d_v = 2
    heads = 1
    width = 2 * heads * d_k + heads * d_v + d_k  # read, write, value, raw rate
    params = zero_params()
    inter_w = np.zeros((D_H, width))
    # h = e_0 scaled; row 0 of inter_w is the active row
    inter_w[0] = np.arctanh(np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]))
    params["inter_w"] = inter_w
    params["inter_b"] = np.zeros((1, width))
    params["rate_w"] = np.zeros((d_k, 1))
    h = np.zeros((1, D_H))
    h[0, 0] = 1.0
    iset = controller.emit_interactions(as_tensors(params), Tensor(h),
                                        d_k, d_v, heads)
    assert np.allclose(iset.read_keys[0].data, [[0.1, 0.2]])
    assert np.allclose(iset.write_keys[0].data, [[0.3, 0.4]])
    assert np.allclose(iset.target_values[0].data, [[0.5, 0.6]])
    assert np.allclose(iset.rate_raw.data, [[0.7, 0.8]])


def test_interactions_bounded_and_pure():
    rng = np.random.default_rng(8)
    params = controller.init_params(rng, D_I, D_H, D_K, D_V, D_O, HEADS)
    h = rng.uniform(-5, 5, (4, D_H))
    a = controller.emit_interactions(as_tensors(params), Tensor(h), D_K, D_V, HEADS)
    b = controller.emit_interactions(as_tensors(params), Tensor(h), D_K, D_V, HEADS)
    for ka, kb in zip(a.read_keys + a.write_keys + a.target_values,
                      b.read_keys + b.write_keys + b.target_values):
        assert np.array_equal(ka.data, kb.data)
        assert np.all(np.abs(ka.data) < 1.0)
    assert np.all((a.rate.data > 0.0) & (a.rate.data < 1.0))


def test_output_head_zero_weights_returns_bias():
    params = zero_params()
    params["out_b"] = np.arange(D_O, dtype=np.float64).reshape(1, -1)
    h = Tensor(np.random.default_rng(9).uniform(-1, 1, (2, D_H)))
    v = Tensor(np.random.default_rng(10).uniform(-1, 1, (2, D_V)))
    y = controller.output_head(as_tensors(params), h, v)
    assert np.array_equal(y.data, np.tile(params["out_b"], (2, 1)))


def test_output_head_zero_read_uses_hidden_columns_only():
    rng = np.random.default_rng(11)
    params = controller.init_params(rng, D_I, D_H, D_K, D_V, D_O, HEADS)
    h = rng.uniform(-1, 1, (2, D_H))
    y = controller.output_head(as_tensors(params), Tensor(h),
                               Tensor(np.zeros((2, D_V))))
    expected = h @ params["out_w"][:D_H] + params["out_b"]
    assert np.allclose(y.data, expected)


def test_output_head_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    params = controller.init_params(rng, D_I, D_H, D_K, D_V, D_O, HEADS)
    h = rng.uniform(-1, 1, (2, D_H))
    v = rng.uniform(-1, 1, (2, D_V))

    def val(w):
        p = dict(params)
        p["out_w"] = w
        out = controller.output_head(as_tensors(p), Tensor(h), Tensor(v))
        return float((out.data ** 2).sum())

    with Tape() as t:
        tensors = {k: t.leaf(vv) for k, vv in params.items()}
        out = controller.output_head(tensors, Tensor(h), Tensor(v))
        from mnm.autodiff import mul
        g = grad(sum_all(mul(out, out)), [tensors["out_w"]])[0].data
    fd = fd_grad(lambda arrs: val(arrs[0]), [params["out_w"]])[0]
    assert max_rel_err(g, fd, floor=1e-4) < 1e-5


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(13)
    params = controller.init_params(rng, D_I, D_H, D_K, D_V, D_O, HEADS)
    x = rng.uniform(-1, 1, (2, D_I))
    with Tape() as t:
        tensors = {k: t.leaf(v) for k, v in params.items()}
        state = controller.initial_state(2, D_H, D_V)
        state = controller.lstm_step(tensors, state, Tensor(x))
        iset = controller.emit_interactions(tensors, state.h, D_K, D_V, HEADS)
        y = controller.output_head(tensors, state.h, iset.target_values[0])
        loss = sum_all(y)
        for vec in iset.read_keys + iset.write_keys + [iset.rate]:
            loss = add(loss, sum_all(vec))
        grads = grad(loss, list(tensors.values()))
    for name, g in zip(tensors, grads):
        assert np.any(g.data != 0.0), f"no gradient reached {name}"


def test_forget_gate_bias_initialized_to_one():
    rng = np.random.default_rng(14)
    params = controller.init_params(rng, D_I, D_H, D_K, D_V, D_O, HEADS)
    bias = params["lstm_b"][0]
    assert np.all(bias[D_H:2 * D_H] == 1.0)
    assert np.all(bias[:D_H] == 0.0)
