import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import zsasr.tensor as tc
from zsasr.tensor import (EmaState, OptimState, Rng, ShapeError, Tensor,
                          adam_step, ema_init, ema_update, grad_check,
                          load_checkpoint, save_checkpoint)


def rnd(shape, seed=0, scale=1.0, shift=0.0):
    return Rng(seed).key("t").normal(shape, scale) + shift


# ---------------------------------------------------------------- forward ops


def test_log_sum_exp_of_known_values():
    out = tc.logsumexp(Tensor([math.log(1.0), math.log(3.0)]))
    assert abs(out.item() - math.log(4.0)) < 1e-12


def test_softmax_symmetry():
    out = tc.softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_square_backward_is_calculus_identity():
    x = Tensor(3.0, requires_grad=True)
    y = x ** 2
    y.backward()
    assert x.grad == pytest.approx(6.0)


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError) as exc:
        tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_forward_finite_on_finite_inputs():
    x = Tensor(rnd((4, 6), scale=200.0))  # large values stress the max-shift
    for out in (tc.softmax(x), tc.log_softmax(x), tc.logsumexp(x, axis=-1),
                tc.swish(x), tc.sigmoid(x)):
        assert np.isfinite(out.data).all()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
       st.floats(-50, 50))
def test_log_sum_exp_shift_invariance(values, c):
    x = np.array(values)
    lhs = tc.logsumexp(Tensor(x + c)).item()
    rhs = tc.logsumexp(Tensor(x)).item() + c
    assert abs(lhs - rhs) <= 1e-12


# ------------------------------------------------------------ gradient checks


def _binary(op, sa, sb):
    def build():
        p = {"a": Tensor(rnd(sa, 1), requires_grad=True),
             "b": Tensor(rnd(sb, 2), requires_grad=True)}
        return lambda q: tc.sum_(op(q["a"], q["b"]) ** 2), p
    return build


def _unary(op, shape=(3, 4), shift=0.0, **kw):
    def build():
        p = {"x": Tensor(rnd(shape, 3) + shift, requires_grad=True)}
        return lambda q: tc.sum_(op(q["x"], **kw) ** 2), p
    return build


def _ln_build():
    p = {"x": Tensor(rnd((3, 4), 4), requires_grad=True),
         "g": Tensor(rnd((4,), 5, 0.3, 1.0), requires_grad=True),
         "b": Tensor(rnd((4,), 6, 0.3), requires_grad=True)}
    return lambda q: tc.sum_(tc.layer_norm(q["x"], q["g"], q["b"]) ** 2), p


def _rnn_build():
    p = {"x": Tensor(rnd((5, 3), 7, 0.5), requires_grad=True),
         "h0": Tensor(rnd((4,), 8, 0.5), requires_grad=True),
         "wx": Tensor(rnd((3, 4), 9, 0.5), requires_grad=True),
         "wh": Tensor(rnd((4, 4), 10, 0.5), requires_grad=True),
         "b": Tensor(rnd((4,), 11, 0.5), requires_grad=True)}
    return (lambda q: tc.sum_(tc.rnn_scan(q["x"], q["h0"], q["wx"], q["wh"],
                                          q["b"]) ** 2), p)


def _mha_build():
    p = {"x": Tensor(rnd((4, 6), 30, 0.7), requires_grad=True)}
    for i, w in enumerate(("wq", "wk", "wv", "wo")):
        p[w] = Tensor(rnd((6, 6), 31 + i, 0.5), requires_grad=True)
    return (lambda q: tc.sum_(tc.mha(q["x"], q["wq"], q["wk"], q["wv"],
                                     q["wo"], 2) ** 2), p)


def _ffn_block_build():
    p = {"x": Tensor(rnd((3, 4), 40), requires_grad=True),
         "g": Tensor(rnd((4,), 41, 0.3, 1.0), requires_grad=True),
         "b": Tensor(rnd((4,), 42, 0.3), requires_grad=True),
         "w1": Tensor(rnd((4, 6), 43, 0.5), requires_grad=True),
         "b1": Tensor(rnd((6,), 44, 0.3), requires_grad=True),
         "w2": Tensor(rnd((6, 4), 45, 0.5), requires_grad=True),
         "b2": Tensor(rnd((4,), 46, 0.3), requires_grad=True)}
    return (lambda q: tc.sum_(tc.ffn_block(q["x"], q["g"], q["b"], q["w1"],
                                           q["b1"], q["w2"], q["b2"]) ** 2), p)


GRAD_CASES = {
    "mha": _mha_build,
    "ffn_block": _ffn_block_build,
    "add": _binary(tc.add, (3, 4), (3, 4)),
    "sub": _binary(tc.sub, (3, 4), (4,)),       # broadcast path
    "mul": _binary(tc.mul, (3, 4), (3, 1)),     # broadcast path
    "neg": _unary(tc.neg),
    "pow": _unary(lambda x: tc.pow_(x, 3.0)),
    "exp": _unary(tc.exp, shift=0.0),
    "log": _unary(tc.log, shift=4.0),
    "relu": _unary(tc.relu, shift=0.3),         # keep entries away from the kink
    "sigmoid": _unary(tc.sigmoid),
    "tanh": _unary(tc.tanh),
    "swish": _unary(tc.swish),
    "matmul": _binary(tc.matmul, (3, 4), (4, 2)),
    "transpose": _unary(lambda x: tc.transpose(x)),
    "reshape": _unary(lambda x: tc.reshape(x, (4, 3))),
    "concat": _binary(lambda a, b: tc.concat([a, b], axis=1), (3, 2), (3, 3)),
    "narrow": _unary(lambda x: tc.narrow(x, 0, 1, 2)),
    "take_rows": _unary(lambda x: tc.take_rows(x, [0, 2, 2, 1])),
    "repeat_rows": _unary(lambda x: tc.repeat_rows(x, [2, 1, 3])),
    "pick_per_row": _unary(lambda x: tc.pick_per_row(x, [1, 0, 3])),
    "embedding": _unary(lambda x: tc.embedding(x, [0, 1, 1, 2])),
    "sum": _unary(lambda x: tc.sum_(x, axis=0)),
    "mean": _unary(lambda x: tc.mean_(x, axis=1)),
    "logsumexp": _unary(lambda x: tc.logsumexp(x, axis=-1)),
    "softmax": _unary(tc.softmax),
    "log_softmax": _unary(tc.log_softmax),
    "layer_norm": _ln_build,
    "normalize_rows": _unary(tc.normalize_rows),
    "depthwise_conv1d": _binary(tc.depthwise_conv1d, (6, 3), (3, 3)),
    "rnn_scan": _rnn_build,
}


def test_grad_cases_cover_registry():
    missing = set(tc.OP_NAMES) - set(GRAD_CASES) - {"stop_grad"}
    assert not missing, f"ops without a gradient-check case: {missing}"


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradient_matches_finite_differences(name):
    f, params = GRAD_CASES[name]()
    report = grad_check(f, params, eps=1e-5, tol=1e-4)
    assert report.passed, f"{name}: max rel err {report.max_rel_err:.3e}"


def test_stop_grad_blocks_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = tc.sum_(tc.stop_grad(x) * x)
    y.backward()
    assert np.allclose(x.grad, x.data)  # only the live branch contributes


def test_grad_check_simple_quadratic():
    p = {"x": Tensor([1.0, 2.0], requires_grad=True)}
    report = grad_check(lambda q: tc.sum_(q["x"] ** 2), p, eps=1e-5, tol=1e-8)
    assert report.passed
    assert report.max_rel_err < 1e-8
    p["x"].grad = None
    out = tc.sum_(p["x"] ** 2)
    out.backward()
    assert np.allclose(p["x"].grad, [2.0, 4.0])


def test_grad_check_flags_nonfinite():
    p = {"x": Tensor([1.0], requires_grad=True)}
    report = grad_check(lambda q: tc.log(q["x"] - 2.0), p)
    assert report.nonfinite and not report.passed


# ------------------------------------------------------------------ optimizer


def test_adam_zero_gradient_leaves_params_unchanged():
    p = {"w": Tensor([1.0, -2.0], requires_grad=True)}
    st_ = OptimState(peak_lr=0.1, warmup_steps=10)
    before = p["w"].data.copy()
    adam_step(st_, p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"].data, before)


def test_warmup_schedule_at_step_one():
    st_ = OptimState(peak_lr=0.5, warmup_steps=100)
    assert st_.lr_at(1) == pytest.approx(0.5 / 100)
    assert st_.lr_at(100) == pytest.approx(0.5)
    assert st_.lr_at(400) == pytest.approx(0.5 * 0.5)  # sqrt(100/400)


def test_adam_two_steps_match_hand_recurrence():
    # hand-rolled reference for a single scalar parameter with constant grad 1
    peak, warm, b1, b2, eps = 0.2, 4, 0.9, 0.999, 1e-8
    w = 0.5
    m = v = 0.0
    for t in (1, 2):
        lr = peak * min(t / warm, math.sqrt(warm / t))
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)

    p = {"w": Tensor([0.5], requires_grad=True)}
    st_ = OptimState(peak_lr=peak, warmup_steps=warm, beta1=b1, beta2=b2, eps=eps)
    for _ in range(2):
        adam_step(st_, p, {"w": np.ones(1)})
    assert p["w"].data[0] == pytest.approx(w, abs=1e-14)


def test_nan_gradient_skips_step_and_counts():
    p = {"w": Tensor([1.0], requires_grad=True)}
    st_ = OptimState(peak_lr=0.1, warmup_steps=10)
    ok = adam_step(st_, p, {"w": np.array([math.nan])})
    assert not ok and st_.skipped == 1 and st_.step == 0
    assert p["w"].data[0] == 1.0


# ------------------------------------------------------------------------ EMA


def test_ema_geometric_series():
    p = {"w": Tensor([1.0], requires_grad=True)}
    st_ = EmaState(0.5, {"w": np.zeros(1)})
    for _ in range(3):
        ema_update(st_, p)
    assert st_.shadow["w"][0] == pytest.approx(0.875)


def test_ema_decay_zero_copies_params():
    p = {"w": Tensor([3.0], requires_grad=True)}
    st_ = ema_init(p, 0.0)
    p["w"].data[:] = 7.0
    ema_update(st_, p)
    assert st_.shadow["w"][0] == 7.0


def test_ema_converges_monotonically():
    p = {"w": Tensor([1.0], requires_grad=True)}
    st_ = EmaState(0.9999, {"w": np.zeros(1)})
    dists = []
    for _ in range(5):
        ema_update(st_, p)
        dists.append(abs(1.0 - st_.shadow["w"][0]))
    assert all(b < a for a, b in zip(dists, dists[1:]))


def test_ema_rejects_mismatched_params():
    p = {"w": Tensor([1.0], requires_grad=True)}
    st_ = EmaState(0.5, {"other": np.zeros(1)})
    with pytest.raises(ValueError):
        ema_update(st_, p)


# ------------------------------------------------------- determinism and PRNG


def _tiny_trajectory(seed):
    rng = Rng(seed)
    p = {"w": Tensor(rng.key("init").normal((4, 3)), requires_grad=True)}
    st_ = OptimState(peak_lr=0.05, warmup_steps=5)
    for step in range(5):
        x = Tensor(rng.key(f"data/{step}").normal((2, 4)))
        loss = tc.sum_(tc.matmul(x, p["w"]) ** 2)
        p["w"].grad = None
        loss.backward()
        adam_step(st_, p)
    return p["w"].data


def test_same_seed_bit_identical_trajectories():
    a = _tiny_trajectory(123)
    b = _tiny_trajectory(123)
    assert np.array_equal(a, b)


def test_rng_split_streams_are_stable_and_distinct():
    r = Rng(7)
    a = r.key("a").normal((3,))
    a2 = Rng(7).key("a").normal((3,))
    b = r.key("b").normal((3,))
    assert np.array_equal(a, a2)
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = Rng(0)
    p = {"enc.w": Tensor(rng.key("w").normal((3, 2)), requires_grad=True),
         "enc.b": Tensor(rng.key("b").normal((2,)), requires_grad=True)}
    st_ = OptimState(peak_lr=0.1, warmup_steps=10)
    adam_step(st_, p, {k: np.ones_like(v.data) for k, v in p.items()})
    ema = ema_init(p, 0.98)
    ema_update(ema, p)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, params=p, opt=st_, ema=ema, step=17, seed=99,
                    extra={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.step == 17 and ck.seed == 99 and ck.extra == {"note": "x"}
    assert ck.opt.step == st_.step and ck.opt.peak_lr == st_.peak_lr
    assert ck.ema.decay == 0.98
    for k in p:
        assert np.array_equal(ck.params[k].data, p[k].data)
        assert np.array_equal(ck.opt.m[k], st_.m[k])
        assert np.array_equal(ck.opt.v[k], st_.v[k])
        assert np.array_equal(ck.ema.shadow[k], ema.shadow[k])
