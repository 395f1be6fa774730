import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptnet import rnn_core as rc
from adaptnet.errors import ValidationError


def summation_step():
    # y_i = x_i + y_{i-1}, the paper's running-sum block
    d = rc.dnn([[[1.0, 1.0], [-1.0, -1.0]], [[1.0, -1.0]]])
    return rc.BasicRnn(dnn=d, input_size=1, output_size=1)


def halving_step(in_cols):
    # y_i = (sel . x_i + y_{i-1}) / 2 reading the given input columns
    row = [0.0] * (in_cols + 1)
    for c, wgt in ((in_cols - 1, 0.5), (in_cols, 0.5)):
        row[c] = wgt
    w0 = np.array([row, [-v for v in row]])
    d = rc.dnn([w0, [[1.0, -1.0]]])
    return rc.BasicRnn(dnn=d, input_size=in_cols, output_size=1)


def test_identity_dnn():
    net = rc.identity_dnn(1)
    assert rc.eval_dnn(net, [-3.5])[0] == -3.5
    assert rc.eval_dnn(net, [2.25])[0] == 2.25


def test_matrix_dnn():
    net = rc.matrix_dnn([[2.0, 0.0], [0.0, 3.0]])
    out = rc.eval_dnn(net, [1.0, 1.0])
    assert np.array_equal(out, [2.0, 3.0])


def test_summation_dnn_single_step():
    d = summation_step().dnn
    assert rc.eval_dnn(d, [2.0, 5.0])[0] == 7.0


def test_summation_rnn():
    net = summation_step()
    ys = rc.eval_basic_rnn(net, np.array([[1.0], [2.0], [3.0], [4.0]]))
    assert ys[-1, 0] == 10.0
    assert np.array_equal(ys[:, 0], [1.0, 3.0, 6.0, 10.0])


def test_zero_sequence():
    net = summation_step()
    ys = rc.eval_basic_rnn(net, np.zeros((5, 1)))
    assert np.all(ys == 0.0)


def test_halving_rnn():
    net = halving_step(1)
    ys = rc.eval_basic_rnn(net, rc.impulse_sequence([8.0], 3))
    assert ys[-1, 0] == 1.0


def test_deep_rnn_single_stage_equals_basic():
    net = summation_step()
    deep = rc.deep([net], wiring=[rc.PLAIN])
    xs = np.array([[1.0], [5.0], [2.0]])
    assert np.array_equal(rc.eval_deep_rnn(deep, xs), rc.eval_basic_rnn(net, xs))


def test_deep_rnn_init_with_last():
    stages = [summation_step(), halving_step(2)]
    deep = rc.deep(stages)
    ys = rc.eval_deep_rnn(deep, np.array([[1.0], [2.0], [3.0]]))
    assert np.array_equal(ys[:, 0], [3.0, 1.5, 0.75])


def test_stacked_identity_stages():
    eye = rc.identity_dnn(2)
    w0 = np.zeros((eye.mats[0].shape[0], 4))
    w0[:, :2] = eye.dense(0)
    stage = rc.BasicRnn(
        dnn=rc.dnn([w0] + [eye.dense(j) for j in range(1, len(eye.mats))]),
        input_size=2,
        output_size=2,
    )
    deep = rc.deep([stage, _double_input(stage)], wiring=[rc.PLAIN, rc.INIT_WITH_LAST])
    xs = np.random.default_rng(0).normal(size=(6, 2))
    out = rc.eval_deep_rnn(deep, xs)
    assert np.array_equal(out, xs)


def _double_input(stage):
    # widen an elementwise stage to accept duplicated init channels (ignored)
    d = stage.dnn
    w0 = d.dense(0)
    s, s_out = stage.input_size, stage.output_size
    nw = np.zeros((w0.shape[0], 2 * s + s_out))
    nw[:, :s] = w0[:, :s]
    nw[:, 2 * s :] = w0[:, s:]
    return rc.BasicRnn(
        dnn=rc.dnn([nw] + [d.dense(j) for j in range(1, len(d.mats))]),
        input_size=2 * s,
        output_size=s_out,
    )


def test_compose_exact():
    a = rc.matrix_dnn([[2.0, 1.0]])
    b = rc.identity_dnn(2, depth=2)
    c = rc.compose(a, b)
    for x in ([0.3, -0.7], [1.5, 2.5], [-1.0, -2.0]):
        assert rc.eval_dnn(c, x) == pytest.approx(rc.eval_dnn(a, rc.eval_dnn(b, x)))
        assert np.array_equal(rc.eval_dnn(c, x), rc.eval_dnn(a, rc.eval_dnn(b, x)))


def test_parallel_identities():
    net = rc.parallel(rc.identity_dnn(1), rc.identity_dnn(1))
    out = rc.eval_dnn(net, [1.0, 2.0])
    assert np.array_equal(out, [1.0, 2.0])


def test_parallel_depth_bound():
    a = rc.matrix_dnn([[1.0]])  # depth 2
    b = rc.identity_dnn(1, depth=5)
    c = rc.parallel(a, b)
    assert c.depth <= max(a.depth, b.depth) + 2
    out = rc.eval_dnn(c, [3.0, -4.0])
    assert np.array_equal(out, [3.0, -4.0])


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(min_value=-100, max_value=100), min_size=1, max_size=9),
)
def test_unroll_matches_scan_bitwise(xs):
    net = summation_step()
    n = len(xs)
    flat = np.array(xs)
    unrolled = rc.unroll(net, n)
    got = rc.eval_dnn(unrolled, flat)
    want = rc.eval_basic_rnn(net, flat.reshape(-1, 1))[:, 0]
    assert np.array_equal(got, want)


def test_unroll_example():
    net = summation_step()
    unrolled = rc.unroll(net, 4)
    out = rc.eval_dnn(unrolled, [1.0, 2.0, 3.0, 4.0])
    assert out[-1] == 10.0


def test_unroll_budget_independent_constant():
    net = summation_step()
    budgets = [rc.unroll(net, n).budget() for n in (2, 4, 8)]
    assert budgets[0].independent_weights == budgets[1].independent_weights
    assert budgets[1].independent_weights == budgets[2].independent_weights
    assert budgets[0].total_weights < budgets[1].total_weights < budgets[2].total_weights


def test_pass_through_basic():
    net = rc.pass_through(summation_step(), extra=1)
    xs = np.array([[1.0, 9.0], [2.0, -3.0], [3.0, 0.5]])
    ys = rc.eval_basic_rnn(net, xs)
    assert np.array_equal(ys[:, 0], [1.0, 3.0, 6.0])
    assert np.array_equal(ys[:, 1], xs[:, 1])


def test_batched_scan_matches_loop():
    net = summation_step()
    rng = np.random.default_rng(1)
    batch = rng.normal(size=(5, 7, 1))
    got = rc.eval_basic_rnn(net, batch)
    for b in range(5):
        assert np.array_equal(got[b], rc.eval_basic_rnn(net, batch[b]))


def test_budget_counts():
    d = summation_step().dnn
    b = d.budget()
    assert b.total_weights == 4 + 2
    assert b.independent_weights <= b.total_weights


def test_dim_mismatch_raises():
    net = summation_step()
    with pytest.raises(ValidationError):
        rc.eval_basic_rnn(net, np.zeros((3, 2)))
    with pytest.raises(ValidationError):
        rc.eval_dnn(net.dnn, np.zeros(5))


def test_dnn_serialization_roundtrip():
    net = rc.matrix_dnn([[1.5, -2.25], [0.125, 3.0]])
    text = rc.dnn_to_text(net)
    back = rc.dnn_from_text(text)
    x = np.array([0.7, -0.3])
    assert np.array_equal(rc.eval_dnn(back, x), rc.eval_dnn(net, x))
    assert rc.dnn_to_text(back) == text


def test_deep_serialization_roundtrip():
    deep = rc.deep([summation_step(), halving_step(2)])
    text = rc.deep_rnn_to_text(deep)
    back = rc.deep_rnn_from_text(text)
    xs = np.array([[1.0], [2.0], [3.0]])
    assert np.array_equal(rc.eval_deep_rnn(back, xs), rc.eval_deep_rnn(deep, xs))
    assert rc.deep_rnn_to_text(back) == text
