import math

import numpy as np
import pytest

from dpfaga import nn
from dpfaga.nn import (
    Adam, DegenerateRange, LossCurves, NonFiniteLoss, ParamStore, ShapeError,
    Tensor, TrainConfig, glorot_uniform, mse, nrmse, train,
)


def finite_diff_grad(build_loss, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. one input array."""
    g = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x0.copy(); xp[idx] += h
        xm = x0.copy(); xm[idx] -= h
        g[idx] = (build_loss(xp) - build_loss(xm)) / (2 * h)
        it.iternext()
    return g


def check_op_grad(op_of_inputs, *shapes, seed=0, tol=1e-4):
    """FD-check the gradient of a scalar-valued composition in every input."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    for k in range(len(arrays)):
        tensors = [Tensor(a) for a in arrays]
        out = op_of_inputs(*tensors)
        out.backward()
        got = tensors[k].grad

        def loss_at(xk, k=k):
            vals = [a.copy() for a in arrays]
            vals[k] = xk
            return float(op_of_inputs(*[Tensor(v) for v in vals]).data[0, 0])

        want = finite_diff_grad(loss_at, arrays[k])
        denom = max(np.max(np.abs(want)), 1e-8)
        rel = np.max(np.abs(got - want)) / denom
        assert rel < tol, f"input {k}: max relative gradient error {rel:.2e}"


def test_activation_values():
    assert nn.activation(Tensor([[0.0]]), "tanh").data[0, 0] == 0.0
    assert nn.activation(Tensor([[0.0]]), "sigmoid").data[0, 0] == 0.5
    assert nn.activation(Tensor([[-1.0]]), "relu").data[0, 0] == 0.0


def test_softmax_uniform_rows():
    p = nn.softmax_rows(Tensor(np.zeros((3, 5)))).data
    assert np.max(np.abs(p - 0.2)) < 1e-15
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12
    assert np.all(p >= 0)


def test_softmax_random_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = nn.softmax_rows(Tensor(rng.standard_normal((6, 9)) * 5)).data
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12
        assert np.all(p >= 0)


def test_matmul_grad():
    check_op_grad(lambda a, b: nn.mean_all(nn.matmul(a, b)), (4, 3), (3, 5))


def test_add_bias_grad():
    check_op_grad(lambda x, b: nn.mean_all(nn.mul(nn.add_bias(x, b), nn.add_bias(x, b))),
                  (4, 3), (1, 3))


def test_elementwise_grads():
    check_op_grad(lambda a, b: nn.mean_all(nn.mul(a, b)), (3, 4), (3, 4))
    check_op_grad(lambda a, b: nn.mean_all(nn.mul(nn.sub(a, b), nn.sub(a, b))), (3, 4), (3, 4))
    check_op_grad(lambda a, b: nn.mean_all(nn.mul(nn.add(a, b), a)), (3, 4), (3, 4))


def test_activation_grads():
    for kind in ("sigmoid", "tanh", "identity"):
        check_op_grad(lambda x, kind=kind: nn.mean_all(nn.mul(nn.activation(x, kind),
                                                              nn.activation(x, kind))), (4, 4))
    # relu checked away from the kink
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((4, 4))
    x0[np.abs(x0) < 0.05] = 0.5
    t = Tensor(x0)
    out = nn.mean_all(nn.activation(t, "relu"))
    out.backward()
    want = finite_diff_grad(lambda x: float(np.mean(np.maximum(x, 0.0))), x0)
    assert np.max(np.abs(t.grad - want)) < 1e-6


def test_concat_grad():
    check_op_grad(lambda a, b: nn.mean_all(nn.mul(nn.concat_cols(a, b), nn.concat_cols(a, b))),
                  (3, 2), (3, 4))


def test_softmax_grad():
    check_op_grad(lambda x, w: nn.mean_all(nn.mul(nn.softmax_rows(x), w)), (4, 5), (4, 5))


def test_masked_softmax_grad():
    rng = np.random.default_rng(8)
    mask = rng.random((4, 5)) > 0.3
    mask[:, 0] = True  # keep every row non-empty
    check_op_grad(lambda x, w: nn.mean_all(nn.mul(nn.masked_softmax_rows(x, mask), w)),
                  (4, 5), (4, 5))


def test_masked_softmax_values():
    mask = np.array([[True, False, True]])
    p = nn.masked_softmax_rows(Tensor([[1.0, 99.0, 1.0]]), mask).data
    assert p[0, 1] == 0.0
    assert abs(p[0, 0] - 0.5) < 1e-12 and abs(p[0, 2] - 0.5) < 1e-12


def test_mse_loss_grad():
    rng = np.random.default_rng(9)
    truth = rng.standard_normal((4, 3))
    check_op_grad(lambda p: nn.mse_loss(p, truth), (4, 3))


def test_cross_entropy_grad():
    rng = np.random.default_rng(10)
    targets = rng.dirichlet(np.ones(4), size=5)
    weights = rng.random(5)
    check_op_grad(lambda z: nn.cross_entropy_rows(z, targets, weights), (5, 4))


def test_transpose_and_scale_grads():
    check_op_grad(lambda a, b: nn.mean_all(nn.matmul(nn.transpose(a), b)), (3, 4), (3, 5))
    check_op_grad(lambda a: nn.mean_all(nn.scale(nn.mul(a, a), 2.5)), (3, 3))


def test_affine_cols_grad():
    s = np.array([2.0, -1.0, 0.5])
    m = np.array([0.1, 0.2, 0.3])
    check_op_grad(lambda x: nn.mean_all(nn.mul(nn.affine_cols(x, s, m), nn.affine_cols(x, s, m))),
                  (4, 3))


def test_graph_primitive_grads():
    n = 4
    rng = np.random.default_rng(11)
    a_hat = rng.random((n, n))
    check_op_grad(lambda x: nn.mean_all(nn.mul(nn.graph_propagate(x, a_hat, n),
                                               nn.graph_propagate(x, a_hat, n))), (8, 3))
    check_op_grad(lambda s, t: nn.mean_all(nn.mul(nn.pair_scores(s, t, n),
                                                  nn.pair_scores(s, t, n))), (8, 1), (8, 1))
    check_op_grad(lambda l, h: nn.mean_all(nn.mul(nn.block_matmul(l, h, n),
                                                  nn.block_matmul(l, h, n))), (8, 4), (8, 3))
    check_op_grad(lambda h: nn.mean_all(nn.mul(nn.unstack_merge(h, n), nn.unstack_merge(h, n))),
                  (8, 2))


def test_split_stack_roundtrip():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((5, 8))
    stacked = nn.split_stack(x, 4)
    assert stacked.shape == (20, 2)
    # node i of sample b carries (x[b, i], x[b, 4 + i])
    assert stacked[3, 0] == x[0, 3] and stacked[3, 1] == x[0, 7]
    merged = nn.unstack_merge(Tensor(stacked), 4).data
    assert np.array_equal(merged, x)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError, match="shapes differ"):
        nn.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_mse_and_nrmse_values():
    assert mse(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0]])) == 0.0
    # one dimension: truth [0,1,2], pred [1,1,1] -> mse 2/3, nrmse sqrt(2/3)/2
    truth = np.array([[0.0], [1.0], [2.0]])
    pred = np.ones((3, 1))
    assert abs(mse(pred, truth) - 2.0 / 3.0) < 1e-15
    assert abs(nrmse(pred, truth) - math.sqrt(2.0 / 3.0) / 2.0) < 1e-12
    assert abs(nrmse(pred, truth) - 0.40825) < 1e-5


def test_nrmse_degenerate_range():
    truth = np.array([[1.0, 0.0], [1.0, 1.0]])
    with pytest.raises(DegenerateRange):
        nrmse(truth.copy(), truth)
    # skip_constant drops the flat column instead
    assert nrmse(truth.copy(), truth, skip_constant=True) == 0.0


class LinearModel:
    """1-layer linear regressor used as the convex training testbed."""

    def __init__(self, n_in, n_out, seed=0):
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        self.w = self.params.add("w", glorot_uniform(rng, n_in, n_out))
        self.b = self.params.add("b", np.zeros((1, n_out)))

    def fit_scalers(self, x, y):
        pass

    def _forward(self, x):
        return nn.add_bias(nn.matmul(Tensor(x), self.w), self.b)

    def loss_tensor(self, x, y):
        return nn.mse_loss(self._forward(x), y)

    def predict(self, x):
        return self._forward(x).data


@pytest.fixture(scope="module")
def linear_problem():
    rng = np.random.default_rng(21)
    m = rng.standard_normal((6, 4))
    x = rng.standard_normal((64, 6))
    y = x @ m
    return x, y, m


def test_zero_learning_rate_keeps_weights(linear_problem):
    x, y, _ = linear_problem
    model = LinearModel(6, 4, seed=1)
    w0 = model.params.state_dict()
    train(model, (x, y), (x, y), TrainConfig(epochs=1, learning_rate=0.0))
    w1 = model.params.state_dict()
    for k in w0:
        assert np.array_equal(w0[k], w1[k])


def test_linear_data_reaches_least_squares_floor(linear_problem):
    # closed-form least squares fits exactly; training must approach it
    x, y, m = linear_problem
    coef, *_ = np.linalg.lstsq(np.c_[x, np.ones(len(x))], y, rcond=None)
    floor = mse(np.c_[x, np.ones(len(x))] @ coef, y)
    assert floor < 1e-20
    model = LinearModel(6, 4, seed=2)
    _, curves = train(model, (x, y), (x, y), TrainConfig(epochs=2000, learning_rate=1e-2))
    assert curves.train[-1] < 1e-6


def test_training_deterministic(linear_problem):
    x, y, _ = linear_problem
    cfg = TrainConfig(epochs=50, learning_rate=1e-3)
    _, c1 = train(LinearModel(6, 4, seed=3), (x, y), (x, y), cfg)
    _, c2 = train(LinearModel(6, 4, seed=3), (x, y), (x, y), cfg)
    assert c1.train == c2.train
    assert c1.val == c2.val


def test_sgd_monotone_on_convex(linear_problem):
    x, y, _ = linear_problem
    model = LinearModel(6, 4, seed=4)
    cfg = TrainConfig(epochs=200, learning_rate=1e-3, optimizer="sgd")
    _, curves = train(model, (x, y), (x, y), cfg)
    diffs = np.diff(curves.train)
    assert np.all(diffs <= 1e-12)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_loss_raises(linear_problem):
    x, y, _ = linear_problem
    model = LinearModel(6, 4, seed=5)
    with pytest.raises(NonFiniteLoss):
        train(model, (x * 1e150, y * 1e150), (x, y), TrainConfig(epochs=50, learning_rate=1e3, optimizer="sgd"))


def test_validation_best_state_returned(linear_problem):
    x, y, _ = linear_problem
    rng = np.random.default_rng(6)
    x_val, y_val = x[:16], y[:16] + 0.01 * rng.standard_normal((16, 4))
    model = LinearModel(6, 4, seed=6)
    _, curves = train(model, (x, y), (x_val, y_val), TrainConfig(epochs=300, learning_rate=1e-2))
    final_val = mse(model.predict(x_val), y_val)
    assert abs(final_val - min(curves.val)) < 1e-12


def test_loss_curve_csv(tmp_path, linear_problem):
    x, y, _ = linear_problem
    model = LinearModel(6, 4, seed=7)
    _, curves = train(model, (x, y), (x, y), TrainConfig(epochs=5, learning_rate=1e-3))
    p = tmp_path / "curves.csv"
    curves.save_csv(p)
    lines = p.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 6


def test_adam_defaults():
    opt = Adam(ParamStore(), lr=1e-3)
    assert opt.beta1 == 0.9 and opt.beta2 == 0.999 and opt.eps == 1e-8
