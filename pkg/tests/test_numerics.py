import numpy as np
import pytest
from gradcheck import mlp_case

from dgdmn.numerics import (
    Dense,
    NonFiniteError,
    RMSProp,
    ShapeError,
    Streams,
    clip_gradients,
    forward,
    gradients,
    init_params,
    minibatches,
    mlp,
    per_sample_sq_grads,
    rmsprop_step,
    softmax,
    softmax_cross_entropy,
)


def test_rmsprop_single_step_matches_hand_values():
    params = {"w": np.array([1.0])}
    p1, s1 = rmsprop_step(params, {"w": np.array([0.5])}, RMSProp())
    assert s1.accum["w"][0] == pytest.approx(0.025, abs=1e-15)
    assert p1["w"][0] == pytest.approx(0.9968377225398316, abs=1e-12)
    assert params["w"][0] == 1.0  # pure step leaves its input alone
    p2, s2 = rmsprop_step(p1, {"w": np.array([0.5])}, s1)
    assert s2.accum["w"][0] == pytest.approx(0.0475, abs=1e-15)
    assert p2["w"][0] == pytest.approx(0.9945435653063891, abs=1e-12)


def test_rmsprop_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        RMSProp(rho=1.0)
    with pytest.raises(ValueError):
        RMSProp(epsilon=0.0)


def test_clipvalue_then_clipnorm():
    g = {"a": np.array([3.0, -0.2]), "b": np.array([0.1])}
    out = clip_gradients(g, clipvalue=0.5, clipnorm=None)
    assert np.allclose(out["a"], [0.5, -0.2])
    both = clip_gradients(g, clipvalue=0.5, clipnorm=0.3)
    norm = np.sqrt(sum(np.sum(v**2) for v in both.values()))
    assert norm == pytest.approx(0.3)
    # direction after value clipping is kept
    assert both["a"][0] / both["a"][1] == pytest.approx(-2.5)


def test_forward_shape_error_names_layer(rng):
    arch = mlp("fc", (4, 3, 2))
    params = init_params(arch, rng)
    with pytest.raises(ShapeError) as exc:
        forward(params, arch, np.zeros((2, 5)))
    assert exc.value.layer == "fc0"


def test_glorot_init_bounds_and_zero_bias(rng):
    arch = mlp("fc", (30, 20))
    p = init_params(arch, rng)
    limit = np.sqrt(6 / 50)
    assert np.all(np.abs(p["fc0/W"]) <= limit)
    assert np.all(p["fc0/b"] == 0)
    assert p["fc0/W"].dtype == np.float32


def test_softmax_cross_entropy_hard_equals_onehot_soft(rng):
    logits = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, 6)
    l1, d1 = softmax_cross_entropy(logits, y)
    l2, d2 = softmax_cross_entropy(logits, np.eye(4)[y])
    assert l1 == pytest.approx(l2)
    assert np.allclose(d1, d2)


def test_softmax_rows_sum_to_one_even_for_large_logits():
    p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.all(np.isfinite(p))


def test_gradients_finite_difference_small_sample(rng):
    for _ in range(5):
        err, n = mlp_case(rng)
        assert n <= 500
        assert err < 1e-4


def test_gradients_nonfinite_raises(rng):
    arch = mlp("fc", (3, 4, 2), out_act="softmax")
    params = init_params(arch, rng, np.float64)
    params["fc0/W"][0, 0] = np.inf
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        gradients(params, arch, np.ones((2, 3)), np.array([0, 1]))


def test_per_sample_squared_gradients_match_loop(rng):
    arch = mlp("fc", (4, 5, 3), out_act="softmax")
    params = init_params(arch, rng, np.float64)
    x = rng.random((7, 4))
    y = rng.integers(0, 3, 7)
    logits = forward(params, arch, x, logits=True)
    d = softmax(logits)
    d[np.arange(7), y] -= 1
    fast = per_sample_sq_grads(params, arch, x, d)
    slow = {k: np.zeros_like(v) for k, v in params.items()}
    for i in range(7):
        _, g = gradients(params, arch, x[i:i + 1], y[i:i + 1])
        for k in slow:
            slow[k] += g[k] ** 2
    for k in slow:
        assert np.allclose(fast[k], slow[k])


def test_minibatches_keep_last_partial_batch():
    sizes = [len(b) for b in minibatches(300, 128, np.random.default_rng(0))]
    assert sizes == [128, 128, 44]
    allidx = np.concatenate(list(minibatches(300, 128, np.random.default_rng(0))))
    assert sorted(allidx) == list(range(300))


def test_streams_are_named_and_reproducible():
    a, b = Streams(5), Streams(5)
    assert a.get("x").random() == b.get("x").random()
    assert Streams(5).get("x").random() != Streams(5).get("y").random()
    assert Streams(5).child("ltm").get("x").random() == Streams(5).get("ltm/x").random()


def test_streams_state_round_trip():
    s = Streams(9)
    s.get("a").random(3)
    state = s.state()
    expected = s.get("a").random(4)
    t = Streams(9)
    t.set_state(state)
    assert np.array_equal(t.get("a").random(4), expected)


def test_identity_affine_layer():
    arch = (Dense("fc0", 2, 2, "linear"),)
    params = {"fc0/W": np.eye(2), "fc0/b": np.zeros(2)}
    assert forward(params, arch, np.array([[0.3, 0.7]])).tolist() == [[0.3, 0.7]]


def test_relu_layer():
    arch = (Dense("fc0", 3, 3, "relu"),)
    params = {"fc0/W": np.eye(3), "fc0/b": np.zeros(3)}
    assert forward(params, arch, np.array([[-1.0, 0.0, 2.0]])).tolist() == [[0, 0, 2]]


def test_two_layer_hand_evaluation():
    arch = mlp("fc", (2, 2, 1))
    params = {"fc0/W": np.array([[1.0, -1.0], [2.0, 0.5]]), "fc0/b": np.array([0.0, 0.25]),
              "fc1/W": np.array([[3.0], [-2.0]]), "fc1/b": np.array([0.5])}
    # hidden: relu([1*1 + 2*2, -1*1 + 0.5*2 + 0.25]) = [5, 0.25]; out: 15 - 0.5 + 0.5
    assert forward(params, arch, np.array([[1.0, 2.0]])).tolist() == [[15.0]]


def test_zero_weights_balanced_batch_bias_gradient_sums_to_zero():
    arch = (Dense("fc0", 3, 2, "softmax"),)
    params = {"fc0/W": np.zeros((3, 2)), "fc0/b": np.zeros(2)}
    _, g = gradients(params, arch, np.array([[1.0, 2, 3], [4, 5, 6]]), np.array([0, 1]))
    assert g["fc0/b"].sum() == pytest.approx(0.0, abs=1e-15)


def test_single_sample_cross_entropy_gradient_is_p_minus_y_times_x():
    arch = (Dense("fc0", 2, 2, "softmax"),)
    params = {"fc0/W": np.array([[0.5, -0.5], [0.1, 0.2]]), "fc0/b": np.array([0.0, 0.3])}
    x = np.array([[2.0, -1.0]])
    z = x @ params["fc0/W"] + params["fc0/b"]
    p = np.exp(z) / np.exp(z).sum()
    _, g = gradients(params, arch, x, np.array([1]))
    assert np.allclose(g["fc0/W"], np.outer(x[0], p[0] - [0, 1]))
    assert np.allclose(g["fc0/b"], p[0] - [0, 1])


def test_clip_examples():
    out = clip_gradients({"g": np.array([0.2, -0.3])}, 0.5, 1.0)
    assert out["g"].tolist() == [0.2, -0.3]
    assert clip_gradients({"g": np.array([2.0])}, 0.5, None)["g"].tolist() == [0.5]
    out = clip_gradients({"g": np.full(4, 0.5)}, None, 0.5)
    assert out["g"] == pytest.approx([0.25] * 4)


def test_zero_gradient_leaves_params():
    params = {"w": np.array([1.5, -2.0])}
    state = RMSProp()
    state.accum["w"] = np.array([0.3, 0.1])
    new, _ = rmsprop_step(params, {"w": np.zeros(2)}, state)
    assert new["w"].tolist() == [1.5, -2.0]
