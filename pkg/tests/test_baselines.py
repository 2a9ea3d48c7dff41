import numpy as np

from dgdmn import baselines as bl
from dgdmn.learner import init_learner
from dgdmn.numerics import Streams
from dgdmn.replay import MemoryArch, TrainSettings, dgr_update, new_dgm


def _learner():
    return init_learner(16, (8,), 3, np.random.default_rng(0))


def _task(seed, n=50):
    r = np.random.default_rng(seed)
    return r.random((n, 16)).astype(np.float32), r.integers(0, 3, n)


def _same(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_ppr_without_memory_equals_plain_net():
    x, y = _task(1)
    nn = bl.nn_train_task(_learner(), x, y, Streams(2), epochs=2)
    ppr, mem = bl.ppr_train_task(_learner(), bl.PprMemory(0), x, y, Streams(2), epochs=2)
    assert _same(nn, ppr)
    assert len(mem) == 0


def test_ppr_fills_free_capacity_with_soft_targets():
    x, y = _task(1)
    _, mem = bl.ppr_train_task(_learner(), bl.PprMemory(150), x, y, Streams(2), epochs=1)
    assert len(mem) == 100
    assert np.all((mem.inputs >= 0) & (mem.inputs < 1))
    assert np.allclose(mem.targets.sum(axis=1), 1.0, atol=1e-5)


def test_ewc_with_zero_lambda_equals_plain_net():
    streams_a, streams_b = Streams(3), Streams(3)
    nn, ewc, state = _learner(), _learner(), bl.EwcState(0.0)
    for t in (1, 2):
        x, y = _task(t)
        nn = bl.nn_train_task(nn, x, y, streams_a, epochs=2)
        ewc, state = bl.ewc_train_task(ewc, state, x, y, streams_b, epochs=2)
    assert _same(nn, ewc)
    assert len(state.anchors) == 2


def test_ewc_penalty_zero_at_anchor_and_positive_away():
    x, y = _task(1)
    learner, state = bl.ewc_train_task(_learner(), bl.EwcState(100.0), x, y, Streams(0), epochs=1)
    value, grads = bl.ewc_penalty(learner.params, state)
    assert value == 0.0
    assert all(not np.any(g) for g in grads.values())
    moved = {k: v + 0.1 for k, v in learner.params.items()}
    value, _ = bl.ewc_penalty(moved, state)
    assert value > 0


def test_fisher_is_nonnegative():
    x, _ = _task(1)
    f = bl.fisher_diagonal(_learner(), x)
    assert all(np.all(v >= 0) for v in f.values())
    assert set(f) == set(_learner().params)


def test_ewc_resists_drift_more_than_plain_net():
    x1, y1 = _task(1, 200)
    x2, y2 = _task(2, 200)
    base, state = bl.ewc_train_task(_learner(), bl.EwcState(1e4), x1, y1, Streams(0), epochs=3)
    nn = bl.nn_train_task(base, x2, y2, Streams(1), epochs=3)
    ewc, _ = bl.ewc_train_task(base, state, x2, y2, Streams(1), epochs=3)
    drift = lambda l: sum(float(np.sum((l.params[k] - base.params[k]) ** 2)) for k in base.params)  # noqa: E731
    assert drift(ewc) < drift(nn)


def test_dgr_sequential_single_task_equals_one_update():
    arch = MemoryArch(16, 3, (8,), 2, (6,))
    settings = TrainSettings(32, 1, 1)
    x, y = _task(1)
    dgm = new_dgm(arch, 500, 0.1, np.random.default_rng(0))
    a = bl.dgr_sequential_train([("t", x, y)], dgm, Streams(5), settings)
    b = dgr_update(dgm, x, y, {"t": 1}, Streams(5), settings)
    assert _same(a.learner, b.learner) and a.age == b.age == 50


def test_nn_single_task_stream_equals_learner_train():
    from dgdmn.learner import learner_train

    x, y = _task(1)
    a = bl.nn_sequential_train([("t", x, y)], _learner(), Streams(2), epochs=2)
    b = learner_train(_learner(), x, y, 2, Streams(2).get("shuffle"))
    assert _same(a, b)


def test_ewc_penalty_gradient_matches_finite_differences(rng):
    from gradcheck import ewc_case

    for _ in range(5):
        err, n = ewc_case(rng)
        assert n <= 500 and err < 1e-4
