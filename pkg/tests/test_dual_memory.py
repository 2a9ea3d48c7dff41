from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dgdmn.dual_memory as dm
from dgdmn.numerics import Streams
from dgdmn.replay import MemoryArch, TrainSettings, dgm_predict, merge_dictionaries

ARCH = MemoryArch(16, 3, gen_hidden=(8,), latent_dim=2, learner_hidden=(6,))
FAST = dm.DualSettings(TrainSettings(32, 1, 1), TrainSettings(32, 1, 1))


def _data(rng, n=40):
    return rng.random((n, 16)).astype(np.float32), rng.integers(0, 3, n)


def _state(n_stm=2, n_max=2000):
    return dm.new_dgdmn(ARCH, n_max, 0.05, n_stm, np.random.default_rng(0))


def test_sttm_architecture_is_halved():
    s = _state()
    assert s.sttm_arch.gen_hidden == (4,) and s.sttm_arch.latent_dim == 1 and s.sttm_arch.learner_hidden == (3,)
    with pytest.raises(ValueError):
        dm.new_dgdmn(ARCH, 100, 0.05, 0, np.random.default_rng(0))


def test_three_tasks_with_two_slots_sleep_once(rng):
    s, streams = _state(), Streams(0)
    for t in ("a", "b", "c"):
        s = dm.train_task(s, t, *_data(rng), streams, FAST)
    assert s.sleep_count == 1
    assert s.ltm.dictionary == {"a": 1, "b": 1}
    assert s.ltm.age == 80
    assert [sl.assigned_task for sl in s.sttm_pool] == ["c", None]


def test_repeated_task_retrains_its_slot(rng):
    s, streams = _state(), Streams(0)
    s = dm.train_task(s, "a", *_data(rng), streams, FAST)
    s = dm.train_task(s, "a", *_data(rng, 30), streams, FAST)
    assert s.sleep_count == 0
    assert s.sttm_pool[0].assigned_task == "a" and s.sttm_pool[1].free
    assert s.sttm_pool[0].trained_sample_count == 70
    assert s.sttm_pool[0].dgm.dictionary == {"a": 2}


def test_rearriving_task_is_augmented_by_ltm(rng):
    s, streams = _state(n_stm=1), Streams(0)
    s = dm.train_task(s, "a", *_data(rng), streams, FAST)
    s = dm.train_task(s, "b", *_data(rng), streams, FAST)  # sleeps "a" into the LTM
    s = dm.train_task(s, "a", *_data(rng), streams, FAST)  # sleeps "b", "a" is known
    assert s.sleep_count == 2
    slot = s.sttm_pool[0]
    assert slot.assigned_task == "a"
    assert slot.dgm.age == 80  # the batch plus its reconstructions
    assert slot.trained_sample_count == 40  # augmentation excluded


def test_sleep_with_one_slot_sets_ltm_age(rng):
    s = _state(n_stm=1)
    s = dm.train_task(s, "a", *_data(rng, 1000), Streams(0), FAST)
    before = s.sttm_pool[0].dgm.generator_sample_epochs
    s = dm.sleep(s, Streams(0), FAST)
    assert s.ltm.age == 1000
    assert all(sl.free for sl in s.sttm_pool)
    assert s.retired_sample_epochs == before
    with pytest.raises(ValueError):
        dm.sleep(s, Streams(0), FAST)


def test_input_state_not_mutated(rng):
    s = _state()
    s2 = dm.train_task(s, "a", *_data(rng), Streams(0), FAST)
    assert all(sl.free for sl in s.sttm_pool)
    assert not s2.sttm_pool[0].free


def test_predict_dispatch(rng):
    s = dm.train_task(_state(), "a", *_data(rng), Streams(0), FAST)
    x, _ = _data(rng, 20)
    assert np.array_equal(dm.predict(s, "a", x), dgm_predict(s.sttm_pool[0].dgm, x))
    assert np.array_equal(dm.predict(s, "zzz", x), dgm_predict(s.ltm, x))


def test_tiny_gamma_makes_every_batch_new(rng):
    s, streams = _state(), Streams(0)
    tiny = dm.recog_settings(FAST, 1e-9, 1e-9)
    tiny = dm.DualSettings(replace(tiny.ltm, recog_gamma=None), replace(tiny.sttm, recog_gamma=None))
    x, y = _data(rng)
    for _ in range(3):
        s = dm.train_task_descriptorfree(s, x, y, 1e-9, 1e-9, streams, tiny)
    assert s.anon_counter == 3
    assert s.sleep_count == 1
    assert set(s.ltm.dictionary) == {"anon-0", "anon-1"}


def test_huge_gamma_routes_to_resident_slot(rng):
    s, streams = _state(), Streams(0)
    x, y = _data(rng)
    for _ in range(3):
        s = dm.train_task_descriptorfree(s, x, y, 1e9, 1e9, streams, FAST)
    assert s.anon_counter == 1
    assert s.sttm_pool[0].trained_sample_count == 120
    assert np.array_equal(dm.predict_descriptorfree(s, x, 1e9), dgm_predict(s.sttm_pool[0].dgm, x))


@pytest.mark.parametrize("K, expected", [(10, (0.05, 5)), (1, (0.5, 1)), (20, (0.025, 10)), (2, (0.25, 1)),
                                         (3, (1 / 6, 2))])
def test_suggest(K, expected):
    kappa, n = dm.suggest_hyperparams(K)
    assert kappa == pytest.approx(expected[0]) and n == expected[1]


def test_suggest_rejects_zero():
    with pytest.raises(ValueError):
        dm.suggest_hyperparams(0)


def _fake_update(dgm, x, y, d_tasks, streams, settings):
    return replace(dgm, dictionary=merge_dictionaries(dgm.dictionary, d_tasks), age=dgm.age + len(x))


@given(tasks=st.lists(st.sampled_from("abcde"), min_size=1, max_size=25), n_stm=st.integers(1, 4))
@settings(max_examples=60, deadline=None)
def test_sleep_frequency_matches_pool_model(tasks, n_stm):
    expected, pool = 0, []
    for t in tasks:
        if t in pool:
            continue
        if len(pool) == n_stm:
            expected, pool = expected + 1, []
        pool.append(t)
    rng = np.random.default_rng(1)
    x, y = rng.random((4, 16)).astype(np.float32), np.zeros(4, np.int64)
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(dm, "dgr_update", _fake_update)
        s = dm.new_dgdmn(ARCH, 2000, 0.05, n_stm, np.random.default_rng(0))
        for t in tasks:
            s = dm.train_task(s, t, x, y, Streams(0), FAST)
    assert s.sleep_count == expected
    assert sorted(sl.assigned_task for sl in s.sttm_pool if not sl.free) == sorted(pool)


def test_mid_cycle_prediction_does_not_sleep(rng):
    s, streams = _state(), Streams(0)
    for t in ("a", "b", "c"):
        s = dm.train_task(s, t, *_data(rng), streams, FAST)
    x, _ = _data(rng, 10)
    for t in ("a", "b", "c"):
        assert dm.predict(s, t, x).shape == (10,)
    assert s.sleep_count == 1 and s.slot_of("c") == 0


def test_held_out_batches_route_to_their_slot():
    from dgdmn.harness import calibrate_gamma
    from dgdmn.suites import builtin_suite

    suite = builtin_suite("digits-mini", 0, 2000, 100)
    arch = MemoryArch(suite.input_dim, 10)
    s = dm.new_dgdmn(arch, 10**6, 0.05, 2, np.random.default_rng(0))
    for k in (0, 1):
        s = dm.train_task(s, f"t{k}", suite.train[k].inputs, suite.train[k].labels, Streams(1))
    gamma, _ = calibrate_gamma(suite, arch, 10**6, 0.05, 0)
    hits = [dm.route(s, suite.test[k].inputs[i:i + 10], gamma) == k for k in (0, 1) for i in range(0, 100, 10)]
    assert np.mean(hits) >= 0.9
