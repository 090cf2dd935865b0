import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import tlab.trainer as trainer_mod
from tlab.errors import ConfigError, DivergenceError
from tlab.losses import TASKS, LossBreakdown, TaskWeights, ctc_feasible
from tlab.scorer import ModelConfig, init_parameters
from tlab.trainer import (
    SyntheticTask,
    TrainConfig,
    ablation_recipe,
    clip_gradients,
    gen_synthetic,
    read_dataset,
    train,
    write_dataset,
)

# seeded copy-task run (120 utterances, lr 3e-3, seed 3), first five epochs
L_TRANS_FIXTURE = [10.527515730290542, 7.032093299208581, 6.304476084107564,
                   5.936698069886628, 5.581459118245249]


def small_copy(count=120, seed=3):
    return gen_synthetic(SyntheticTask("copy", 4, (2, 5), count=count, seed=seed))


def fresh_params(seed=3, **kw):
    return init_parameters(ModelConfig(input_dim=5, vocab_size=4, seed=seed, **kw))


class TestGenSynthetic:
    def test_deterministic(self):
        a, b = small_copy(), small_copy()
        assert all(np.array_equal(x.features, y.features) and x.labels == y.labels
                   for x, y in zip(a.utterances, b.utterances))

    def test_copy_noiseless_recovers_labels(self):
        data = gen_synthetic(SyntheticTask("copy", 4, (3, 3), count=20, seed=1))
        for u in data.utterances:
            assert u.features.shape == (6, 5) and len(u.labels) == 3
            assert tuple(int(np.argmax(u.features[2 * i])) for i in range(3)) == u.labels
            assert ctc_feasible(len(u.features), u.labels)

    def test_repeat2_doubles_source(self):
        data = gen_synthetic(SyntheticTask("repeat2", 3, (2, 6), count=30, seed=2))
        for u in data.utterances:
            S = len(u.labels) // 2
            source = [int(np.argmax(u.features[3 * i])) for i in range(S)]
            assert u.labels == tuple(k for k in source for _ in range(2))
            assert u.features.shape[0] == 3 * S
            assert ctc_feasible(u.features.shape[0], u.labels)

    def test_noise(self):
        data = gen_synthetic(SyntheticTask("copy", 4, (2, 2), noise_std=0.5, count=3, seed=0))
        assert not np.all(np.isin(data.utterances[0].features, [0.0, 1.0]))

    @pytest.mark.parametrize("task", [
        SyntheticTask("repeat2", 4, (3, 3)),
        SyntheticTask("copy", 4, (2, 5), t_range=(1, 3)),
        SyntheticTask("copy", 4, (5, 2)),
        SyntheticTask("mirror", 4, (2, 5)),
        SyntheticTask("copy", 4, (2, 5), noise_std=-1.0),
    ])
    def test_impossible_ranges(self, task):
        with pytest.raises(ConfigError):
            gen_synthetic(task)

    def test_frame_range_restricts_lengths(self):
        data = gen_synthetic(SyntheticTask("copy", 4, (2, 5), t_range=(4, 6), count=50, seed=0))
        assert {len(u.labels) for u in data.utterances} <= {2, 3}


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        data = gen_synthetic(SyntheticTask("copy", 3, (1, 3), noise_std=0.3, count=7, seed=9))
        path = tmp_path / "d.txt"
        write_dataset(path, data)
        back = read_dataset(path)
        assert (back.input_dim, back.vocab_size, len(back)) == (4, 3, 7)
        for a, b in zip(data.utterances, back.utterances):
            assert np.array_equal(a.features, b.features) and a.labels == b.labels

    def test_malformed(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 2\n2 1\n0.0 1.0\n")
        with pytest.raises(ConfigError):
            read_dataset(path)

    def test_split_is_last_tenth(self):
        data = small_copy(count=50)
        tr, ev = data.split()
        assert len(ev) == 5 and ev.utterances[0] is data.utterances[45]


class TestTrain:
    def test_loss_regression_and_decrease(self):
        _, logs = train(fresh_params(), small_copy(), TrainConfig(epochs=5, seed=3, lr=3e-3))
        got = [e.losses.l_trans for e in logs]
        np.testing.assert_allclose(got, L_TRANS_FIXTURE, rtol=1e-7)
        assert all(b < a for a, b in zip(got, got[1:]))

    def test_frozen_parameters(self):
        _, logs = train(fresh_params(), small_copy(count=30), TrainConfig(epochs=3, lr=0.0))
        totals = [e.losses.l_total for e in logs]
        assert totals[0] == totals[1] == totals[2]

    def test_ctc_logged(self):
        _, logs = train(fresh_params(), small_copy(count=20), TrainConfig(epochs=1, weights=TaskWeights(ctc=0.5)))
        assert math.isfinite(logs[0].losses.l_ctc) and logs[0].losses.l_ctc > 0

    def test_all_tasks_train(self):
        p = fresh_params(aux_layer_indices=(1,))
        _, logs = train(p, small_copy(count=20), TrainConfig(epochs=2, weights=TaskWeights.full()))
        for name in TASKS:
            assert getattr(logs[-1].losses, "l_" + name) > 0

    def test_reproducible(self):
        cfg = TrainConfig(epochs=2, seed=4, batch_size=5)
        a, _ = train(fresh_params(), small_copy(count=30), cfg)
        b, _ = train(fresh_params(), small_copy(count=30), cfg)
        assert a.equals(b)

    def test_momentum_optimizer(self):
        _, logs = train(fresh_params(), small_copy(count=30), TrainConfig(epochs=3, optimizer="momentum", lr=0.01))
        assert logs[-1].losses.l_trans < logs[0].losses.l_trans

    def test_divergence_aborts(self, monkeypatch):
        real = trainer_mod.objective

        def broken(*args, **kwargs):
            b, g = real(*args, **kwargs)
            b.l_total = float("nan")
            return b, g

        monkeypatch.setattr(trainer_mod, "objective", broken)
        with pytest.raises(DivergenceError):
            train(fresh_params(), small_copy(count=10), TrainConfig(epochs=1))

    def test_empty_dataset(self):
        data = small_copy(count=10)
        data.utterances = []
        with pytest.raises(ConfigError):
            train(fresh_params(), data, TrainConfig(epochs=1))

    @pytest.mark.parametrize("bad", [{"lr": -1.0}, {"clip_norm": 0.0}, {"optimizer": "sgd"}, {"batch_size": 0}])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()

    def test_callback_sees_every_epoch(self):
        seen = []
        train(fresh_params(), small_copy(count=10), TrainConfig(epochs=3), callback=lambda e, p: seen.append(e.epoch))
        assert seen == [1, 2, 3]


@given(st.floats(0.01, 10.0), st.integers(0, 2**31))
def test_clip_bound(max_norm, seed):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.normal(size=(3, 4)) * 10, "b": rng.normal(size=5)}
    clip_gradients(grads, max_norm)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    assert norm <= max_norm + 1e-12


class TestAblation:
    def test_recipe(self):
        steps = ablation_recipe()
        assert [n for n, _ in steps] == ["all", "-symm_kl", "-aux_trans", "-lm", "-ctc"]
        first = steps[0][1]
        assert (first.ctc, first.lm, first.aux_trans, first.symm_kl, first.trans) == (0.5, 0.4, 0.3, 0.2, 1.0)
        last = steps[-1][1]
        assert all(last.weight(t) == 0.0 for t in TASKS if t != "trans")

    def test_each_step_drops_one_task(self):
        steps = [w for _, w in ablation_recipe()]
        for prev, cur in zip(steps, steps[1:]):
            dropped = [t for t in TASKS if prev.active(t) and not cur.active(t)]
            assert len(dropped) == 1
