import io
import json
import math

import pytest

from fpl.classifier import HyperParams
from fpl.dataio import SynthSpec, gen_synthetic
from fpl.errors import EmptyBatch, StepOutOfRange
from fpl.trainer import Ablation, cosine_lr, train


@pytest.fixture(scope="module")
def easy_pack():
    return gen_synthetic(SynthSpec(d=2, n=3, h=2, w=2, c=6, c_t=8,
                                   class_separation=2.0, noise_sigma=0.05,
                                   queries_per_class=5, seed=21))


class TestCosineLr:
    def test_start(self):
        assert cosine_lr(0, 100, 3e-3) == pytest.approx(3e-3)

    def test_midpoint(self):
        assert cosine_lr(50, 100, 2.0) == pytest.approx(1.0)

    def test_end_approaches_zero(self):
        assert cosine_lr(99999, 100000, 1.0) == pytest.approx(0.0, abs=1e-8)

    def test_monotone_decreasing(self):
        vals = [cosine_lr(s, 50, 1.0) for s in range(50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(StepOutOfRange):
            cosine_lr(10, 10, 1.0)
        with pytest.raises(StepOutOfRange):
            cosine_lr(-1, 10, 1.0)


class TestTrain:
    def test_zero_lr_leaves_params(self, easy_pack):
        state = train(easy_pack, HyperParams(lr=0.0, epochs=3))
        assert state.params.mu == 0.0
        assert state.params.epsilon == 1.0

    def test_separable_pack_reaches_full_accuracy(self, easy_pack):
        hp = HyperParams(lr=0.05, epochs=10, batch_size=4, seed=0)
        state = train(easy_pack, hp)
        assert state.history[-1].accuracy == 1.0
        assert state.history[-1].loss < state.history[0].loss

    def test_deterministic_history(self, easy_pack):
        hp = HyperParams(lr=0.01, epochs=5, batch_size=2, seed=123)
        s1 = train(easy_pack, hp)
        s2 = train(easy_pack, hp)
        assert [(h.epoch, h.lr, h.loss, h.accuracy, h.mu, h.epsilon)
                for h in s1.history] == \
               [(h.epoch, h.lr, h.loss, h.accuracy, h.mu, h.epsilon)
                for h in s2.history]

    def test_different_seed_changes_history_same_contract(self, easy_pack):
        hp1 = HyperParams(lr=0.01, epochs=4, batch_size=2, seed=1)
        hp2 = HyperParams(lr=0.01, epochs=4, batch_size=2, seed=2)
        s1, s1b, s2 = train(easy_pack, hp1), train(easy_pack, hp1), train(easy_pack, hp2)
        assert [h.loss for h in s1.history] == [h.loss for h in s1b.history]
        assert [h.loss for h in s1.history] != [h.loss for h in s2.history]

    def test_freeze_mu(self, easy_pack):
        hp = HyperParams(lr=0.1, epochs=4, batch_size=4, seed=0)
        state = train(easy_pack, hp, Ablation(freeze_mu=True))
        assert state.params.mu == 0.0
        assert all(h.mu == 0.0 for h in state.history)
        assert state.params.epsilon != 1.0

    def test_po_off_equals_gamma_zero(self, easy_pack):
        hp = HyperParams(lr=0.05, epochs=3, batch_size=4, seed=5, gamma=0.1)
        hp0 = HyperParams(lr=0.05, epochs=3, batch_size=4, seed=5, gamma=0.0)
        s_off = train(easy_pack, hp, Ablation(po_off=True))
        s_zero = train(easy_pack, hp0)
        assert [h.loss for h in s_off.history] == [h.loss for h in s_zero.history]
        assert s_off.params.mu == s_zero.params.mu

    def test_epsilon_stays_positive(self, easy_pack):
        hp = HyperParams(lr=5.0, epochs=5, batch_size=4, seed=0)
        state = train(easy_pack, hp)
        assert state.params.epsilon >= 1e-6
        assert all(h.epsilon >= 1e-6 for h in state.history)

    def test_step_budget_invariant(self, easy_pack):
        hp = HyperParams(lr=0.01, epochs=6, batch_size=4, seed=0)
        n_train = len(easy_pack.queries_for_split("train"))
        state = train(easy_pack, hp)
        assert state.step == hp.epochs * math.ceil(n_train / hp.batch_size)
        assert [h.epoch for h in state.history] == list(range(1, hp.epochs + 1))

    def test_history_log_records(self, easy_pack):
        hp = HyperParams(lr=0.01, epochs=3, batch_size=4, seed=0)
        stream = io.StringIO()
        state = train(easy_pack, hp, log_stream=stream)
        lines = stream.getvalue().strip().splitlines()
        assert len(lines) == 3
        for line, stats in zip(lines, state.history):
            rec = json.loads(line)
            assert set(rec) == {"epoch", "lr", "loss", "accuracy", "mu", "epsilon"}
            assert rec["epoch"] == stats.epoch
            assert rec["loss"] == stats.loss

    def test_two_trainable_scalars(self, easy_pack):
        state = train(easy_pack, HyperParams(epochs=1))
        assert state.num_trainable_scalars() == 2

    def test_no_train_split_raises(self, easy_pack):
        import dataclasses

        test_only = dataclasses.replace(
            easy_pack,
            queries=[q for q in easy_pack.queries if q.split == "test"],
        )
        with pytest.raises(EmptyBatch):
            train(test_only, HyperParams(epochs=1))

    def test_leave_self_out_differs_from_exact_paper_mode(self, easy_pack):
        hp_loo = HyperParams(lr=0.05, epochs=2, batch_size=4, seed=0,
                             leave_self_out=True)
        hp_all = HyperParams(lr=0.05, epochs=2, batch_size=4, seed=0,
                             leave_self_out=False)
        s_loo = train(easy_pack, hp_loo)
        s_all = train(easy_pack, hp_all)
        assert s_loo.history[0].loss != s_all.history[0].loss

    def test_epsilon_only_training_improves_loss(self, easy_pack):
        # Both ablations on: only epsilon moves, and on separable data the
        # loss still drops.
        hp = HyperParams(lr=0.05, epochs=8, batch_size=4, seed=0)
        state = train(easy_pack, hp, Ablation(po_off=True, freeze_mu=True))
        assert state.params.mu == 0.0
        assert state.params.epsilon != 1.0
        assert state.history[-1].loss < state.history[0].loss

    def test_weight_decay_configurable(self, easy_pack):
        hp0 = HyperParams(lr=0.05, epochs=3, batch_size=4, seed=0)
        hp1 = HyperParams(lr=0.05, epochs=3, batch_size=4, seed=0,
                          weight_decay=0.2)
        s0, s1 = train(easy_pack, hp0), train(easy_pack, hp1)
        assert s0.params.epsilon != s1.params.epsilon

    def test_single_shot_falls_back_to_full_pool(self):
        pack = gen_synthetic(SynthSpec(d=3, n=1, h=2, w=2, c=6, c_t=6,
                                       noise_sigma=0.3, queries_per_class=2,
                                       seed=4))
        hp = HyperParams(lr=0.05, epochs=2, batch_size=2, seed=0)
        state = train(pack, hp)
        assert len(state.history) == 2
