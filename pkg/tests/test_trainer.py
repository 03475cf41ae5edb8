import io
import math

import numpy as np
import pytest

from dybm import experiments
from dybm.core import (
    BinarySequence,
    ConfigError,
    DivergenceError,
    ModelConfig,
    init_model,
    reset_dynamic_state,
    sequence_nll,
)
from dybm.datagen import MarkovSpec, markov_dataset, markov_true_nll
from dybm.regularizers import Regularizer, RegularizerConfig
from dybm.trainer import (
    METRIC_COLUMNS,
    Checkpoint,
    OptimizerState,
    TrainConfig,
    run_training,
    train_minibatch,
    train_sequence,
    train_step,
    validate_and_checkpoint,
)
from conftest import make_model, random_steps
from oracles import adam_step_by_hand


def markov_sets(seed, n_train=8, n_val=3, length=30, dims=4):
    train = markov_dataset(MarkovSpec(dims, 0.95, length, seed), n_train)
    val = markov_dataset(MarkovSpec(dims, 0.95, length, seed + 1000), n_val)
    onl = sum(markov_true_nll(s, MarkovSpec(dims, 0.95)) for s in val)
    return train, val, onl


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [
        dict(validation_cadence_epochs=0),
        dict(learning_rate=0.0),
        dict(adam_beta1=1.0),
        dict(adam_beta2=0.0),
        dict(minibatch_size=0),
        dict(stop_tolerance=0.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_default_tolerance_scales_with_units(self):
        assert TrainConfig().tolerance(7) == pytest.approx(7e-3)
        assert TrainConfig(stop_tolerance=0.5).tolerance(7) == 0.5


class TestTrainStep:
    def test_zero_lr_keeps_params_but_advances(self):
        model = make_model(3, seed=1)
        before = model.params.copy()
        opt = OptimizerState(model.params)
        train_step(model, [1, 0, 1], opt, lr=0.0)
        for a, b in zip(before.arrays(), model.params.arrays()):
            np.testing.assert_array_equal(a, b)
        assert model.clock == 1
        assert model.traces.gamma[0].sum() > 0

    def test_first_step_matches_textbook_adam(self):
        model = make_model(2, seed=3)
        b0 = model.params.bias.copy()
        x = np.array([1.0, 0.0])
        p0 = 1.0 / (1.0 + np.exp(-b0))
        opt = OptimizerState(model.params)
        train_step(model, x, opt, lr=0.01)
        for j in range(2):
            want = adam_step_by_hand(b0[j], x[j] - p0[j], 0.01)
            assert model.params.bias[j] == pytest.approx(want, rel=0, abs=1e-15)

    def test_moments_nonnegative_and_counted(self, rng):
        model = make_model(3, seed=1)
        opt = OptimizerState(model.params)
        for x in random_steps(rng, 7, 3):
            train_step(model, x, opt, lr=1e-3)
        assert opt.step_count == 7
        assert all((s >= 0).all() for s in opt.second_moment)

    def test_single_unit_bias_climbs(self):
        cfg = ModelConfig(n_units=1, rng_seed=0)
        model = init_model(cfg)
        model.params.ltp_weight[...] = 0.0
        model.params.ltd_weight[...] = 0.0
        opt = OptimizerState(model.params)
        biases = [float(model.params.bias[0])]
        # weights frozen at zero by a copy-back, so only the bias learns
        for _ in range(3000):
            train_step(model, [1.0], opt, lr=0.01)
            model.params.ltp_weight[...] = 0.0
            model.params.ltd_weight[...] = 0.0
            biases.append(float(model.params.bias[0]))
        assert all(b2 > b1 for b1, b2 in zip(biases, biases[1:]))
        assert 1.0 / (1.0 + math.exp(-biases[-1])) > 0.99

    def test_sequence_equals_step_by_step(self, rng):
        steps = random_steps(rng, 12, 3)
        a, b = make_model(3, seed=2), make_model(3, seed=2)
        oa, ob = OptimizerState(a.params), OptimizerState(b.params)
        total_a = train_sequence(a, BinarySequence.from_steps(steps), oa, 1e-2)
        total_b = sum(train_step(b, x, ob, 1e-2) for x in steps)
        for x, y in zip(a.params.arrays(), b.params.arrays()):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-13)
        assert total_a == pytest.approx(total_b, rel=1e-12)

    def test_divergence_is_reported(self):
        model = make_model(2, seed=1)
        model.params.bias[0] = np.inf
        with pytest.raises(DivergenceError):
            train_step(model, [1, 1], OptimizerState(model.params), lr=1e-3)


class TestMinibatch:
    def test_empty_batch(self):
        model = make_model(2)
        reg = Regularizer(RegularizerConfig(), model)
        rep = train_minibatch(model, [], reg, TrainConfig(), OptimizerState(model.params))
        assert rep.n_steps == 0 and rep.mean_nll == 0.0

    def test_state_reset_weights_kept(self, rng):
        model = make_model(3, seed=1)
        before = model.params.copy()
        reg = Regularizer(RegularizerConfig(), model)
        batch = [BinarySequence.from_steps(random_steps(rng, 10, 3)) for _ in range(3)]
        rep = train_minibatch(model, batch, reg, TrainConfig(), OptimizerState(model.params))
        assert rep.n_steps == 30
        assert not model.traces.gamma.any() and not model.queue_slots.any()
        assert not np.array_equal(before.bias, model.params.bias)

    @pytest.mark.parametrize("method", ["delay-prune", "dropout", "dropconnect"])
    def test_p_zero_matches_unregularized(self, method):
        train, val, onl = markov_sets(3)
        mcfg = ModelConfig(n_units=4, rng_seed=5)
        tcfg = TrainConfig(max_steps_per_sample=90, validation_cadence_epochs=1,
                           minibatch_size=4, learning_rate=5e-3)
        base, base_log = run_training(train, val, mcfg, tcfg, RegularizerConfig(), onl=onl)
        reg, reg_log = run_training(train, val, mcfg, tcfg,
                                    RegularizerConfig(method, 0.0, rng_seed=9), onl=onl)
        for a, b in zip(base.params.arrays(), reg.params.arrays()):
            np.testing.assert_array_equal(a, b)
        assert [r["val_tnl"] for r in base_log.rows] == [r["val_tnl"] for r in reg_log.rows]

    @pytest.mark.slow
    def test_markov_training_nll_falls(self):
        # median over seeds of the per-batch mean NLL, first ten batches
        curves = []
        for seed in range(5):
            train = markov_dataset(MarkovSpec(7, 0.95, 100, 40 + seed), 320)
            model = init_model(ModelConfig(n_units=7, rng_seed=seed))
            opt = OptimizerState(model.params)
            reg = Regularizer(RegularizerConfig(), model)
            curves.append([train_minibatch(model, train[b:b + 32], reg, TrainConfig(),
                                           opt).mean_nll for b in range(0, 320, 32)])
        med = np.median(curves, axis=0)
        assert all(b < a for a, b in zip(med, med[1:]))


class TestCheckpointing:
    def test_first_validation_always_best(self):
        model = make_model(2)
        val = [BinarySequence.from_steps(np.ones((4, 2)))]
        best, tnl, eps, improved = validate_and_checkpoint(model, val, None, None)
        assert improved and best.epsilon == -tnl

    def test_epsilon_rule(self):
        # TNL 5 vs 7 with ONL 4: the TNL 5 model wins
        def fake(tnl):
            return Checkpoint(make_model(2), 4.0 - tnl, tnl, 4.0, 0)

        a, b = fake(5.0), fake(7.0)
        assert (a.epsilon, b.epsilon) == (-1.0, -3.0)
        model = make_model(2, seed=9)
        val = [BinarySequence.from_steps(np.ones((3, 2)))]
        tnl = sequence_nll(model, val[0])
        onl = tnl - 2.0  # epsilon -2 lies between the two
        kept, _, eps, improved = validate_and_checkpoint(model, val, onl, a)
        assert eps == pytest.approx(-2.0) and not improved and kept is a
        kept, _, _, improved = validate_and_checkpoint(model, val, onl, b)
        assert improved and kept is not b

    def test_checkpoint_is_a_deep_copy(self):
        model = make_model(2)
        val = [BinarySequence.from_steps(np.ones((3, 2)))]
        best, *_ = validate_and_checkpoint(model, val, None, None)
        model.params.bias += 1.0
        assert not np.array_equal(best.params.bias, model.params.bias)

    def test_round_trip_bit_identical(self, tmp_path, rng):
        train, val, onl = markov_sets(5)
        best, _ = run_training(train, val, ModelConfig(n_units=4, rng_seed=1),
                               TrainConfig(max_steps_per_sample=60, validation_cadence_epochs=1,
                                           minibatch_size=4),
                               RegularizerConfig("delay-prune", 0.5, rng_seed=3), onl=onl)
        path = tmp_path / "best.npz"
        best.save(path)
        loaded = Checkpoint.load(path)
        assert (loaded.epsilon, loaded.tnl, loaded.onl, loaded.step) == \
            (best.epsilon, best.tnl, best.onl, best.step)
        np.testing.assert_array_equal(loaded.delays, best.delays)
        for _ in range(5):
            probe = BinarySequence.from_steps(random_steps(rng, 25, 4))
            assert sequence_nll(loaded.to_model(), probe) == sequence_nll(best.to_model(), probe)


class TestRunTraining:
    def cfgs(self, **kw):
        base = dict(max_steps_per_sample=120, validation_cadence_epochs=1, minibatch_size=4,
                    learning_rate=5e-3)
        return ModelConfig(n_units=4, rng_seed=2), TrainConfig(**{**base, **kw})

    def test_zero_steps_returns_initial_model(self):
        train, val, onl = markov_sets(1)
        mcfg, tcfg = self.cfgs(max_steps_per_sample=0)
        best, log = run_training(train, val, mcfg, tcfg, onl=onl)
        init = init_model(mcfg)
        for a, b in zip(init.params.arrays(), best.params.arrays()):
            np.testing.assert_array_equal(a, b)
        assert best.step == 0 and len(log.rows) == 1

    def test_infinite_tolerance_stops_at_first_validation(self):
        train, val, onl = markov_sets(1)
        mcfg, tcfg = self.cfgs(stop_tolerance=math.inf)
        _, log = run_training(train, val, mcfg, tcfg, onl=onl)
        assert [r["step"] for r in log.rows] == [0, 4 * 30]

    def test_epsilon_monotone_and_best_tnl_minimal(self):
        train, val, onl = markov_sets(2)
        mcfg, tcfg = self.cfgs()
        best, log = run_training(train, val, mcfg, tcfg,
                                 RegularizerConfig("delay-prune", 0.5, rng_seed=1), onl=onl)
        best_eps = [r["epsilon"] for r in log.rows if r["is_best"]]
        assert best_eps == sorted(best_eps)
        assert best.tnl <= min(r["val_tnl"] for r in log.rows)
        assert best.epsilon > log.rows[0]["epsilon"]

    def test_metrics_csv_deterministic(self):
        train, val, onl = markov_sets(4)
        mcfg, tcfg = self.cfgs()
        outs = []
        for _ in range(2):
            fh, masks = io.StringIO(), io.StringIO()
            run_training(train, val, mcfg, tcfg, RegularizerConfig("dropconnect", 0.3,
                                                                   rng_seed=8),
                         onl=onl, metrics_file=fh, mask_log=masks)
            outs.append((fh.getvalue(), masks.getvalue()))
        assert outs[0] == outs[1]
        assert outs[0][0].splitlines()[0] == ",".join(METRIC_COLUMNS)

    def test_dimension_mismatch(self):
        train, val, onl = markov_sets(1, dims=3)
        mcfg, tcfg = self.cfgs()
        with pytest.raises(ConfigError):
            run_training(train, val, mcfg, tcfg, onl=onl)

    def test_weights_persist_across_batches(self):
        train, val, onl = markov_sets(6)
        mcfg, tcfg = self.cfgs(max_steps_per_sample=30)
        # batches of 4 over 8 sequences, one epoch each: the second batch
        # starts from the first batch's weights
        model = init_model(mcfg)
        opt = OptimizerState(model.params)
        reg = Regularizer(RegularizerConfig(), model)
        for batch in (train[:4], train[4:]):
            train_minibatch(model, batch, reg, tcfg, opt)
        reset_dynamic_state(model)
        _, log = run_training(train, val, mcfg, tcfg, onl=onl)
        assert log.rows[-1]["step"] == 8 * 30
        manual_tnl = sum(sequence_nll(model, s) for s in val)
        assert log.rows[-1]["val_tnl"] == pytest.approx(manual_tnl, rel=1e-12)


class TestDeskRegression:
    @pytest.mark.parametrize("method,p", [("none", 0.0), ("delay-prune", 0.5)])
    def test_markov_desk_run_improves_on_initial_epsilon(self, method, p):
        settings = experiments.preset("markov7")
        assert settings.n_train_seqs * settings.train_len == 10_000
        res = experiments.run_markov7_cell(settings, 1, method, p)
        rows = res["metrics"].rows
        assert rows[0]["step"] == 0
        assert res["checkpoint"].epsilon > rows[0]["epsilon"]
