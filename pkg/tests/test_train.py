import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odevae.datagen import ScenarioConfig, simulate
from odevae.model import init_params, spec_for_scenario
from odevae.odecore import SolverConfig, make_scenario_system
from odevae.train import (
    AdamState,
    TrainConfig,
    adam_step,
    rng_streams,
    train,
    train_plain,
    train_similarity,
    write_report_csv,
)


def same_params(a, b):
    return all(np.array_equal(a.values[k], b.values[k]) for k in a.values)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        state = AdamState.zeros_like(p)
        adam_step(p, {"w": np.zeros(2)}, state, 1e-3)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_magnitude(self):
        p = {"w": np.zeros(3)}
        g = np.array([0.5, -3.0, 1e-3])
        adam_step(p, {"w": g}, AdamState.zeros_like(p), 1e-3)
        np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-4)

    def test_scale_invariance(self):
        p = {"a": np.zeros(1), "b": np.zeros(1)}
        adam_step(p, {"a": np.array([0.7]), "b": np.array([1.4])}, AdamState.zeros_like(p), 1e-3)
        assert p["a"][0] == pytest.approx(p["b"][0], rel=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_step_bounded_by_learning_rate(self, seed):
        # with |g| fixed per coordinate, v-hat equals g^2 exactly and |m-hat| <= |g|
        rng = np.random.default_rng(seed)
        lr = 1e-3
        scale = 10.0 ** rng.uniform(-3, 3, size=5)
        p = {"w": np.zeros(5)}
        state = AdamState.zeros_like(p)
        for _ in range(40):
            before = p["w"].copy()
            adam_step(p, {"w": scale * rng.choice([-1.0, 1.0], size=5)}, state, lr)
            assert np.all(np.abs(p["w"] - before) <= lr * (1 + 1e-9))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_step_bounded_for_varying_scale(self, seed):
        rng = np.random.default_rng(seed)
        lr = 1e-3
        bound = lr * (1 - 0.9) / np.sqrt(1 - 0.999)
        p = {"w": np.zeros(5)}
        state = AdamState.zeros_like(p)
        for _ in range(40):
            before = p["w"].copy()
            adam_step(p, {"w": rng.normal(0, 10.0 ** rng.uniform(-3, 3), size=5)}, state, lr)
            assert np.all(np.abs(p["w"] - before) <= bound * (1 + 1e-9))

    def test_sudden_gradient_growth_exceeds_learning_rate(self):
        # a long run of tiny gradients then a large one: once bias correction
        # has faded the update overshoots lr by up to (1 - b1) / sqrt(1 - b2)
        p = {"w": np.zeros(1)}
        state = AdamState.zeros_like(p)
        for _ in range(3000):
            adam_step(p, {"w": np.array([1e-8])}, state, 1e-3)
        before = p["w"].copy()
        adam_step(p, {"w": np.array([1.0])}, state, 1e-3)
        assert 1e-3 < abs(p["w"][0] - before[0]) <= 1e-3 * 0.1 / np.sqrt(0.001)

    def test_shape_mismatch(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(ValueError):
            adam_step(p, {"w": np.zeros(3)}, AdamState.zeros_like(p), 1e-3)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"learning_rate": 0.0}, {"epochs": -1}, {"batch_size": 0}, {"bandwidth": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_streams_independent_of_flags(self):
        a = rng_streams(3)["init"].random(4)
        b = rng_streams(3)["init"].random(4)
        assert np.array_equal(a, b)
        assert not np.array_equal(rng_streams(3)["init"].random(4), rng_streams(3)["eps"].random(4))


@pytest.fixture(scope="module")
def small_setup():
    ds = simulate(ScenarioConfig.for_scenario("linear2", n_individuals=10, seed=2))
    model = init_params(spec_for_scenario("linear2"), rng_streams(2)["init"], "linear2")
    return ds, model, make_scenario_system("linear2")


class TestPlain:
    def test_zero_epochs(self, small_setup):
        ds, model, sys = small_setup
        params, report = train_plain(ds, model, sys, TrainConfig(epochs=0))
        assert same_params(params, model) and report.epochs == []

    def test_input_not_mutated(self, small_setup):
        ds, model, sys = small_setup
        snapshot = model.copy()
        train_plain(ds, model, sys, TrainConfig(epochs=1))
        assert same_params(model, snapshot)

    def test_deterministic(self, small_setup, tmp_path):
        ds, model, sys = small_setup
        cfg = TrainConfig(epochs=2, seed=4)
        p1, r1 = train_plain(ds, model, sys, cfg)
        p2, r2 = train_plain(ds, model, sys, cfg)
        assert same_params(p1, p2)
        write_report_csv(r1, tmp_path / "a.csv")
        write_report_csv(r2, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_loss_decreases(self):
        ds = simulate(ScenarioConfig.for_scenario("linear2", seed=1))
        model = init_params(spec_for_scenario("linear2"), rng_streams(1)["init"], "linear2")
        _, report = train_plain(ds, model, make_scenario_system("linear2"), TrainConfig(epochs=20, seed=1))
        assert report.epochs[-1].total < report.epochs[0].total

    def test_instabilities_are_skipped(self, small_setup):
        ds, model, sys = small_setup
        cfg = TrainConfig(epochs=2, solver=SolverConfig(method="rk4-fixed", step=0.1, max_steps=3))
        params, report = train_plain(ds, model, sys, cfg)
        assert report.skips == 2 * len(ds) and report.steps == 0
        assert report.skip_fraction == 1.0
        assert same_params(params, model)

    def test_report_columns(self, small_setup, tmp_path):
        ds, model, sys = small_setup
        _, report = train_plain(ds, model, sys, TrainConfig(epochs=2))
        write_report_csv(report, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "epoch,total,kl,recon,match,penalty,skips"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2"]

    def test_empty_dataset(self, small_setup):
        ds, model, sys = small_setup
        with pytest.raises(ValueError):
            train_plain(ds.subset(0), model, sys, TrainConfig(epochs=1))


class TestSimilarity:
    def test_singleton_batches_match_plain(self, small_setup):
        ds, model, sys = small_setup
        cfg = TrainConfig(epochs=2, batch_size=1, use_similarity_batching=True, seed=6)
        p_sim, r_sim = train_similarity(ds, model, sys, cfg)
        p_plain, r_plain = train_plain(ds, model, sys, cfg)
        assert same_params(p_sim, p_plain)
        assert [e.total for e in r_sim.epochs] == [e.total for e in r_plain.epochs]

    def test_deterministic(self, small_setup):
        ds, model, sys = small_setup
        cfg = TrainConfig(epochs=2, batch_size=3, use_similarity_batching=True, seed=1)
        p1, r1 = train_similarity(ds, model, sys, cfg)
        p2, r2 = train_similarity(ds, model, sys, cfg)
        assert same_params(p1, p2)
        assert [e.total for e in r1.epochs] == [e.total for e in r2.epochs]
        assert r1.last_plan is not None and len(r1.last_plan) == len(ds)

    def test_random_batches_run(self, small_setup):
        ds, model, sys = small_setup
        cfg = TrainConfig(epochs=1, batch_size=3, random_batches=True)
        _, report = train(ds, model, sys, cfg)
        for w in report.last_plan.weights:
            np.testing.assert_array_equal(w, 1 / 3)

    def test_batch_larger_than_cohort(self, small_setup):
        ds, model, sys = small_setup
        with pytest.raises(ValueError, match="batch size"):
            train_similarity(ds, model, sys, TrainConfig(epochs=1, batch_size=11, use_similarity_batching=True))

    def test_dispatch_plain(self, small_setup):
        ds, model, sys = small_setup
        _, report = train(ds, model, sys, TrainConfig(epochs=1))
        assert report.last_plan is None

    def test_epoch_callback(self, small_setup):
        ds, model, sys = small_setup
        seen = []
        train(ds, model, sys, TrainConfig(epochs=3, batch_size=2, use_similarity_batching=True),
              on_epoch=lambda e, p, s: seen.append((e, s.epoch)))
        assert seen == [(1, 1), (2, 2), (3, 3)]
