import numpy as np
import pytest
from scipy import stats

from odevae.datagen import (
    TRUE_SYSTEMS,
    DataFormatError,
    Individual,
    ScenarioConfig,
    export_csv,
    import_csv,
    simulate,
    true_state,
)
from odevae.odecore import linear_closed_form


class TestDefaults:
    def test_linear2(self):
        cfg = ScenarioConfig.for_scenario("linear2")
        assert (cfg.n_individuals, cfg.p_timevars, cfg.q_baseline, cfg.n_informative) == (100, 10, 50, 10)
        assert (cfg.sigma_var, cfg.sigma_ind, cfg.sigma_info, cfg.sigma_noise) == (0.1, 0.1, 0.5, 0.5)
        assert cfg.baseline_mode == "group-membership"

    def test_lotka_volterra(self):
        cfg = ScenarioConfig.for_scenario("lotka-volterra")
        assert cfg.n_individuals == 200
        assert (cfg.n_informative, cfg.q_baseline - cfg.n_informative) == (30, 20)

    def test_linear4(self):
        cfg = ScenarioConfig.for_scenario("linear4")
        assert cfg.n_individuals == 100
        assert cfg.baseline_mode == "true-ode-params"
        # five variables per parameter, thirty noise columns
        assert cfg.n_informative == 5 * 4 and cfg.q_baseline - cfg.n_informative == 30
        assert (cfg.sigma_var, cfg.sigma_ind, cfg.sigma_info, cfg.sigma_noise) == (0.1, 0.5, 0.1, 0.1)

    def test_true_parameters(self):
        assert TRUE_SYSTEMS["linear2"]["eta"] == ((-0.2, 0.2), (-0.2, -0.2))
        assert TRUE_SYSTEMS["lotka-volterra"]["eta"] == ((0.5, 2.0), (1.0, 0.5))
        assert TRUE_SYSTEMS["linear4"]["eta"] == ((-0.2, 0.1, -0.1, 0.25), (-0.2, 0.1, 0.1, -0.2))

    @pytest.mark.parametrize(
        "kw",
        [
            {"sigma_var": -0.1},
            {"n_informative": 60},
            {"t_range": (0.0, 10.0)},
            {"scenario": "linear3"},
            {"baseline_mode": "other"},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ScenarioConfig(**kw)


class TestSimulate:
    def test_shapes_and_balance(self):
        ds = simulate(ScenarioConfig.for_scenario("linear2", seed=2))
        assert len(ds) == 100
        assert np.bincount(ds.groups)[1:].tolist() == [50, 50]
        for ind in ds.individuals:
            assert ind.values.shape == (2, 10) and ind.baseline.shape == (50,)
            assert ind.times[0] == 0.0 and 1.5 <= ind.times[1] <= 10.0

    def test_bit_reproducible(self):
        cfg = ScenarioConfig.for_scenario("linear4", seed=7)
        assert simulate(cfg) == simulate(cfg)
        assert not simulate(cfg) == simulate(ScenarioConfig.for_scenario("linear4", seed=8))

    def test_noiseless_initial_values(self):
        ds = simulate(ScenarioConfig.for_scenario("linear2", sigma_var=0.0, sigma_ind=0.0, seed=1))
        for ind in ds.individuals:
            assert np.all(ind.values[0, :5] == 2.0)
            assert np.all(ind.values[0, 5:] == 1.0)

    @pytest.mark.parametrize("scenario", ["linear2", "linear4"])
    def test_noiseless_matches_closed_form(self, scenario):
        ds = simulate(ScenarioConfig.for_scenario(scenario, sigma_var=0.0, sigma_ind=0.0, n_individuals=20))
        u0 = TRUE_SYSTEMS[scenario]["u0"]
        for ind in ds.individuals:
            A = np.diag(ind.true_eta) if scenario == "linear2" else ind.true_eta.reshape(2, 2)
            for t, row in zip(ind.times, ind.values):
                u = linear_closed_form(A, u0, t)
                np.testing.assert_array_equal(row[:5], u[0])
                np.testing.assert_array_equal(row[5:], u[1])

    def test_lotka_volterra_truth_starts_at_initial_state(self):
        # at t = 0 the state is the initial condition; later values stay positive
        u = true_state("lotka-volterra", [0.5, 2.0], 0.0)
        np.testing.assert_array_equal(u, [2.0, 2.0])
        assert np.all(true_state("lotka-volterra", [1.0, 0.5], 10.0) > 0)

    def test_t1_uniform(self):
        ds = simulate(ScenarioConfig.for_scenario("linear2", n_individuals=10_000, q_baseline=10,
                                                  n_informative=2, seed=3))
        t1 = np.array([ind.times[1] for ind in ds.individuals])
        assert t1.min() >= 1.5 and t1.max() <= 10.0
        assert stats.kstest(t1, stats.uniform(loc=1.5, scale=8.5).cdf).pvalue > 0.01

    def test_group_baseline_means(self):
        cfg = ScenarioConfig.for_scenario("linear2", seed=4)
        ds = simulate(cfg)
        bound = 3 * cfg.sigma_info / np.sqrt(len(ds) / 2)
        for g, sign in ((1, 1.0), (2, -1.0)):
            rows = np.array([i.baseline[: cfg.n_informative] for i in ds.individuals if i.true_group == g])
            assert np.all(np.abs(rows.mean(axis=0) - sign) < bound)

    def test_parameter_baseline_means(self):
        cfg = ScenarioConfig.for_scenario("linear4", seed=4)
        ds = simulate(cfg)
        bound = 3 * cfg.sigma_info / np.sqrt(len(ds) / 2)
        for g in (1, 2):
            eta = np.array(TRUE_SYSTEMS["linear4"]["eta"][g - 1])
            rows = np.array([i.baseline[: cfg.n_informative] for i in ds.individuals if i.true_group == g])
            assert np.all(np.abs(rows.mean(axis=0) - np.repeat(eta, 5)) < bound)


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = simulate(ScenarioConfig.for_scenario("linear4", n_individuals=15, seed=6))
        files = export_csv(ds, tmp_path)
        back = import_csv(files["observations"], files["baseline"], files["truth"])
        assert back == ds

    def test_round_trip_without_truth(self, tmp_path):
        ds = simulate(ScenarioConfig.for_scenario("linear2", n_individuals=5))
        files = export_csv(ds, tmp_path)
        back = import_csv(files["observations"], files["baseline"])
        assert not back.has_truth
        for a, b in zip(ds.individuals, back.individuals):
            assert np.array_equal(a.values, b.values) and np.array_equal(a.baseline, b.baseline)

    def test_missing_baseline_id(self, tmp_path):
        ds = simulate(ScenarioConfig.for_scenario("linear2", n_individuals=5))
        files = export_csv(ds, tmp_path)
        lines = files["baseline"].read_text().splitlines()
        files["baseline"].write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DataFormatError, match="5"):
            import_csv(files["observations"], files["baseline"])

    def test_malformed_row_reports_line(self, tmp_path):
        ds = simulate(ScenarioConfig.for_scenario("linear2", n_individuals=3))
        files = export_csv(ds, tmp_path)
        lines = files["observations"].read_text().splitlines()
        lines[3] = lines[3].replace(",", ",x", 1)
        files["observations"].write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match=":4:"):
            import_csv(files["observations"], files["baseline"])

    def test_short_row_reports_line(self, tmp_path):
        ds = simulate(ScenarioConfig.for_scenario("linear2", n_individuals=3))
        files = export_csv(ds, tmp_path)
        lines = files["observations"].read_text().splitlines()
        lines[2] = ",".join(lines[2].split(",")[:-1])
        files["observations"].write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match=":3:"):
            import_csv(files["observations"], files["baseline"])

    def test_variable_number_of_time_points(self, tmp_path):
        rng = np.random.default_rng(0)
        obs = ["id,time,var_1,var_2"]
        base = ["id,b_1"]
        counts = {"a": 2, "b": 5, "c": 12}
        for ident, k in counts.items():
            for t in np.sort(rng.uniform(0, 10, size=k)):
                obs.append(f"{ident},{t:.17g},{rng.normal():.17g},{rng.normal():.17g}")
            base.append(f"{ident},{rng.normal():.17g}")
        (tmp_path / "o.csv").write_text("\n".join(obs) + "\n")
        (tmp_path / "b.csv").write_text("\n".join(base) + "\n")
        ds = import_csv(tmp_path / "o.csv", tmp_path / "b.csv")
        assert [len(i.times) for i in ds.individuals] == [2, 5, 12]

    def test_single_observation_rejected(self, tmp_path):
        (tmp_path / "o.csv").write_text("id,time,var_1\na,0,1.0\n")
        (tmp_path / "b.csv").write_text("id,b_1\na,0.5\n")
        with pytest.raises(DataFormatError, match="fewer than 2"):
            import_csv(tmp_path / "o.csv", tmp_path / "b.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "o.csv").write_text("ident,time,var_1\n")
        (tmp_path / "b.csv").write_text("id,b_1\n")
        with pytest.raises(DataFormatError, match="header"):
            import_csv(tmp_path / "o.csv", tmp_path / "b.csv")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            import_csv(tmp_path / "nope.csv", tmp_path / "b.csv")


class TestIndividual:
    def test_needs_two_observations(self):
        with pytest.raises(ValueError):
            Individual("x", [0.0], [[1.0, 2.0]], [0.0])

    def test_times_ascending(self):
        with pytest.raises(ValueError):
            Individual("x", [1.0, 0.0], [[1.0], [2.0]], [0.0])
