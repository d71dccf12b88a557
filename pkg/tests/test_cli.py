import csv

import numpy as np
import pytest

from odevae import cli
from odevae.datagen import ScenarioConfig, simulate
from odevae.evaluate import group_recovery_accuracy
from odevae.model import init_params, load_checkpoint, spec_for_scenario
from odevae.odecore import make_scenario_system
from odevae.train import rng_streams


def run(*argv):
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    assert run("simulate", "--scenario", "linear2", "--seed", 1, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def small_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    assert run("simulate", "--scenario", "linear2", "--seed", 2, "--n", 12, "--out", out) == 0
    return out


class TestSimulate:
    def test_hundred_individuals(self, cohort):
        obs = read_rows(cohort / "observations.csv")
        assert len({r["id"] for r in obs}) == 100
        assert len(read_rows(cohort / "baseline.csv")) == 100
        truth = read_rows(cohort / "truth.csv")
        assert list(truth[0]) == ["id", "group", "eta_1", "eta_2", "t1"]

    def test_rerun_identical_bytes(self, cohort, tmp_path):
        assert run("simulate", "--scenario", "linear2", "--seed", 1, "--out", tmp_path) == 0
        for name in ("observations.csv", "baseline.csv", "truth.csv"):
            assert (tmp_path / name).read_bytes() == (cohort / name).read_bytes()

    def test_invalid_scenario(self, tmp_path, capsys):
        assert run("simulate", "--scenario", "linear3", "--out", tmp_path) == 2
        assert "linear3" in capsys.readouterr().err

    def test_out_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ODEVAE_OUT", str(tmp_path / "env"))
        assert run("simulate", "--n", 4) == 0
        assert (tmp_path / "env" / "observations.csv").exists()


class TestTrain:
    def test_zero_epochs_writes_initial_checkpoint(self, small_cohort, tmp_path):
        assert run("train", "--data", small_cohort, "--epochs", 0, "--seed", 3, "--out", tmp_path) == 0
        params = load_checkpoint(tmp_path / "checkpoint.txt")
        init = init_params(spec_for_scenario("linear2"), rng_streams(3)["init"], "linear2")
        for k in init.values:
            np.testing.assert_array_equal(params.values[k], init.values[k])
        assert read_rows(tmp_path / "train_report.csv") == []

    def test_missing_baseline_names_path(self, small_cohort, tmp_path, capsys):
        missing = tmp_path / "nowhere" / "baseline.csv"
        code = run("train", "--data", small_cohort / "observations.csv", "--baseline", missing, "--out", tmp_path)
        assert code == 2
        assert str(missing) in capsys.readouterr().err

    def test_schema_mismatch(self, small_cohort, tmp_path, capsys):
        lines = (small_cohort / "baseline.csv").read_text().splitlines()
        (tmp_path / "b.csv").write_text("\n".join(lines[:-2]) + "\n")
        code = run("train", "--data", small_cohort / "observations.csv", "--baseline", tmp_path / "b.csv",
                   "--out", tmp_path / "o")
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_idempotent(self, small_cohort, tmp_path):
        for d in ("a", "b"):
            args = ["train", "--data", small_cohort, "--epochs", 2, "--similarity", "--batch-size", 3,
                    "--checkpoint-every", 1, "--out", tmp_path / d]
            assert run(*args) == 0
        for name in ("checkpoint.txt", "checkpoint_epoch001.txt", "train_report.csv", "batch_plan.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        meta = (tmp_path / "a" / "run_meta.txt").read_text()
        assert "duration_s" in meta and "started" in meta


class TestConfig:
    def test_flag_beats_file_beats_default(self, tmp_path):
        (tmp_path / "run.cfg").write_text("# settings\nepochs = 7\nbatch-size = 4\nsimilarity = yes\n")
        args = cli.build_parser().parse_args(["train", "--config", str(tmp_path / "run.cfg"), "--epochs", "2"])
        s = cli._settings(args)
        assert s["epochs"] == 2 and s["batch_size"] == 4 and s["similarity"] is True
        assert s["lr"] == 1e-3

    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "run.cfg").write_text("epochs = 1\nlearning_speed = 3\n")
        assert run("simulate", "--config", tmp_path / "run.cfg", "--out", tmp_path) == 2
        assert "learning_speed" in capsys.readouterr().err

    def test_bad_value(self, tmp_path):
        (tmp_path / "run.cfg").write_text("similarity = maybe\n")
        with pytest.raises(cli.UsageError, match=":1:"):
            cli.read_config(tmp_path / "run.cfg")


@pytest.fixture(scope="module")
def evaluated(cohort, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    assert run("train", "--data", cohort, "--epochs", 0, "--seed", 1, "--out", out) == 0
    assert run("evaluate", "--data", cohort, "--checkpoint", out / "checkpoint.txt", "--out", out) == 0
    return out


class TestEvaluate:
    def test_schema(self, evaluated):
        rows = read_rows(evaluated / "trajectories.csv")
        assert list(rows[0]) == ["id", "t", "dim", "mu_encoder", "mu_smooth"]
        assert any(r["mu_encoder"] and not r["mu_smooth"] for r in rows)
        assert any(r["mu_smooth"] and not r["mu_encoder"] for r in rows)

    def test_initialization_near_chance(self, evaluated):
        acc = float(next(r["value"] for r in read_rows(evaluated / "recovery.csv") if r["metric"] == "accuracy"))
        assert abs(acc - 0.5) <= 0.15

    def test_without_truth(self, cohort, evaluated, tmp_path):
        for name in ("observations.csv", "baseline.csv"):
            (tmp_path / name).write_bytes((cohort / name).read_bytes())
        assert run("evaluate", "--data", tmp_path, "--checkpoint", evaluated / "checkpoint.txt",
                   "--out", tmp_path / "o") == 0
        assert (tmp_path / "o" / "trajectories.csv").exists()
        assert not (tmp_path / "o" / "recovery.csv").exists()

    def test_shape_mismatch(self, small_cohort, tmp_path, capsys):
        other = tmp_path / "narrow"
        other.mkdir()
        (other / "observations.csv").write_bytes((small_cohort / "observations.csv").read_bytes())
        lines = (small_cohort / "baseline.csv").read_text().splitlines()
        (other / "baseline.csv").write_text("\n".join(ln.rsplit(",", 1)[0] for ln in lines) + "\n")
        assert run("train", "--data", small_cohort, "--epochs", 0, "--out", tmp_path) == 0
        code = run("evaluate", "--data", other, "--checkpoint", tmp_path / "checkpoint.txt", "--out", tmp_path)
        assert code == 2
        assert "q=49" in capsys.readouterr().err

    def test_missing_checkpoint(self, small_cohort, tmp_path):
        assert run("evaluate", "--data", small_cohort, "--checkpoint", tmp_path / "x.txt", "--out", tmp_path) == 2


def test_untrained_accuracy_tracks_baseline_information():
    # with baselines shuffled across individuals the random ODE-net carries no
    # group signal and the untrained model sits at chance
    sys = make_scenario_system("linear2")
    for seed in (2, 3, 8):
        ds = simulate(ScenarioConfig.for_scenario("linear2", seed=seed))
        model = init_params(spec_for_scenario("linear2"), rng_streams(seed)["init"], "linear2")
        perm = np.random.default_rng(seed).permutation(len(ds))
        bases = [ds.individuals[j].baseline for j in perm]
        for ind, b in zip(ds.individuals, bases):
            ind.baseline = b
        assert abs(group_recovery_accuracy(ds, model, sys) - 0.5) <= 0.15


@pytest.fixture(scope="module")
def bundles(small_cohort, tmp_path_factory):
    out = tmp_path_factory.mktemp("plots")
    assert run("train", "--data", small_cohort, "--epochs", 1, "--similarity", "--batch-size", 4,
               "--out", out) == 0
    assert run("evaluate", "--data", small_cohort, "--checkpoint", out / "checkpoint.txt", "--out", out) == 0
    assert run("plotdata", "--out", out, "--truth", small_cohort / "truth.csv",
               "--plan", out / "batch_plan.csv") == 0
    return out


class TestPlotdata:
    def test_individuals_layout(self, bundles):
        rows = read_rows(bundles / "fig_individuals.csv")
        panels = {r["panel"] for r in rows}
        assert sorted(p for p in panels if p.startswith("single")) == ["single-1", "single-2"]
        assert sorted(p for p in panels if p.startswith("group")) == ["group-1", "group-2"]
        assert len({r["id"] for r in rows if r["panel"] == "single-1"}) == 1
        assert (bundles / "fig_individuals.svg").read_text().lstrip().startswith("<?xml")

    def test_batch_has_one_reference(self, bundles):
        rows = read_rows(bundles / "fig_batch.csv")
        assert len({r["id"] for r in rows}) == 4
        assert len({r["id"] for r in rows if r["is_reference"] == "1"}) == 1

    def test_empty_selection(self, bundles, tmp_path):
        assert run("plotdata", "--trajectories", bundles / "trajectories.csv", "--ids", "", "--out", tmp_path) == 0
        assert read_rows(tmp_path / "fig_individuals.csv") == []

    def test_svg_stable(self, bundles, tmp_path):
        assert run("plotdata", "--trajectories", bundles / "trajectories.csv", "--out", tmp_path / "a") == 0
        assert run("plotdata", "--trajectories", bundles / "trajectories.csv", "--out", tmp_path / "b") == 0
        assert (tmp_path / "a" / "fig_individuals.svg").read_bytes() == (tmp_path / "b" / "fig_individuals.svg").read_bytes()
