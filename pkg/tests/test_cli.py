import csv
import json

import numpy as np
import pytest

from sthmm import cli
from sthmm.emission import read_observations_csv
from sthmm.synthdata import read_bundle

FAST = ["--iters", "60", "--burnin", "30"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def bundle(tmp_path):
    assert cli.main(["simulate", "--scenario", "A", "--replicates", "1", "--seed", "3",
                     "--out", str(tmp_path / "sim")]) == 0
    return tmp_path / "sim" / "replicate_001"


class TestResolve:
    def test_defaults(self):
        cfg = cli.resolve(["fit", "--K", "2"])
        assert (cfg.algo, cfg.iters, cfg.burnin, cfg.aux, cfg.thin) == ("exchange", 10_000, 5_000, 5, 1)
        sc = cfg.sampler_config()
        assert sc.target_accept == 0.44 and sc.warm_start and sc.aux_iterations == 5

    def test_select_k_thins_by_ten(self):
        assert cli.resolve(["select-k"]).thin == 10

    def test_config_file_then_flags(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[fit]\niters = 300\nburnin = 100\nalgo = pseudo\nno-warm-start = yes\n"
                       "[benchmark]\nreplicates = 4\n")
        cfg = cli.resolve(["fit", "--config", str(ini), "--iters", "400"])
        assert (cfg.iters, cfg.burnin, cfg.algo) == (400, 100, "pseudo")
        assert not cfg.sampler_config().warm_start
        assert cli.resolve(["benchmark", "--config", str(ini)]).replicates == 4

    @pytest.mark.parametrize("body,match", [
        ("[fit]\niterations = 300\n", "unknown key"),
        ("[fit]\niters = many\n", "bad value"),
        ("[fit]\nalgo = gibbs\n", "not in"),
        ("[fit]\nsymmetric = maybe\n", "boolean"),
    ])
    def test_config_errors(self, tmp_path, body, match):
        ini = tmp_path / "bad.ini"
        ini.write_text(body)
        with pytest.raises(cli.CLIError, match=match):
            cli.resolve(["fit", "--config", str(ini)])

    def test_missing_config(self, tmp_path):
        with pytest.raises(cli.CLIError, match="not found"):
            cli.resolve(["fit", "--config", str(tmp_path / "none.ini")])

    def test_aux_schedule(self):
        sc = cli.resolve(["fit", "--aux-schedule", "20,50"]).sampler_config()
        assert sc.aux_schedule == (20, 50)
        with pytest.raises(cli.CLIError):
            cli.resolve(["fit", "--aux-schedule", "20"]).sampler_config()

    def test_run_config_pickles(self):
        import pickle

        cfg = cli.resolve(["fit"])
        assert pickle.loads(pickle.dumps(cfg)).iters == 10_000


class TestWorkers:
    def test_default(self, monkeypatch):
        monkeypatch.delenv(cli.ENV_WORKERS, raising=False)
        assert cli.workers() == 1

    @pytest.mark.parametrize("raw", ["0", "x"])
    def test_invalid(self, monkeypatch, raw):
        monkeypatch.setenv(cli.ENV_WORKERS, raw)
        with pytest.raises(cli.CLIError):
            cli.workers()


class TestSimulate:
    def test_two_bundles_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["simulate", "--scenario", "A", "--replicates", "2", "--seed", "7",
                             "--out", str(tmp_path / d)]) == 0
        for r in ("replicate_001", "replicate_002"):
            for f in ("observations.csv", "edges.txt", "truth.json"):
                assert (tmp_path / "a" / r / f).read_bytes() == (tmp_path / "b" / r / f).read_bytes()
        assert not (tmp_path / "a" / "replicate_003").exists()

    def test_scenario_d_truth(self, tmp_path):
        assert cli.main(["simulate", "--scenario", "D", "--replicates", "1", "--out", str(tmp_path)]) == 0
        truth = json.loads((tmp_path / "replicate_001" / "truth.json").read_text())
        assert truth["K"] == 3

    def test_invalid_scenario(self, tmp_path, capsys):
        assert cli.main(["simulate", "--scenario", "Z", "--out", str(tmp_path)]) != 0
        assert "usage" in capsys.readouterr().err

    def test_requires_out(self, capsys):
        assert cli.main(["simulate", "--replicates", "1"]) == 1
        assert "--out" in capsys.readouterr().err


class TestFit:
    def test_outputs(self, bundle, tmp_path):
        out = tmp_path / "fit"
        assert cli.main(["fit", "--bundle", str(bundle), "--K", "2", "--out", str(out)] + FAST) == 0
        chain = read_csv(out / "chain.csv")
        assert chain[0][:2] == ["draw", "beta_1"] and len(chain) == 31
        assert read_csv(out / "fields.csv")[0] == ["draw", "site", "time", "state"]
        acc = read_csv(out / "acceptance.csv")
        assert acc[0] == ["parameter", "acceptance", "acceptance_post_burnin", "final_scale"]
        assert len(acc) == 9
        rep = json.loads((out / "report.json").read_text())
        assert rep["algorithm"] == "exchange" and rep["n_draws"] == 30
        assert read_csv(out / "report.csv")[0][0] == "parameter"

    def test_pseudo_shares_initialisation(self, bundle, tmp_path):
        # One iteration, no burn-in: the first stored emission means come from
        # the shared start before any theta move can differ.
        for algo in ("exchange", "pseudo"):
            assert cli.main(["fit", "--bundle", str(bundle), "--K", "2", "--algo", algo, "--iters", "1",
                             "--burnin", "0", "--relabel", "none", "--out", str(tmp_path / algo)]) == 0
        a, b = (read_csv(tmp_path / x / "chain.csv") for x in ("exchange", "pseudo"))
        mu = [i for i, n in enumerate(a[0]) if n.startswith("mu_")]
        assert [a[1][i] for i in mu] == [b[1][i] for i in mu]

    def test_csv_and_edge_inputs(self, bundle, tmp_path):
        assert cli.main(["fit", "--observations", str(bundle / "observations.csv"),
                         "--edges", str(bundle / "edges.txt"), "--K", "2",
                         "--out", str(tmp_path / "f")] + FAST) == 0
        rep = json.loads((tmp_path / "f" / "report.json").read_text())
        assert rep["misclassification"] is None

    def test_deterministic(self, bundle, tmp_path):
        for d in ("a", "b"):
            cli.main(["fit", "--bundle", str(bundle), "--K", "2", "--out", str(tmp_path / d)] + FAST)
        assert (tmp_path / "a" / "chain.csv").read_bytes() == (tmp_path / "b" / "chain.csv").read_bytes()

    def test_missing_edges_names_path(self, bundle, tmp_path, capsys):
        missing = tmp_path / "nope.txt"
        code = cli.main(["fit", "--observations", str(bundle / "observations.csv"), "--edges", str(missing),
                         "--K", "2", "--out", str(tmp_path / "f")])
        assert code == 1 and str(missing) in capsys.readouterr().err
        assert not (tmp_path / "f").exists()

    def test_requires_k(self, bundle, tmp_path, capsys):
        assert cli.main(["fit", "--bundle", str(bundle), "--out", str(tmp_path)]) == 1
        assert "--K" in capsys.readouterr().err

    def test_invalid_sampler_settings(self, bundle, tmp_path, capsys):
        assert cli.main(["fit", "--bundle", str(bundle), "--K", "2", "--iters", "10", "--burnin", "20",
                         "--out", str(tmp_path)]) == 1
        assert "burn_in" in capsys.readouterr().err


class TestBenchmark:
    def test_table(self, tmp_path):
        out = tmp_path / "bm"
        assert cli.main(["benchmark", "--scenario", "A", "--replicates", "2", "--iters", "40",
                         "--burnin", "20", "--seed", "5", "--out", str(out)]) == 0
        rows = read_csv(out / "benchmark.csv")
        assert rows[0] == ["parameter", "truth", "exchange_mae", "pseudo_mae", "best"]
        assert [r[0] for r in rows[1:]] == ["beta_1", "beta_star_1", "gamma_1_2", "gamma_2_1",
                                            "gamma_star_1_2", "gamma_star_2_1", "delta_1_2", "delta_2_1"]
        for r in rows[1:]:
            e, p = float(r[2]), float(r[3])
            assert r[4] == ("exchange" if e < p else "pseudo" if p < e else "tie")
        js = json.loads((out / "benchmark.json").read_text())
        assert js["exchange_wins"] == sum(r[4] == "exchange" for r in rows[1:])
        assert len(read_csv(out / "estimates.csv")) == 1 + 2 * 2

    def test_single_replicate_mae_is_abs_error(self, tmp_path):
        out = tmp_path / "bm"
        assert cli.main(["benchmark", "--replicates", "1", "--iters", "30", "--burnin", "10",
                         "--out", str(out)]) == 0
        est = read_csv(out / "estimates.csv")
        rows = read_csv(out / "benchmark.csv")[1:]
        for j, r in enumerate(rows):
            assert float(r[2]) == pytest.approx(abs(float(est[1][2 + j]) - float(r[1])))
            assert float(r[3]) == pytest.approx(abs(float(est[2][2 + j]) - float(r[1])))

    def test_worker_count_does_not_change_output(self, tmp_path, monkeypatch):
        args = ["benchmark", "--replicates", "2", "--iters", "30", "--burnin", "10"]
        monkeypatch.setenv(cli.ENV_WORKERS, "1")
        cli.main(args + ["--out", str(tmp_path / "one")])
        monkeypatch.setenv(cli.ENV_WORKERS, "2")
        cli.main(args + ["--out", str(tmp_path / "two")])
        for f in ("benchmark.csv", "estimates.csv"):
            assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()


class TestSelectK:
    def test_single_row(self, bundle, tmp_path):
        out = tmp_path / "sk"
        assert cli.main(["select-k", "--bundle", str(bundle), "--k-min", "1", "--k-max", "1",
                         "--out", str(out)] + FAST) == 0
        rows = read_csv(out / "dic.csv")
        assert rows[0] == ["K", "dic", "dbar", "dhat", "p_d"] and len(rows) == 2
        assert json.loads((out / "selection.json").read_text())["chosen_K"] == 1

    def test_all_k_without_early_stop(self, bundle, tmp_path):
        out = tmp_path / "sk"
        assert cli.main(["select-k", "--bundle", str(bundle), "--k-min", "1", "--k-max", "3",
                         "--no-early-stop", "--out", str(out)] + FAST) == 0
        sel = json.loads((out / "selection.json").read_text())
        assert [e["K"] for e in sel["evaluated"]] == [1, 2, 3]
        assert sel["chosen_K"] == min(sel["evaluated"], key=lambda e: e["dic"])["K"]

    def test_early_stop_rule(self, monkeypatch):
        from sthmm.diagnostics import DICResult

        values = {1: 10.0, 2: 5.0, 3: 7.0, 4: 1.0}
        seen = []

        def fake(args):
            seen.append(args[1])
            v = values[args[1]]
            return DICResult(v, v, v, 0.0)

        monkeypatch.setattr(cli, "_select_job", fake)
        table, chosen = cli.select_k(None, None, 1, 4)
        assert seen == [1, 2, 3] and chosen == 2
        assert [k for k, _ in table] == [1, 2, 3]
        seen.clear()
        assert cli.select_k(None, None, 1, 4, early_stop=False)[1] == 4

    def test_bad_range(self, bundle, tmp_path):
        assert cli.main(["select-k", "--bundle", str(bundle), "--k-min", "3", "--k-max", "2",
                         "--out", str(tmp_path)]) == 1


class TestPreprocess:
    def write(self, path, rows, header="site,time,r"):
        path.write_text(header + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
        return path

    def test_ten_percent(self, tmp_path):
        src = self.write(tmp_path / "lv.csv", [(1, 1, 1.0), (1, 2, 1.1)])
        assert cli.main(["preprocess", "--input", str(src), "--out", str(tmp_path / "y.csv")]) == 0
        with open(tmp_path / "y.csv") as fh:
            y = read_observations_csv(fh)
        assert y.shape == (1, 1, 1) and y[0, 0, 0] == pytest.approx(10.0)

    def test_constant_series(self):
        np.testing.assert_array_equal(cli.relative_variation(np.full((3, 5), 2.5)), np.zeros((3, 4, 1)))

    def test_reindexed_times(self):
        r = np.array([[1.0, 2.0, 1.0, 4.0]])
        np.testing.assert_allclose(cli.relative_variation(r)[0, :, 0], [100.0, -50.0, 300.0])

    def test_zero_denominator_names_site_time(self, tmp_path, capsys):
        src = self.write(tmp_path / "lv.csv", [(1, 1, 1.0), (1, 2, 0.0), (1, 3, 1.0), (2, 1, 1.0),
                                               (2, 2, 1.0), (2, 3, 1.0)])
        assert cli.main(["preprocess", "--input", str(src), "--out", str(tmp_path / "y.csv")]) == 1
        assert "site 1, time 2" in capsys.readouterr().err

    @pytest.mark.parametrize("header,rows", [
        ("a,b,r", [(1, 1, 1.0)]),
        ("site,time,r", []),
        ("site,time,r", [(1, 1, "x")]),
        ("site,time,r", [(1, 1, 1.0), (2, 2, 1.0)]),
        ("site,time,r", [(1, 1, 1.0)]),
    ])
    def test_malformed(self, tmp_path, header, rows):
        src = self.write(tmp_path / "lv.csv", rows, header)
        assert cli.main(["preprocess", "--input", str(src), "--out", str(tmp_path / "y.csv")]) == 1

    def test_bundle_from_preprocessed_data(self, bundle, tmp_path):
        ds = read_bundle(bundle)
        assert ds.y.shape == (9, 5, 2)
