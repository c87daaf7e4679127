"""Tests for experiment orchestration: records, runs, suites, CLI."""

import json
import math

import pytest

from sll import runner
from sll.analytic import (
    OffspringLaw,
    certify_weak_bound,
    feller_transition_laplace,
    gw_joint_moments_exact,
    gw_progeny_tail_exact,
    gw_survival_exact,
)
from sll.cli import main
from sll.runner import (
    DEFAULT_SEED,
    EXPERIMENTS,
    SUITES,
    ExperimentConfig,
    RunRecord,
    build_kernel,
    build_model,
    build_offspring_law,
    build_spec,
    flatten_record,
    records_to_csv,
    run,
    run_check,
    summarize,
    verify_suite,
    _count_cap_hits,
)


def small_run(experiment, params, replicates=None, **kw):
    return run(ExperimentConfig(experiment, params, replicates=replicates, **kw))


# ---------------------------------------------------------------------------
# records


class TestRunRecord:
    def record(self):
        return small_run("limits", {"query": "kolmogorov", "gamma": 0.5})

    def test_round_trip(self):
        rec = self.record()
        again = RunRecord.from_json(rec.to_json())
        assert again.to_dict() == rec.to_dict()

    def test_json_is_one_sorted_line(self):
        text = self.record().to_json()
        assert "\n" not in text
        keys = list(json.loads(text))
        assert keys == sorted(keys)

    def test_numeric_view_drops_timing(self):
        rec = self.record()
        view = rec.numeric_view()
        assert "wall_time_seconds" not in view
        assert view["results"] == rec.results

    def test_missing_cap_hits_defaults_to_zero(self):
        raw = self.record().to_dict()
        del raw["cap_hits"]
        rec = RunRecord.from_json(json.dumps(raw))
        assert rec.cap_hits == 0

    def test_schema_and_version_recorded(self):
        rec = self.record()
        assert rec.schema == runner.SCHEMA_VERSION
        assert rec.version


class TestExperimentConfig:
    def test_unknown_experiment_rejected(self):
        with pytest.raises(ValueError, match="unknown experiment"):
            ExperimentConfig("telepathy", {})

    def test_bad_replicates_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig("survival", {}, replicates=0)

    def test_bad_workers_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig("survival", {}, workers=0)

    def test_default_seed(self):
        assert ExperimentConfig("survival", {}).seed == DEFAULT_SEED


# ---------------------------------------------------------------------------
# config building blocks


class TestBuilders:
    def test_default_law_is_critical_binary(self):
        law = build_offspring_law({})
        assert law.values == (0, 2)
        assert law.probs == (0.5, 0.5)

    def test_family_law_takes_mean(self):
        law = build_offspring_law({"law": {"kind": "binary-family", "mean": 0.9}})
        assert law.mean == pytest.approx(0.9)

    def test_explicit_values_and_probs(self):
        law = build_offspring_law(
            {"law": {"values": [0, 1, 2], "probs": [0.25, 0.5, 0.25]}}
        )
        assert law.mean == pytest.approx(1.0)

    def test_law_rejects_garbage(self):
        with pytest.raises(ValueError):
            build_offspring_law({"law": {"kind": "zeta"}})

    def test_kernel_from_mass_block(self):
        kernel = build_kernel({"d": 1, "L": 2, "mass": {"1": 0.5, "-1": 0.5}})
        assert kernel.d == 1
        assert kernel.support_size == 2

    def test_model_kinds(self):
        assert build_model({"model": "gw"}).__class__.__name__ == "GaltonWatsonModel"
        brw = build_model({"model": "brw", "d": 2, "L": 1})
        assert brw.kernel.support_size == 8
        with pytest.raises(ValueError, match="unknown model"):
            build_model({"model": "ising"})

    def test_spec_round_trip(self):
        spec = build_spec(
            {"times": [0.5, 1], "exponents": [1, 2], "wavevectors": [[1, 0], [0, 2]]}
        )
        assert spec.times == (0.5, 1.0)
        assert spec.exponents == (1, 2)
        assert spec.wavevectors == ((1.0, 0.0), (0.0, 2.0))


# ---------------------------------------------------------------------------
# experiments through run()


class TestLimitsQueries:
    """The limits experiment must agree with the analytic functions verbatim."""

    def value(self, params):
        return small_run("limits", params).results["value"]

    def test_kolmogorov(self):
        assert self.value({"query": "kolmogorov", "gamma": 0.5}) == pytest.approx(4.0)

    def test_survival(self):
        want = gw_survival_exact(OffspringLaw.binary(), 50)
        assert self.value({"query": "survival", "n": 50}) == pytest.approx(want)

    def test_moments(self):
        want = gw_joint_moments_exact(OffspringLaw.binary(), (10, 20), (1, 1))
        got = self.value({"query": "moments", "gens": [10, 20], "exponents": [1, 1]})
        assert got == pytest.approx(want)

    def test_progeny_tail(self):
        want = gw_progeny_tail_exact(OffspringLaw.binary(), 100)
        assert self.value({"query": "progeny_tail", "k": 100}) == pytest.approx(want)

    def test_yaglom_mean(self):
        assert self.value({"query": "yaglom_mean", "gamma": 1.0}) == pytest.approx(0.5)

    def test_mass_moment(self):
        got = self.value(
            {"query": "mass_moment", "spec": {"times": [1.0], "exponents": [2]}}
        )
        assert got == pytest.approx(1.0)

    def test_conditional_moment(self):
        got = self.value(
            {
                "query": "conditional_moment",
                "t": 1.0,
                "spec": {"times": [1.0, 1.5], "exponents": [1, 1]},
            }
        )
        assert got == pytest.approx(0.5)

    def test_fourier_moment(self):
        got = self.value(
            {
                "query": "fourier_moment",
                "d": 2,
                "spec": {
                    "times": [1.0],
                    "exponents": [1],
                    "wavevectors": [[2.0, 0.0]],
                },
            }
        )
        assert got == pytest.approx(math.exp(-1.0))

    def test_transition_laplace(self):
        want = feller_transition_laplace(1.0, 1.0, 2.0)
        got = self.value({"query": "transition_laplace", "x": 1.0, "tau": 1.0, "lam": 2.0})
        assert got == pytest.approx(want)

    def test_unknown_query_rejected(self):
        with pytest.raises(ValueError, match="unknown limits query"):
            small_run("limits", {"query": "entropy"})


class TestRunSurvival:
    def test_record_shape_and_value(self):
        rec = small_run("survival", {"model": "gw", "ns": [10, 20]}, replicates=40_000)
        assert rec.experiment == "survival"
        assert rec.workers == 1
        points = rec.results["points"]
        assert [p["n"] for p in points] == [10.0, 20.0]
        exact = gw_survival_exact(OffspringLaw.binary(), 10)
        theta = points[0]["theta"]
        assert abs(theta["value"] - exact) <= 4.0 * theta["stderr"]
        assert points[0]["scaled"]["value"] == pytest.approx(10.0 * theta["value"])

    def test_deterministic_reruns(self):
        cfg = ExperimentConfig(
            "survival", {"model": "gw", "ns": [15]}, replicates=30_000
        )
        first = run(cfg).numeric_view()
        second = run(cfg).numeric_view()
        assert first == second

    def test_output_path_appends(self, tmp_path):
        path = tmp_path / "records.jsonl"
        cfg = ExperimentConfig(
            "survival",
            {"model": "gw", "ns": [10]},
            replicates=10_000,
            output_path=str(path),
        )
        run(cfg)
        run(cfg)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert RunRecord.from_json(lines[0]).experiment == "survival"

    def test_explicit_workers_recorded_and_env_restored(self, monkeypatch):
        monkeypatch.delenv("SLL_WORKERS", raising=False)
        rec = small_run(
            "survival", {"model": "gw", "ns": [10]}, replicates=10_000, workers=2
        )
        assert rec.workers == 2
        import os

        assert "SLL_WORKERS" not in os.environ


class TestRunCertify:
    def test_certificate_matches_direct_call(self):
        rec = small_run("certify", {"c_cluster": 1.0, "c_theta": 1.0})
        cert = certify_weak_bound(1.0, 1.0)
        assert rec.results["c2"] == pytest.approx(cert.c2, rel=1e-12)
        assert rec.results["holds"] is True

    def test_scale_checks_dominate_exact_survival(self):
        rec = small_run("certify", {"check_scales": [1, 2, 3, 4]})
        rows = rec.results["survival_bound"]
        assert [r["n"] for r in rows] == [4, 16, 64, 256]
        assert all(r["holds"] for r in rows)


class TestRunLtVerify:
    def test_tiny_enumeration_passes(self):
        rec = small_run("lt_verify", {"d": 1, "L": 1, "bond_cutoff": 3})
        assert rec.results["passed"] is True
        assert rec.results["n_trees"] > 0
        assert all(r["max_ratio"] <= 1.0 + 1e-12 for r in rec.results["reports"])


class TestRunFellerCheck:
    def test_self_checks_pass_at_small_size(self):
        rec = small_run("feller_check", {}, replicates=50_000)
        assert rec.results["passed"] is True
        assert rec.results["chapman"]["max_relative_error"] <= 1e-8


# ---------------------------------------------------------------------------
# summaries, flattening, CSV


class TestSummarize:
    def test_mentions_experiment_and_estimates(self):
        rec = small_run("survival", {"model": "gw", "ns": [10]}, replicates=10_000)
        text = summarize(rec)
        assert "survival" in text
        assert "+-" in text

    def test_long_lists_are_collapsed(self):
        rows = runner._summary_rows({"big": [{"a": i} for i in range(30)]})
        assert rows == [("big", "30 entries")]


class TestFlatten:
    def test_nested_keys_and_indices(self):
        flat = flatten_record({"a": {"b": 1}, "c": [10, {"d": 2}]})
        assert flat == {"a.b": 1, "c.0": 10, "c.1.d": 2}

    def test_csv_union_of_columns(self, tmp_path):
        lines = [
            json.dumps({"x": 1, "shared": "a"}),
            json.dumps({"y": {"z": 2}, "shared": "b"}),
        ]
        out = tmp_path / "t.csv"
        with open(out, "w", newline="") as handle:
            count = records_to_csv(lines, handle)
        assert count == 2
        header, row1, row2 = out.read_text().strip().splitlines()
        assert header == "shared,x,y.z"
        assert row1 == "a,1,"
        assert row2 == "b,,2"


class TestCapHits:
    def test_counts_nested_capped_flags(self):
        results = {
            "a": {"flags": ["capped:3", "low_power"]},
            "b": [{"flags": ["capped:2"]}, {"flags": []}],
        }
        assert _count_cap_hits(results) == 5

    def test_zero_when_absent(self):
        assert _count_cap_hits({"a": {"value": 1.0}}) == 0


# ---------------------------------------------------------------------------
# verification suites


class TestSuiteRegistry:
    def test_all_suite_covers_every_check(self):
        assert set(SUITES["all"]) == set(runner._CHECKS)
        assert len(SUITES["all"]) == len(runner._CHECKS) == 12

    def test_component_suites_partition_all(self):
        names = [c for s in sorted(SUITES) if s != "all" for c in SUITES[s]]
        assert sorted(names) == sorted(SUITES["all"])

    def test_unknown_check_rejected(self):
        with pytest.raises(ValueError, match="unknown check"):
            run_check("astrology")

    def test_unknown_suite_rejected(self):
        with pytest.raises(ValueError, match="unknown suite"):
            verify_suite("astrology")


def install_fake_check(monkeypatch, passed):
    def fake(seed):
        return {"seed": seed, "z": 0.0}, passed

    monkeypatch.setitem(runner._CHECKS, "fake-check", ("a fake check", fake))
    monkeypatch.setitem(runner.SUITES, "fake", ("fake-check",))


class TestVerifySuite:
    def test_aggregates_check_results(self, monkeypatch):
        install_fake_check(monkeypatch, passed=True)
        rec = verify_suite("fake")
        assert rec.experiment == "verify"
        assert rec.results["passed"] is True
        (check,) = rec.results["checks"]
        assert check["check_id"] == "fake-check"
        assert check["measured"]["seed"] == DEFAULT_SEED

    def test_prints_verdict_lines(self, monkeypatch, capsys):
        install_fake_check(monkeypatch, passed=False)
        rec = verify_suite("fake", quiet=False)
        out = capsys.readouterr().out
        assert out.startswith("FAIL fake-check")
        assert "a fake check" in out
        assert rec.results["passed"] is False

    def test_check_seed_differs_between_checks(self):
        a = runner._check_seed(DEFAULT_SEED, "alpha")
        b = runner._check_seed(DEFAULT_SEED, "beta")
        assert a != b


# ---------------------------------------------------------------------------
# command line


class TestCLI:
    def test_limits_prints_record(self, capsys):
        code = main(["limits", "--query", "kolmogorov", "--params", '{"gamma": 0.5}'])
        assert code == 0
        out = capsys.readouterr().out
        record = json.loads(out.strip().splitlines()[-1])
        assert record["results"]["value"] == pytest.approx(4.0)

    def test_unknown_query_is_config_error(self, capsys):
        code = main(["limits", "--query", "entropy"])
        assert code == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert "unknown limits query" in err["error"]

    def test_unknown_command_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["seance"])
        assert exc.value.code == 1

    def test_missing_required_param_is_config_error(self, capsys):
        assert main(["survival"]) == 1
        assert "error" in capsys.readouterr().err

    def test_bad_inline_json_is_config_error(self, capsys):
        assert main(["survival", "--params", "{bad"]) == 1

    def test_config_file_merged_under_inline(self, tmp_path, capsys):
        cfg = tmp_path / "exp.json"
        cfg.write_text(json.dumps({"model": "gw", "ns": [10], "law": "binary"}))
        out_path = tmp_path / "rec.jsonl"
        code = main(
            [
                "survival",
                "--config",
                str(cfg),
                "--params",
                '{"ns": [5]}',
                "--replicates",
                "5000",
                "--out",
                str(out_path),
            ]
        )
        assert code == 0
        rec = RunRecord.from_json(out_path.read_text().splitlines()[0])
        assert rec.params["ns"] == [5]
        assert rec.params["model"] == "gw"

    def test_verify_list_enumerates_suites(self, capsys):
        assert main(["verify", "list"]) == 0
        out = capsys.readouterr().out
        for name in SUITES:
            assert name in out

    def test_verify_unknown_suite_exits_one(self, capsys):
        assert main(["verify", "horoscope"]) == 1

    def test_verify_pass_exits_zero(self, monkeypatch, capsys, tmp_path):
        install_fake_check(monkeypatch, passed=True)
        out_path = tmp_path / "suite.jsonl"
        code = main(["verify", "fake", "--out", str(out_path)])
        assert code == 0
        assert "suite fake: PASS" in capsys.readouterr().out
        rec = RunRecord.from_json(out_path.read_text().splitlines()[0])
        assert rec.results["passed"] is True

    def test_verify_fail_exits_two(self, monkeypatch, capsys):
        install_fake_check(monkeypatch, passed=False)
        assert main(["verify", "fake"]) == 2
        assert "suite fake: FAIL" in capsys.readouterr().out

    def test_csv_round_trip(self, tmp_path, capsys):
        records = tmp_path / "r.jsonl"
        with open(records, "w") as handle:
            for gamma in (0.5, 1.0):
                rec = small_run("limits", {"query": "kolmogorov", "gamma": gamma})
                handle.write(rec.to_json() + "\n")
        out_csv = tmp_path / "r.csv"
        assert main(["csv", str(records), "--out", str(out_csv)]) == 0
        header, *rows = out_csv.read_text().strip().splitlines()
        assert "results.value" in header.split(",")
        assert len(rows) == 2

    def test_csv_missing_file_exits_one(self, capsys):
        assert main(["csv", "/no/such/file.jsonl"]) == 1
