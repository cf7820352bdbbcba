"""End-to-end pipeline and CLI tests on miniature batteries."""

import json
import sys
import textwrap

import numpy as np
import pytest

from ravenbench.cli import emit_plots, main
from ravenbench.pipeline import (
    BatteryMismatchError,
    ConfigError,
    RunConfig,
    cmd_compare,
    cmd_evaluate,
    config_to_toml,
    load_config,
    load_run,
)

SMALL = dict(seed=0, n_items=4, reps=3, substrate="oracle")

COMPARED_FILES = (
    "votes.csv",
    "reps.csv",
    "trials.csv",
    "posterior.json",
    "report.json",
    "config.toml",
    "images/manifest.json",
)


def write_config(path, **overrides):
    base = dict(SMALL)
    base.update(overrides)
    cmd = base.pop("external_command", None)
    lines = ["[run]"]
    lines.append(f"seed = {base['seed']}")
    lines.append(f"items = {base['n_items']}")
    lines.append(f'substrate = "{base["substrate"]}"')
    lines.append(f"reps = {base['reps']}")
    if cmd:
        rendered = ", ".join(json.dumps(c) for c in cmd)
        lines.append(f"external_command = [{rendered}]")
        lines.append("external_timeout = 60.0")
    path.write_text("\n".join(lines) + "\n")
    return path


class TestConfig:
    def test_roundtrip_defaults(self, tmp_path):
        cfg = RunConfig()
        text = config_to_toml(cfg)
        path = tmp_path / "c.toml"
        path.write_text(text)
        loaded, raw = load_config(path)
        assert loaded == cfg
        assert raw == text.encode()

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[run]\nbogus = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[nope]\nx = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_substrate_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(substrate="telepathy")

    def test_external_requires_command(self):
        with pytest.raises(ConfigError):
            RunConfig(substrate="external")


class TestEvaluate:
    def test_oracle_small_battery_perfect(self, tmp_path):
        report = cmd_evaluate(RunConfig(**SMALL), tmp_path / "run")
        assert report.score == 4
        assert report.score_line == "4 / 4"
        for blk in report.trial_blocks:
            assert blk.k == blk.n == 3
        for name in COMPARED_FILES:
            assert (tmp_path / "run" / name).exists()
        assert not (tmp_path / "run" / "FAILED").exists()

    def test_persisted_report_consistent(self, tmp_path):
        report = cmd_evaluate(RunConfig(**SMALL), tmp_path / "run")
        loaded = load_run(tmp_path / "run")
        assert loaded.report["score_line"] == report.score_line
        assert loaded.report["per_item"][0]["correct"] is True
        assert loaded.responses.shape == (3, 4)
        totals = [b.k for b in loaded.trials]
        assert totals == [3, 3, 3, 3]

    def test_determinism_across_worker_counts(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.toml", substrate="lattice", reps=2)
        config, raw = load_config(cfg_path)
        a = tmp_path / "a"
        b = tmp_path / "b"
        c = tmp_path / "c"
        cmd_evaluate(config, a, workers=1, config_bytes=raw)
        cmd_evaluate(config, b, workers=1, config_bytes=raw)
        cmd_evaluate(config, c, workers=2, config_bytes=raw)
        for name in COMPARED_FILES:
            ref = (a / name).read_bytes()
            assert (b / name).read_bytes() == ref, name
            assert (c / name).read_bytes() == ref, name

    def test_failed_marker_on_external_violation(self, tmp_path):
        stub = tmp_path / "stub.py"
        stub.write_text("import sys\n")  # writes no results
        cfg = RunConfig(
            **{**SMALL, "substrate": "external",
               "external_command": (sys.executable, str(stub)),
               "reps": 0},
        )
        from ravenbench.inpaint import MissingResultError

        with pytest.raises(MissingResultError):
            cmd_evaluate(cfg, tmp_path / "run")
        assert (tmp_path / "run" / "FAILED").exists()

    def test_external_stub_matches_protocol(self, tmp_path):
        stub = tmp_path / "stub.py"
        stub.write_text(
            textwrap.dedent(
                """
                import sys
                from pathlib import Path
                d = Path(sys.argv[1])
                for p in sorted(d.glob("item_*_image.png")):
                    (d / p.name.replace("_image", "_result")).write_bytes(p.read_bytes())
                """
            )
        )
        cfg = RunConfig(
            **{**SMALL, "substrate": "external",
               "external_command": (sys.executable, str(stub)),
               "reps": 1},
        )
        report = cmd_evaluate(cfg, tmp_path / "run")
        assert len(report.records) == 4
        assert all(len(r.outcomes) == 1 for r in report.records)

    def test_zero_reps_skips_fit(self, tmp_path):
        cfg = RunConfig(**{**SMALL, "reps": 0})
        report = cmd_evaluate(cfg, tmp_path / "run")
        assert report.posterior is None
        posterior = json.loads((tmp_path / "run" / "posterior.json").read_text())
        assert "skipped" in posterior


class TestCompare:
    def test_run_vs_itself_zero_diffs(self, tmp_path):
        cmd_evaluate(RunConfig(**SMALL), tmp_path / "run")
        comparison = cmd_compare(tmp_path / "run", tmp_path / "run")
        diff = np.array(comparison["error_grids"]["count_diff"])
        assert (diff == 0).all()
        assert comparison["thresholds"]["run_a"] == comparison["thresholds"]["run_b"]
        assert comparison["cell_tests"]["n_rejected"] == 0

    def test_battery_mismatch(self, tmp_path):
        cmd_evaluate(RunConfig(**SMALL), tmp_path / "a")
        cmd_evaluate(RunConfig(**{**SMALL, "seed": 9}), tmp_path / "b")
        with pytest.raises(BatteryMismatchError):
            cmd_compare(tmp_path / "a", tmp_path / "b")

    def test_substrate_comparison_structure(self, tmp_path):
        cmd_evaluate(RunConfig(**{**SMALL, "substrate": "lattice"}), tmp_path / "a")
        cmd_evaluate(RunConfig(**{**SMALL, "substrate": "local"}), tmp_path / "b")
        comparison = cmd_compare(tmp_path / "a", tmp_path / "b")
        assert "thresholds" in comparison
        assert "error_grids" in comparison


class TestEmitPlots:
    def test_single_run_plots(self, tmp_path):
        report = cmd_evaluate(RunConfig(**SMALL), tmp_path / "run")
        written = emit_plots(report, tmp_path / "plots")
        names = {p.name for p in written}
        assert names == {"psych_fit.svg", "error_grid.svg"}
        svg = (tmp_path / "plots" / "psych_fit.svg").read_text()
        assert "<polyline" in svg or "<circle" in svg
        assert svg.count("<circle") >= 4  # one empirical point per rank

    def test_from_run_directory(self, tmp_path):
        cmd_evaluate(RunConfig(**SMALL), tmp_path / "run")
        written = emit_plots(tmp_path / "run", tmp_path / "plots")
        assert (tmp_path / "plots" / "psych_fit.svg").exists()

    def test_empty_trials_notice(self, tmp_path, capsys):
        report = cmd_evaluate(RunConfig(**{**SMALL, "reps": 0}), tmp_path / "run")
        written = emit_plots(report, tmp_path / "plots")
        captured = capsys.readouterr()
        assert "omitted" in captured.out
        assert not (tmp_path / "plots" / "psych_fit.svg").exists()

    def test_two_run_comparison_draws_two_curves(self, tmp_path):
        cmd_evaluate(RunConfig(**{**SMALL, "substrate": "lattice"}), tmp_path / "a")
        cmd_evaluate(RunConfig(**{**SMALL, "substrate": "local"}), tmp_path / "b")
        written = emit_plots([tmp_path / "a", tmp_path / "b"], tmp_path / "plots")
        svg = (tmp_path / "plots" / "psych_fit.svg").read_text()
        assert svg.count("<polyline") == 2
        assert ">lattice</text>" in svg and ">local</text>" in svg


class TestRegistrationAblation:
    def test_scoring_unchanged_when_forcing_identity(self):
        """Same-geometry renders: disabling registration leaves choices alone."""
        from ravenbench.inpaint import InpaintRequest, inpaint_lattice
        from ravenbench.matrixgen import generate_battery, render_case
        from ravenbench.psychfit import CaseScorer, ScoringConfig
        from ravenbench.register import RegistrationConfig

        identity_cfg = ScoringConfig(
            register=RegistrationConfig(min_inliers=10_000)  # unreachable: all fallbacks
        )
        for item in generate_battery(0, 12)[:6]:
            case = render_case(item)
            fill = inpaint_lattice(InpaintRequest(case.image, case.mask))
            normal_vote, _ = CaseScorer(case, ScoringConfig()).score(fill.image)
            forced_vote, fallbacks = CaseScorer(case, identity_cfg).score(fill.image)
            assert fallbacks == 8
            assert forced_vote.choice == normal_vote.choice


def make_cohort_csv(path, answer_key, n=30, seed=0):
    rng = np.random.default_rng(seed)
    rows = ["participant_id,group,age,education_years,premorbid_score,sex,"
            + ",".join(f"item_{j+1}" for j in range(len(answer_key)))]
    for i in range(n):
        group = "control" if i < n // 2 else "lesion"
        resp = [
            answer_key[j] if rng.random() < 0.8 else int((answer_key[j] + 1) % 8)
            for j in range(len(answer_key))
        ]
        rows.append(
            f"p{i},{group},{55 + i % 20},{12 + i % 6},{100 + i % 15},"
            f"{'M' if i % 2 else 'F'}," + ",".join(str(r) for r in resp)
        )
    path.write_text("\n".join(rows) + "\n")
    return path


class TestCli:
    def test_generate_and_evaluate_roundtrip(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.toml")
        code = main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert code == 0
        out = capsys.readouterr().out
        assert "4 / 4" in out

    def test_generate_command(self, tmp_path):
        assert main(["generate", "--seed", "3", "--items", "2", "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "b" / "item_001_opt7.png").exists()

    def test_bad_config_exit_2(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[run]\nsubstrate = \"nope\"\n")
        assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["evaluate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "x")]) == 2

    def test_external_protocol_failure_exit_4(self, tmp_path):
        stub = tmp_path / "stub.py"
        stub.write_text("import sys\n")
        cfg = write_config(
            tmp_path / "c.toml",
            substrate="external",
            reps=0,
            external_command=(sys.executable, str(stub)),
        )
        assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 4
        assert (tmp_path / "run" / "FAILED").exists()

    def test_compare_cli(self, tmp_path):
        cfg = write_config(tmp_path / "c.toml")
        assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        out_file = tmp_path / "cmp.json"
        assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(out_file)]) == 0
        assert json.loads(out_file.read_text())["thresholds"]["run_a"] is not None

    def test_compare_mismatch_exit_3(self, tmp_path):
        write_config(tmp_path / "c.toml")
        write_config(tmp_path / "d.toml", seed=5)
        assert main(["evaluate", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "a")]) == 0
        assert main(["evaluate", "--config", str(tmp_path / "d.toml"), "--out", str(tmp_path / "b")]) == 0
        assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == 3

    def test_psych_and_errors_and_report(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.toml", substrate="lattice")
        assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
        assert main(["psych", "--run", str(tmp_path / "run")]) == 0
        run = load_run(tmp_path / "run")
        cohort = make_cohort_csv(tmp_path / "cohort.csv", run.answer_key)
        assert main([
            "errors", "--run", str(tmp_path / "run"), "--cohort", str(cohort),
            "--out", str(tmp_path / "err"),
        ]) == 0
        assert (tmp_path / "err" / "error_grid.csv").exists()
        assert main(["report", "--run", str(tmp_path / "run"), "--out", str(tmp_path / "plots")]) == 0
        assert (tmp_path / "plots" / "psych_fit.svg").exists()

    def test_psych_with_cohort(self, tmp_path):
        cfg = write_config(tmp_path / "c.toml")
        assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
        run = load_run(tmp_path / "run")
        cohort = make_cohort_csv(tmp_path / "cohort.csv", run.answer_key)
        out = tmp_path / "psych.json"
        assert main(["psych", "--run", str(tmp_path / "run"), "--cohort", str(cohort), "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert set(payload) == {"control", "lesion"}
