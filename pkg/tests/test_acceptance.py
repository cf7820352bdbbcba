"""Acceptance criteria, one test per criterion, each printing a verdict line.

Run with `pytest -s tests/test_acceptance.py` to see the verdict lines.
The ablation-ordering fixture evaluates the seed-0 battery with 50
perturbed repetitions per item for both reference substrates and is
shared with the psychometric-separation criterion.
"""

import json
import math
import time

import numpy as np
import pytest

from ravenbench import errstats, psychfit, simpanel
from ravenbench.matrixgen import generate_battery, render_case
from ravenbench.pipeline import RunConfig, cmd_evaluate, load_config
from ravenbench.register import DegenerateModelError, Homography, ransac_homography
from ravenbench.simpanel import vote

RUNTIME_BUDGET_S = 300.0


def _verdict(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {name}: {status}{suffix}")


@pytest.fixture(scope="session")
def ordering_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("ordering")
    started = time.perf_counter()
    reports = {}
    for substrate in ("lattice", "local"):
        config = RunConfig(seed=0, n_items=12, reps=50, substrate=substrate)
        reports[substrate] = cmd_evaluate(config, root / substrate, workers=2)
    elapsed = time.perf_counter() - started
    items = generate_battery(0, 12)
    strata = [len(item.rules) for item in items]
    return {"reports": reports, "elapsed": elapsed, "strata": strata, "root": root}


class TestAblationOrdering:
    def test_substrate_ordering_and_runtime(self, ordering_runs):
        lattice = ordering_runs["reports"]["lattice"]
        local = ordering_runs["reports"]["local"]
        strata = ordering_runs["strata"]
        elapsed = ordering_runs["elapsed"]

        per_stratum = {}
        for count in sorted(set(strata)):
            idx = [i for i, c in enumerate(strata) if c == count]
            lat = sum(
                lattice.records[i].clean_vote.choice == lattice.records[i].answer_index
                for i in idx
            )
            loc = sum(
                local.records[i].clean_vote.choice == local.records[i].answer_index
                for i in idx
            )
            per_stratum[count] = (lat, loc)

        ok = (
            lattice.score >= 8
            and local.score <= 3
            and lattice.score > local.score
            and all(lat >= loc for lat, loc in per_stratum.values())
            and elapsed < RUNTIME_BUDGET_S
        )
        _verdict(
            "ablation-analog ordering",
            ok,
            f"lattice {lattice.score_line}, local {local.score_line}, "
            f"per-stratum {per_stratum}, runtime {elapsed:.0f}s",
        )
        assert lattice.score >= 8
        assert local.score <= 3
        assert lattice.score > local.score
        for count, (lat, loc) in per_stratum.items():
            assert lat >= loc, f"stratum {count}: lattice {lat} < local {loc}"
        assert elapsed < RUNTIME_BUDGET_S


class TestPsychometricSeparation:
    def test_threshold_intervals_disjoint(self, ordering_runs):
        thresholds = {}
        for substrate in ("lattice", "local"):
            summary = json.loads(
                (ordering_runs["root"] / substrate / "posterior.json").read_text()
            )
            thresholds[substrate] = summary["threshold"]
        lat = thresholds["lattice"]
        loc = thresholds["local"]
        disjoint_right = loc["hi"] < lat["lo"]
        _verdict(
            "psychometric-analog separation",
            disjoint_right,
            f"lattice [{lat['lo']:.2f}, {lat['hi']:.2f}] vs local [{loc['lo']:.2f}, {loc['hi']:.2f}]",
        )
        assert disjoint_right


class TestOracleSanity:
    def test_oracle_perfect_and_boundary(self, tmp_path):
        config = RunConfig(seed=0, n_items=12, reps=10, substrate="oracle")
        report = cmd_evaluate(config, tmp_path / "oracle", workers=2)
        posterior = report.posterior
        boundary = psychfit.BOUNDARY_WARNING in posterior.warnings
        at_top = posterior.map_params.threshold_mid == posterior.m_grid[-1]
        point = report.threshold[2]
        ok = report.score == 12 and boundary and at_top and point >= 12.0
        _verdict(
            "oracle substrate sanity",
            ok,
            f"score {report.score_line}, MAP mid {posterior.map_params.threshold_mid}, "
            f"threshold point {point:.2f}, warnings {list(posterior.warnings)}",
        )
        assert report.score == 12
        assert all(b.k == b.n for b in report.trial_blocks)
        assert boundary
        assert at_top
        assert point >= 12.0


class TestMetricOracles:
    def test_hausdorff_brute_force_exact(self):
        rng = np.random.default_rng(2024)
        mismatches = 0
        for _ in range(100):
            na, nb = rng.integers(1, 201, size=2)
            pa = {tuple(p) for p in rng.integers(0, 64, size=(int(na), 2))}
            pb = {tuple(p) for p in rng.integers(0, 64, size=(int(nb), 2))}

            def img(points):
                a = np.full((64, 64), 255, np.uint8)
                for r, c in points:
                    a[r, c] = 0
                return a

            got = simpanel.hausdorff(img(pa), img(pb))
            expected = max(
                max(min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in pb) for p in pa),
                max(min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in pa) for p in pb),
            )
            mismatches += got != expected
        _verdict("metric oracle: hausdorff", mismatches == 0, f"{mismatches} mismatches / 100")
        assert mismatches == 0

    def test_mse_wd_ergas_match_independent_oracles(self):
        rng = np.random.default_rng(77)
        worst = 0.0
        for _ in range(25):
            a = rng.integers(0, 256, size=(37, 41)).astype(np.uint8)
            b = rng.integers(0, 256, size=(37, 41)).astype(np.uint8)
            diffs = [(float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())]
            rng.shuffle(diffs)
            mse_oracle = math.fsum(diffs) / len(diffs)
            worst = max(worst, abs(simpanel.mse(a, b) - mse_oracle) / mse_oracle)
            sa = sorted(map(float, a.ravel()))
            sb = sorted(map(float, b.ravel()))
            wd_oracle = math.fsum(abs(x - y) for x, y in zip(sa, sb)) / len(sa)
            if wd_oracle:
                worst = max(worst, abs(simpanel.wasserstein(a, b) - wd_oracle) / wd_oracle)
            mean_ref = math.fsum(map(float, a.ravel())) / a.size
            ergas_oracle = 100.0 * math.sqrt(mse_oracle) / mean_ref
            worst = max(worst, abs(simpanel.ergas(a, b) - ergas_oracle) / ergas_oracle)
        _verdict("metric oracle: mse/wd/ergas", worst <= 1e-6, f"worst rel err {worst:.2e}")
        assert worst <= 1e-6

    def test_nmi_bounds_on_1000_pairs(self):
        rng = np.random.default_rng(99)
        lo, hi = np.inf, -np.inf
        for _ in range(1000):
            a = rng.integers(0, 256, size=(24, 24)).astype(np.uint8)
            if rng.random() < 0.3:
                b = np.clip(a.astype(int) + rng.integers(-20, 21, size=a.shape), 0, 255).astype(np.uint8)
            else:
                b = rng.integers(0, 256, size=(24, 24)).astype(np.uint8)
            v = simpanel.nmi(a, b)
            lo = min(lo, v)
            hi = max(hi, v)
        ok = lo >= 1.0 - 1e-9 and hi <= 2.0 + 1e-9
        _verdict("metric oracle: nmi bounds", ok, f"range [{lo:.6f}, {hi:.6f}]")
        assert ok


class TestVoteSelfIdentification:
    def test_all_items_all_options(self):
        items = generate_battery(0, 12)
        hits = 0
        total = 0
        for item in items:
            case = render_case(item)
            for k, tile in enumerate(case.option_cells):
                total += 1
                hits += vote(tile.copy(), case.option_cells).choice == k
        _verdict("vote self-identification", hits == total, f"{hits}/{total}")
        assert hits == total == 96


class TestHomographyRecovery:
    @staticmethod
    def _true_h(rng):
        rot = rng.uniform(-0.02, 0.02)
        c, s = np.cos(rot), np.sin(rot)
        return Homography.from_matrix(
            np.array(
                [
                    [c, -s, rng.uniform(-6, 6)],
                    [s, c, rng.uniform(-6, 6)],
                    [rng.uniform(-2e-5, 2e-5), rng.uniform(-2e-5, 2e-5), 1.0],
                ]
            )
        )

    def test_recovery_rate_and_exact_cases(self):
        corners = np.array([[0, 0], [511, 0], [0, 511], [511, 511]], dtype=float)
        successes = 0
        for seed in range(200):
            rng = np.random.default_rng(50_000 + seed)
            truth = self._true_h(rng)
            src = rng.uniform(10, 500, size=(60, 2))
            dst = truth.apply(src)
            outliers = rng.permutation(60)[:18]  # 30%
            dst[outliers] = rng.uniform(0, 512, size=(18, 2))
            try:
                h, _ = ransac_homography(src, dst, reproj_threshold=2.0, seed=seed)
            except DegenerateModelError:
                continue
            err = np.linalg.norm(h.apply(corners) - truth.apply(corners), axis=1).max()
            successes += err < 0.5
        rate_ok = successes >= 190

        rng = np.random.default_rng(1)
        pts = rng.uniform(10, 500, size=(10, 2))
        h_id, _ = ransac_homography(pts, pts, seed=0)
        identity_ok = np.abs(h_id.matrix - np.eye(3)).max() < 1e-6
        shifted = pts + np.array([5.0, -3.0])
        h_tr, _ = ransac_homography(pts, shifted, seed=0)
        expected = np.array([[1, 0, 5], [0, 1, -3], [0, 0, 1]], dtype=float)
        translation_ok = np.abs(h_tr.matrix - expected).max() < 1e-6

        ok = rate_ok and identity_ok and translation_ok
        _verdict(
            "homography recovery",
            ok,
            f"{successes}/200 fixtures, identity exact: {identity_ok}, translation exact: {translation_ok}",
        )
        assert successes >= 190
        assert identity_ok and translation_ok


class TestPsychometricCalibration:
    def test_coverage_and_closed_forms(self):
        params = psychfit.PsychParams(4.5, 1.2, 0.02)
        truth_x = psychfit.threshold_for(params, 0.5)
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(7_000 + seed)
            blocks = [
                psychfit.TrialBlock(float(x), int(rng.binomial(50, psychfit.psi(float(x), params))), 50)
                for x in range(1, 13)
            ]
            post = psychfit.fit(blocks)
            lo, hi, _ = psychfit.threshold_interval(post)
            hits += lo <= truth_x <= hi
        coverage_ok = hits >= 90

        analytic = psychfit.psi(4.0, psychfit.PsychParams(4.0, 1.5, 0.0))
        point_ok = abs(analytic - 0.5625) <= 1e-12
        p = psychfit.PsychParams(5.0, 2.0, 0.0)
        inv_ok = abs(psychfit.threshold_for(p, 0.5) - (5.0 + 2.0 * math.log(4.0 / 3.0))) <= 1e-9

        ok = coverage_ok and point_ok and inv_ok
        _verdict(
            "psychometric calibration",
            ok,
            f"coverage {hits}/100, psi(m)={float(analytic)}, inversion ok: {inv_ok}",
        )
        assert coverage_ok
        assert point_ok
        assert inv_ok


class TestStatisticsOracles:
    def test_all_fixtures(self):
        by_none, _ = errstats.fdr_by([0.01, 0.02, 0.5], alpha=0.05)
        by_one, _ = errstats.fdr_by([0.001, 0.02, 0.5], alpha=0.05)
        by_ok = by_none.sum() == 0 and by_one.tolist() == [True, False, False]

        u, p_exact = errstats.mann_whitney_u([1.0, 2.0], [3.0, 4.0])
        mwu_ok = u == 0.0 and abs(p_exact - 1 / 3) < 1e-12

        uniform = errstats.chi2_contingency([[10, 10], [10, 10]])
        skewed = errstats.chi2_contingency([[20, 10], [10, 20]])
        chi_ok = (
            uniform.chi2 == 0.0
            and uniform.p == 1.0
            and abs(skewed.chi2 - 20 / 3) < 1e-9
            and skewed.dof == 1
        )

        z, p = errstats.ztest_two_proportions(40, 100, 60, 100)
        z_ok = abs(p - 0.0047) <= 2e-4

        ok = by_ok and mwu_ok and chi_ok and z_ok
        _verdict(
            "statistics oracles",
            ok,
            f"BY {by_ok}, MWU p={p_exact:.4f}, chi2={skewed.chi2:.4f}, z-test p={p:.5f}",
        )
        assert by_ok
        assert mwu_ok
        assert chi_ok
        assert z_ok


class TestDeterminism:
    def test_byte_identical_across_runs_and_workers(self, tmp_path):
        config_text = (
            "[run]\nseed = 0\nitems = 4\nsubstrate = \"lattice\"\nreps = 3\n"
        )
        cfg_path = tmp_path / "config.toml"
        cfg_path.write_text(config_text)
        config, raw = load_config(cfg_path)
        outs = {}
        for name, workers in (("w1a", 1), ("w1b", 1), ("w8a", 8), ("w8b", 8)):
            cmd_evaluate(config, tmp_path / name, workers=workers, config_bytes=raw)
            outs[name] = tmp_path / name
        files = [
            "votes.csv", "reps.csv", "trials.csv", "posterior.json",
            "report.json", "config.toml", "images/manifest.json",
        ]
        identical = True
        for f in files:
            ref = (outs["w1a"] / f).read_bytes()
            for other in ("w1b", "w8a", "w8b"):
                if (outs[other] / f).read_bytes() != ref:
                    identical = False
        _verdict("determinism", identical, f"{len(files)} files x 4 runs (1 and 8 workers)")
        assert identical
