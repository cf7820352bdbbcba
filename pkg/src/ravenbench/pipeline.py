"""End-to-end orchestration: generate, in-paint, score, fit, compare.

A run directory is fully reproducible from its config: the battery
manifest, per-option vote panels, per-repetition outcomes, trial counts,
posterior summary and report are all deterministic byte-for-byte given
the config bytes, independent of the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ravenbench import __version__, errstats, psychfit
from ravenbench.inpaint import (
    ExternalProtocolError,
    InpaintRequest,
    LatticeConfig,
    LocalFillConfig,
    inpaint_lattice,
    inpaint_local,
    inpaint_oracle,
    run_external,
)
from ravenbench.matrixgen import (
    MatrixItem,
    generate_battery,
    paste_tile,
    render_case,
    write_battery,
)
from ravenbench.pngio import save_gray
from ravenbench.psychfit import (
    CaseScorer,
    GridConfig,
    InsufficientDataError,
    PerturbSchedule,
    ScoringConfig,
    TrialBlock,
    fit,
    run_case_repetitions,
    threshold_interval,
)
from ravenbench.register import RegistrationConfig

SUBSTRATES = ("local", "lattice", "oracle", "external")


class ConfigError(ValueError):
    """Run configuration is invalid; nothing has been executed."""


class StageError(RuntimeError):
    """A pipeline stage failed; partial outputs are retained."""


class BatteryMismatchError(ValueError):
    """Two runs were produced from different batteries."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_items: int = 12
    substrate: str = "lattice"
    reps: int = 50
    rep_seed: int = 1234
    external_command: tuple[str, ...] = ()
    external_timeout: float = 600.0
    gaussian_sigma: tuple[float, float] = (2.0, 20.0)
    brightness_delta: tuple[float, float] = (-40.0, 40.0)
    corner_threshold: int = 20
    max_corners: int = 250
    match_max_distance: int = 64
    ransac_threshold: float = 2.0
    ransac_iters: int = 120
    ransac_seed: int = 11
    min_inliers: int = 8
    max_displacement: float = 40.0
    nmi_bins: int = 64
    ergas_ratio: float = 1.0
    local_iterations: int = 400
    local_kernel_radius: int = 1
    lattice_min_pitch: int = 64
    lattice_min_strength: float = 0.1
    psych_grid_m: tuple[float, float, int] = (0.5, 12.5, 121)
    psych_grid_s: tuple[float, float, int] = (0.1, 12.0, 61)
    psych_grid_lapse: tuple[float, float, int] = (0.0, 0.1, 21)
    threshold_performance: float = 0.5
    ci_level: float = 0.95
    alpha: float = 0.05
    out_dir: str = ""

    def __post_init__(self):
        if self.substrate not in SUBSTRATES:
            raise ConfigError(f"substrate must be one of {SUBSTRATES}")
        if self.n_items < 1:
            raise ConfigError("n_items must be >= 1")
        if self.reps < 0:
            raise ConfigError("reps must be >= 0")
        if self.substrate == "external" and not self.external_command:
            raise ConfigError("external substrate needs external_command")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")

    def registration(self) -> RegistrationConfig:
        return RegistrationConfig(
            corner_threshold=self.corner_threshold,
            max_corners=self.max_corners,
            match_max_distance=self.match_max_distance,
            ransac_threshold=self.ransac_threshold,
            ransac_iters=self.ransac_iters,
            ransac_seed=self.ransac_seed,
            min_inliers=self.min_inliers,
            max_displacement=self.max_displacement,
        )

    def scoring(self) -> ScoringConfig:
        return ScoringConfig(
            register=self.registration(),
            nmi_bins=self.nmi_bins,
            ergas_ratio=self.ergas_ratio,
        )

    def schedule(self) -> PerturbSchedule:
        return PerturbSchedule(
            gaussian_sigma=self.gaussian_sigma, brightness_delta=self.brightness_delta
        )

    def psych_grid(self) -> GridConfig:
        return GridConfig(
            m=self.psych_grid_m, s=self.psych_grid_s, lapse=self.psych_grid_lapse
        )


_TOML_SCHEMA = {
    "run": {
        "seed": "seed",
        "items": "n_items",
        "substrate": "substrate",
        "reps": "reps",
        "rep_seed": "rep_seed",
        "external_command": "external_command",
        "external_timeout": "external_timeout",
        "out": "out_dir",
    },
    "perturb": {
        "gaussian_sigma": "gaussian_sigma",
        "brightness_delta": "brightness_delta",
    },
    "register": {
        "corner_threshold": "corner_threshold",
        "max_corners": "max_corners",
        "match_max_distance": "match_max_distance",
        "ransac_threshold": "ransac_threshold",
        "ransac_iters": "ransac_iters",
        "ransac_seed": "ransac_seed",
        "min_inliers": "min_inliers",
        "max_displacement": "max_displacement",
    },
    "metrics": {"nmi_bins": "nmi_bins", "ergas_ratio": "ergas_ratio"},
    "inpaint": {
        "local_iterations": "local_iterations",
        "local_kernel_radius": "local_kernel_radius",
        "lattice_min_pitch": "lattice_min_pitch",
        "lattice_min_strength": "lattice_min_strength",
    },
    "psych": {
        "grid_m": "psych_grid_m",
        "grid_s": "psych_grid_s",
        "grid_lapse": "psych_grid_lapse",
        "threshold_performance": "threshold_performance",
        "ci_level": "ci_level",
    },
    "stats": {"alpha": "alpha"},
}

_TUPLE_FIELDS = {
    "external_command",
    "gaussian_sigma",
    "brightness_delta",
    "psych_grid_m",
    "psych_grid_s",
    "psych_grid_lapse",
}


def load_config(path) -> tuple[RunConfig, bytes]:
    """Parse and validate a TOML run config; returns it with the raw bytes."""
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:
        import tomli as tomllib
    raw = Path(path).read_bytes()
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except Exception as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    kwargs = {}
    for section, entries in data.items():
        if section not in _TOML_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(entries, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in entries.items():
            if key not in _TOML_SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            name = _TOML_SCHEMA[section][key]
            if name in _TUPLE_FIELDS:
                value = tuple(value)
            kwargs[name] = value
    try:
        return RunConfig(**kwargs), raw
    except (TypeError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_toml(config: RunConfig) -> str:
    """Deterministic TOML dump used when no source file is available."""
    lines = []
    for section, entries in _TOML_SCHEMA.items():
        body = []
        for key, name in entries.items():
            value = getattr(config, name)
            if name == "out_dir" and not value:
                continue
            if isinstance(value, tuple):
                rendered = "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
            else:
                rendered = _toml_scalar(value)
            body.append(f"{key} = {rendered}")
        if body:
            lines.append(f"[{section}]")
            lines.extend(body)
            lines.append("")
    return "\n".join(lines)


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


# ---------------------------------------------------------------------------
# evaluation engine


@dataclass
class ItemRecord:
    item_index: int
    difficulty_rank: int
    answer_index: int
    clean_vote: object  # simpanel.VoteRecord
    clean_fallbacks: int
    outcomes: list  # psychfit.RepOutcome


@dataclass
class RunReport:
    config: RunConfig
    out_dir: Path
    items: list[MatrixItem]
    records: list[ItemRecord]
    trial_blocks: list[TrialBlock]
    posterior: object | None
    threshold: tuple[float, float, float] | None
    posterior_note: str
    manifest_sha256: str

    @property
    def score(self) -> int:
        return sum(r.clean_vote.choice == r.answer_index for r in self.records)

    @property
    def score_line(self) -> str:
        return f"{self.score} / {len(self.records)}"


def _make_substrate(config: RunConfig, case, item: MatrixItem):
    if config.substrate == "local":
        cfg = LocalFillConfig(config.local_iterations, config.local_kernel_radius)
        return lambda req: inpaint_local(req, cfg)
    if config.substrate == "lattice":
        cfg = LatticeConfig(
            min_pitch=config.lattice_min_pitch,
            min_strength=config.lattice_min_strength,
            local=LocalFillConfig(config.local_iterations, config.local_kernel_radius),
        )
        return lambda req: inpaint_lattice(req, cfg)
    if config.substrate == "oracle":
        truth = paste_tile(case.image, case.cell_geometry, case.option_cells[item.answer_index])
        return lambda req: inpaint_oracle(req, truth)
    raise ConfigError(f"substrate {config.substrate} has no in-process implementation")


def _item_rep_seed(config: RunConfig, item_index: int) -> int:
    return int(
        np.random.SeedSequence(entropy=config.rep_seed, spawn_key=(item_index,)).generate_state(1)[0]
    )


def _evaluate_item_task(payload) -> ItemRecord:
    config, item, item_index = payload
    try:
        case = render_case(item)
        scorer = CaseScorer(case, config.scoring())
        substrate = _make_substrate(config, case, item)
        clean = substrate(InpaintRequest(case.image, case.mask))
        clean_vote, clean_fallbacks = scorer.score(clean.image)
        outcomes = run_case_repetitions(
            case,
            item,
            substrate,
            n=config.reps,
            seed=_item_rep_seed(config, item_index),
            schedule=config.schedule(),
            scoring=config.scoring(),
            scorer=scorer,
        )
    except Exception as exc:
        raise StageError(f"item {item_index} ({item.id}): {exc}") from exc
    return ItemRecord(
        item_index, item.difficulty_rank, item.answer_index, clean_vote, clean_fallbacks, outcomes
    )


def _evaluate_builtin(config: RunConfig, items, workers: int) -> list[ItemRecord]:
    payloads = [(config, item, i) for i, item in enumerate(items)]
    if workers <= 1:
        return [_evaluate_item_task(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_evaluate_item_task, payloads))


def _evaluate_external(config: RunConfig, items, out_dir: Path) -> list[ItemRecord]:
    """Rep-major evaluation through the directory protocol."""
    cases = [render_case(item) for item in items]
    scorers = [CaseScorer(case, config.scoring()) for case in cases]
    schedule = config.schedule()
    seeds = [_item_rep_seed(config, i) for i in range(len(items))]
    records = [
        ItemRecord(i, item.difficulty_rank, item.answer_index, None, 0, [])
        for i, item in enumerate(items)
    ]
    ext_root = out_dir / "external"
    for rep in range(-1, config.reps):  # rep -1 is the clean pass
        label = "clean" if rep < 0 else f"rep_{rep:03d}"
        rep_dir = ext_root / label
        rep_dir.mkdir(parents=True, exist_ok=True)
        perturbed_images = []
        for i, case in enumerate(cases):
            if rep < 0:
                image = case.image
                meta = ("clean", 0.0)
            else:
                kind, magnitude, noise_seed = schedule.rep_perturbation(seeds[i], rep)
                image = psychfit.perturb(case.image, noise_seed, kind, magnitude)
                meta = (kind, magnitude)
            perturbed_images.append((image, meta))
            save_gray(rep_dir / f"item_{i:03d}_image.png", image)
            save_gray(rep_dir / f"item_{i:03d}_mask.png", case.mask.astype(np.uint8) * 255)
        results = run_external(
            rep_dir, list(config.external_command), timeout=config.external_timeout
        )
        for i, result in enumerate(results):
            vote, fallbacks = scorers[i].score(result.image)
            if rep < 0:
                records[i].clean_vote = vote
                records[i].clean_fallbacks = fallbacks
            else:
                kind, magnitude = perturbed_images[i][1]
                records[i].outcomes.append(
                    psychfit.RepOutcome(
                        rep=rep,
                        kind=kind,
                        magnitude=magnitude,
                        choice=vote.choice,
                        correct=vote.choice == items[i].answer_index,
                        fallbacks=fallbacks,
                    )
                )
    return records


def cmd_evaluate(
    config: RunConfig, out_dir, workers: int = 1, config_bytes: bytes | None = None
) -> RunReport:
    """Run the full pipeline and persist every artifact under out_dir.

    Prints the total-score line.  On stage failure a FAILED marker naming
    the stage and item context is left next to whatever was produced.
    """
    if config.substrate == "external":
        head = config.external_command[0]
        if shutil.which(head) is None and not Path(head).exists():
            raise ConfigError(f"external command not resolvable: {head}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config_bytes is None:
        config_bytes = config_to_toml(config).encode()
    (out / "config.toml").write_bytes(config_bytes)
    stage = "generate"
    try:
        items = generate_battery(config.seed, config.n_items)
        manifest_path = write_battery(items, out / "images", config.seed)
        manifest_sha = hashlib.sha256(manifest_path.read_bytes()).hexdigest()

        stage = "evaluate"
        if config.substrate == "external":
            records = _evaluate_external(config, items, out)
        else:
            records = _evaluate_builtin(config, items, workers)
        records.sort(key=lambda r: r.item_index)

        stage = "persist"
        _write_votes_csv(out / "votes.csv", records)
        _write_reps_csv(out / "reps.csv", records)
        blocks = [
            TrialBlock(float(r.difficulty_rank), sum(o.correct for o in r.outcomes), config.reps)
            for r in records
        ]
        _write_trials_csv(out / "trials.csv", blocks)

        stage = "psychfit"
        posterior = None
        threshold = None
        note = ""
        if config.reps > 0:
            try:
                posterior = fit(blocks, grid=config.psych_grid())
                threshold = threshold_interval(
                    posterior, config.threshold_performance, config.ci_level
                )
            except InsufficientDataError as exc:
                note = f"psychometric fit skipped: {exc}"
        else:
            note = "psychometric fit skipped: reps = 0"
        _write_posterior_json(out / "posterior.json", posterior, threshold, note, config)

        stage = "report"
        report = RunReport(
            config, out, items, records, blocks, posterior, threshold, note, manifest_sha
        )
        _write_report_json(out / "report.json", report, config_bytes)
    except ExternalProtocolError as exc:
        (out / "FAILED").write_text(f"stage {stage}: {exc}\n")
        raise
    except Exception as exc:
        (out / "FAILED").write_text(f"stage {stage}: {exc}\n")
        raise StageError(f"stage {stage} failed: {exc}") from exc
    print(report.score_line)
    return report


def _write_votes_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "item", "option", "hd", "mse", "wd", "ergas", "nmi",
                "winner_hd", "winner_mse", "winner_wd", "winner_ergas", "winner_nmi",
                "choice", "tiebreak",
            ]
        )
        for r in records:
            vote = r.clean_vote
            for k, panel in enumerate(vote.panels):
                flags = [int(vote.winners[m] == k) for m in range(5)]
                writer.writerow(
                    [r.item_index, k]
                    + [repr(v) for v in panel.values()]
                    + flags
                    + [vote.choice, vote.tiebreak]
                )


def _write_reps_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item", "rep", "kind", "magnitude", "choice", "correct", "fallbacks"])
        for r in records:
            for o in r.outcomes:
                writer.writerow(
                    [r.item_index, o.rep, o.kind, repr(o.magnitude), o.choice, int(o.correct), o.fallbacks]
                )


def _write_trials_csv(path: Path, blocks) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_rank", "k", "n"])
        for b in blocks:
            writer.writerow([repr(b.x), b.k, b.n])


def _write_posterior_json(path: Path, posterior, threshold, note: str, config: RunConfig) -> None:
    if posterior is None:
        payload = {"skipped": note or "no posterior"}
    else:
        payload = {
            "map": {
                "threshold_mid": posterior.map_params.threshold_mid,
                "width": posterior.map_params.width,
                "lapse": posterior.map_params.lapse,
                "guess": posterior.map_params.guess,
            },
            "median": posterior.param_median,
            "ci95": {k: list(v) for k, v in posterior.param_ci.items()},
            "threshold": {
                "performance": config.threshold_performance,
                "level": config.ci_level,
                "lo": threshold[0],
                "hi": threshold[1],
                "point": threshold[2],
            },
            "warnings": list(posterior.warnings),
        }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_report_json(path: Path, report: RunReport, config_bytes: bytes) -> None:
    config = report.config
    payload = {
        "schema": "ravenbench-report-v1",
        "substrate": config.substrate,
        "score": report.score,
        "n_items": len(report.records),
        "score_line": report.score_line,
        "per_item": [
            {
                "item": r.item_index,
                "difficulty_rank": r.difficulty_rank,
                "answer_index": r.answer_index,
                "choice": r.clean_vote.choice,
                "correct": r.clean_vote.choice == r.answer_index,
                "tiebreak": r.clean_vote.tiebreak,
                "clean_fallbacks": r.clean_fallbacks,
                "k": sum(o.correct for o in r.outcomes),
                "n": config.reps,
                "rep_fallbacks": sum(o.fallbacks for o in r.outcomes),
            }
            for r in report.records
        ],
        "manifest_sha256": report.manifest_sha256,
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "posterior_note": report.posterior_note,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "ravenbench": __version__,
        },
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# loading persisted runs and comparing them


@dataclass
class LoadedRun:
    path: Path
    report: dict
    manifest: dict
    trials: list[TrialBlock]
    responses: np.ndarray | None  # (reps, items) choices, None when reps = 0
    posterior_summary: dict

    @property
    def answer_key(self) -> list[int]:
        return [entry["answer_index"] for entry in self.manifest["items"]]

    @property
    def clean_choices(self) -> list[int]:
        return [entry["choice"] for entry in self.report["per_item"]]

    @property
    def ranks(self) -> list[int]:
        return [entry["difficulty_rank"] for entry in self.report["per_item"]]


def load_run(run_dir) -> LoadedRun:
    run_dir = Path(run_dir)
    report = json.loads((run_dir / "report.json").read_text())
    manifest = json.loads((run_dir / "images" / "manifest.json").read_text())
    trials = []
    with open(run_dir / "trials.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            trials.append(TrialBlock(float(row["item_rank"]), int(row["k"]), int(row["n"])))
    responses = None
    reps_path = run_dir / "reps.csv"
    if reps_path.exists():
        by_rep: dict[int, dict[int, int]] = {}
        with open(reps_path, newline="") as fh:
            for row in csv.DictReader(fh):
                by_rep.setdefault(int(row["rep"]), {})[int(row["item"])] = int(row["choice"])
        if by_rep:
            n_items = report["n_items"]
            responses = np.array(
                [
                    [by_rep[rep][j] for j in range(n_items)]
                    for rep in sorted(by_rep)
                    if len(by_rep[rep]) == n_items
                ]
            )
    posterior_summary = json.loads((run_dir / "posterior.json").read_text())
    return LoadedRun(run_dir, report, manifest, trials, responses, posterior_summary)


def cmd_compare(run_a_dir, run_b_dir, cohort=None, alpha: float = 0.05) -> dict:
    """Side-by-side psychometrics and error grids for two runs.

    Requires identical battery manifests.  With a cohort table, each run's
    model errors are screened against participant characteristics.
    """
    a = load_run(run_a_dir)
    b = load_run(run_b_dir)
    if a.report["manifest_sha256"] != b.report["manifest_sha256"]:
        raise BatteryMismatchError("runs were produced from different batteries")
    comparison: dict = {
        "schema": "ravenbench-comparison-v1",
        "run_a": {"path": str(a.path), "substrate": a.report["substrate"], "score_line": a.report["score_line"]},
        "run_b": {"path": str(b.path), "substrate": b.report["substrate"], "score_line": b.report["score_line"]},
    }
    thr_a = a.posterior_summary.get("threshold")
    thr_b = b.posterior_summary.get("threshold")
    comparison["thresholds"] = {"run_a": thr_a, "run_b": thr_b}
    if thr_a and thr_b:
        comparison["threshold_intervals_disjoint"] = bool(
            thr_a["hi"] < thr_b["lo"] or thr_b["hi"] < thr_a["lo"]
        )
    if a.responses is not None and b.responses is not None and len(a.responses) and len(b.responses):
        table_a = errstats.ResponseTable(a.responses)
        table_b = errstats.ResponseTable(b.responses)
        grid_a = errstats.build_error_grid(table_a, table_a, a.answer_key)
        grid_b = errstats.build_error_grid(table_b, table_a, a.answer_key)
        tests = errstats.grid_cell_tests(table_a, table_b, alpha=alpha)
        comparison["error_grids"] = {
            "item_order": list(grid_a.item_order),
            "run_a_counts": grid_a.counts.tolist(),
            "run_b_counts": grid_b.counts.tolist(),
            "count_diff": (grid_b.counts - grid_a.counts).tolist(),
        }
        comparison["cell_tests"] = {
            "n_skipped": tests.n_skipped,
            "n_rejected": sum(t.rejected for t in tests.tests),
            "rejected_cells": [
                {"item": t.item, "option": t.option, "z": t.z, "p_adjusted": t.p_adjusted}
                for t in tests.tests
                if t.rejected
            ],
        }
    if cohort is not None:
        overlap = {}
        for name, run in (("run_a", a), ("run_b", b)):
            try:
                report = errstats.model_error_overlap(
                    run.clean_choices, run.answer_key, cohort, alpha=alpha
                )
                overlap[name] = report.to_dict()
            except errstats.NoModelErrorsError:
                overlap[name] = {"skipped": "model made no errors"}
        comparison["model_error_overlap"] = overlap
    return comparison
