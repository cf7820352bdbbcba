"""Psychometric characterisation of a substrate under input perturbation.

Each item is perturbed with alternating Gaussian noise and brightness
shifts, re-in-painted and re-scored; success counts per difficulty rank
feed a dense-grid Bayesian fit of a logistic psychometric function with
the guess rate pinned at 1/8.  Thresholds at a chosen performance level
come with central credible intervals read off the joint posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ravenbench import simpanel
from ravenbench.matrixgen import MatrixItem, RasterCase, paste_tile
from ravenbench.register import (
    Features,
    RegistrationConfig,
    detect_and_describe,
    match,
    ransac_homography,
    warp_region,
    DegenerateModelError,
)

GUESS_RATE = 0.125  # one of eight options
GAUSSIAN_SIGMA_RANGE = (2.0, 20.0)
BRIGHTNESS_DELTA_RANGE = (-40.0, 40.0)
BOUNDARY_WARNING = "threshold_map_in_outer_2_percent_of_grid"


class InsufficientDataError(ValueError):
    """Fewer than three distinct difficulty ranks with trials."""


class UnattainableError(ValueError):
    """Requested performance level outside the psychometric range everywhere."""


@dataclass(frozen=True)
class PsychParams:
    threshold_mid: float  # logistic midpoint, in item-rank units
    width: float  # logistic width, in item-rank units
    lapse: float
    guess: float = GUESS_RATE

    def __post_init__(self):
        if self.guess != GUESS_RATE:
            raise ValueError(f"guess rate is fixed at {GUESS_RATE}")
        if not self.width > 0:
            raise ValueError("width must be positive")
        if not 0.0 <= self.lapse <= 0.1:
            raise ValueError("lapse confined to [0, 0.1]")


@dataclass(frozen=True)
class TrialBlock:
    x: float  # item difficulty rank
    k: int  # successes
    n: int  # trials

    def __post_init__(self):
        if not 0 <= self.k <= self.n:
            raise ValueError("need 0 <= k <= n")


def psi(x, params: PsychParams):
    """Success probability at difficulty x: guess + (1-guess-lapse) * L((m-x)/s).

    Decreasing in x; at x = m with no lapse this is exactly
    0.125 + 0.875/2 = 0.5625.
    """
    t = (params.threshold_mid - np.asarray(x, dtype=np.float64)) / params.width
    return params.guess + (1.0 - params.guess - params.lapse) / (1.0 + np.exp(-t))


def threshold_for(params: PsychParams, performance: float = 0.5) -> float:
    """Closed-form x where psi(x) = performance."""
    span = 1.0 - params.guess - params.lapse
    lvalue = (performance - params.guess) / span
    if not 0.0 < lvalue < 1.0:
        raise UnattainableError(f"performance {performance} outside psi's range")
    return params.threshold_mid - params.width * np.log(lvalue / (1.0 - lvalue))


@dataclass(frozen=True)
class GridConfig:
    m: tuple[float, float, int] = (0.5, 12.5, 121)
    s: tuple[float, float, int] = (0.1, 12.0, 61)
    lapse: tuple[float, float, int] = (0.0, 0.1, 21)

    def axes(self):
        return (
            np.linspace(*self.m),
            np.linspace(*self.s),
            np.linspace(*self.lapse),
        )


@dataclass(frozen=True)
class Priors:
    """Uniform over the m and s grids; Beta density on the lapse."""

    lapse_beta: tuple[float, float] = (1.5, 12.0)


@dataclass
class PsychPosterior:
    m_grid: np.ndarray
    s_grid: np.ndarray
    lapse_grid: np.ndarray
    mass: np.ndarray  # (M, S, L), sums to 1
    map_params: PsychParams
    param_median: dict
    param_ci: dict  # central 95% per parameter
    warnings: tuple[str, ...]


def _weighted_quantile(values: np.ndarray, weights: np.ndarray, q: float) -> float:
    order = np.argsort(values, kind="stable")
    v = values[order]
    cw = np.cumsum(weights[order])
    idx = int(np.searchsorted(cw, q * cw[-1], side="left"))
    return float(v[min(idx, len(v) - 1)])


def fit(trials, priors: Priors = Priors(), grid: GridConfig = GridConfig()) -> PsychPosterior:
    """Dense-grid posterior over (midpoint, width, lapse) with fixed guess.

    Likelihood is the product of per-rank binomials at psi(x); the
    normalised mass, MAP node, marginal medians and central 95% intervals
    are all read off the grid.  A MAP midpoint in the outer 2% of its grid
    raises no error but appends a boundary warning.
    """
    blocks = [t if isinstance(t, TrialBlock) else TrialBlock(*t) for t in trials]
    xs = sorted({b.x for b in blocks if b.n > 0})
    if len(xs) < 3:
        raise InsufficientDataError(f"need >= 3 distinct ranks with trials, got {len(xs)}")
    m_grid, s_grid, l_grid = grid.axes()
    m = m_grid[:, None, None]
    s = s_grid[None, :, None]
    lap = l_grid[None, None, :]
    log_post = np.zeros((m_grid.size, s_grid.size, l_grid.size))
    for b in blocks:
        if b.n == 0:
            continue
        p = GUESS_RATE + (1.0 - GUESS_RATE - lap) / (1.0 + np.exp(-(m - b.x) / s))
        p = np.clip(p, 1e-12, 1.0 - 1e-12)
        log_post += b.k * np.log(p) + (b.n - b.k) * np.log1p(-p)
    a, bb = priors.lapse_beta
    with np.errstate(divide="ignore"):
        lapse_prior = (a - 1.0) * np.log(lap) + (bb - 1.0) * np.log1p(-lap)
    log_post += lapse_prior
    log_post -= log_post.max()
    mass = np.exp(log_post)
    mass /= mass.sum()

    flat_map = int(np.argmax(mass))
    mi, si, li = np.unravel_index(flat_map, mass.shape)
    map_params = PsychParams(float(m_grid[mi]), float(s_grid[si]), float(l_grid[li]))
    warnings = []
    m_span = m_grid[-1] - m_grid[0]
    if m_grid[mi] <= m_grid[0] + 0.02 * m_span or m_grid[mi] >= m_grid[-1] - 0.02 * m_span:
        warnings.append(BOUNDARY_WARNING)

    names = ("threshold_mid", "width", "lapse")
    grids = (m_grid, s_grid, l_grid)
    marginals = (mass.sum(axis=(1, 2)), mass.sum(axis=(0, 2)), mass.sum(axis=(0, 1)))
    median = {}
    ci = {}
    for name, g, marg in zip(names, grids, marginals):
        median[name] = _weighted_quantile(g, marg, 0.5)
        ci[name] = (
            _weighted_quantile(g, marg, 0.025),
            _weighted_quantile(g, marg, 0.975),
        )
    return PsychPosterior(
        m_grid, s_grid, l_grid, mass, map_params, median, ci, tuple(warnings)
    )


def threshold_interval(
    post: PsychPosterior, performance: float = 0.5, level: float = 0.95
) -> tuple[float, float, float]:
    """(lo, hi, point): central credible interval and posterior median of the
    difficulty rank where psi crosses `performance`.

    Solved in closed form per grid node and weighted by posterior mass;
    nodes whose psychometric range cannot reach the level are excluded,
    and if none can, UnattainableError is raised.
    """
    if not performance > GUESS_RATE:
        raise UnattainableError(f"performance {performance} at or below the guess floor")
    lap = post.lapse_grid[None, None, :]
    m = post.m_grid[:, None, None]
    s = post.s_grid[None, :, None]
    span = 1.0 - GUESS_RATE - lap
    lvalue = (performance - GUESS_RATE) / span
    attainable = (lvalue > 0.0) & (lvalue < 1.0)
    attainable = np.broadcast_to(attainable, post.mass.shape)
    weights = np.where(attainable, post.mass, 0.0).ravel()
    total = weights.sum()
    if total <= 0.0:
        raise UnattainableError(f"performance {performance} unattainable on the whole grid")
    with np.errstate(divide="ignore", invalid="ignore"):
        x = m - s * np.log(lvalue / (1.0 - lvalue))
    x = np.broadcast_to(x, post.mass.shape).ravel()
    good = np.isfinite(x) & (weights > 0)
    xs = x[good]
    ws = weights[good]
    alpha = (1.0 - level) / 2.0
    return (
        _weighted_quantile(xs, ws, alpha),
        _weighted_quantile(xs, ws, 1.0 - alpha),
        _weighted_quantile(xs, ws, 0.5),
    )


# ---------------------------------------------------------------------------
# perturbation and repetition running


def perturb(image, seed: int, kind: str, magnitude: float) -> np.ndarray:
    """Seeded Gaussian-noise or brightness perturbation, clipped to [0, 255]."""
    img = np.asarray(image)
    if kind == "gaussian":
        lo, hi = GAUSSIAN_SIGMA_RANGE
        if not lo <= magnitude <= hi:
            raise ValueError(f"gaussian sigma {magnitude} outside {GAUSSIAN_SIGMA_RANGE}")
        rng = np.random.default_rng(seed)
        noisy = img.astype(np.float64) + rng.normal(0.0, magnitude, img.shape)
        return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    if kind == "brightness":
        lo, hi = BRIGHTNESS_DELTA_RANGE
        if not lo <= magnitude <= hi:
            raise ValueError(f"brightness delta {magnitude} outside {BRIGHTNESS_DELTA_RANGE}")
        shifted = img.astype(np.float64) + magnitude
        return np.clip(np.rint(shifted), 0, 255).astype(np.uint8)
    raise ValueError(f"unknown perturbation kind {kind!r}")


@dataclass(frozen=True)
class PerturbSchedule:
    """Alternating gaussian/brightness reps with per-rep seeded magnitudes."""

    gaussian_sigma: tuple[float, float] = GAUSSIAN_SIGMA_RANGE
    brightness_delta: tuple[float, float] = BRIGHTNESS_DELTA_RANGE

    def rep_perturbation(self, seed: int, rep: int) -> tuple[str, float, int]:
        """(kind, magnitude, perturb_seed) for one repetition."""
        child = np.random.SeedSequence(entropy=seed, spawn_key=(rep,))
        s_mag, s_noise = (int(v) for v in child.generate_state(2, dtype=np.uint64))
        rng = np.random.default_rng(s_mag)
        if rep % 2 == 0:
            kind = "gaussian"
            magnitude = float(rng.uniform(*self.gaussian_sigma))
        else:
            kind = "brightness"
            magnitude = float(rng.uniform(*self.brightness_delta))
        return kind, magnitude, s_noise


@dataclass(frozen=True)
class ScoringConfig:
    register: RegistrationConfig = field(default_factory=RegistrationConfig)
    nmi_bins: int = 64
    ergas_ratio: float = 1.0


class CaseScorer:
    """Registers an in-painted image to all eight candidates and votes.

    Candidate images (matrix completed by each option) and their corner
    features are computed once per item and reused across repetitions.
    """

    def __init__(self, case: RasterCase, cfg: ScoringConfig = ScoringConfig()):
        self.cfg = cfg
        self.case = case
        g = case.cell_geometry
        y0, x0, size = g.cell_rect(2, 2)
        self.region = (y0, x0, size, size)
        self.candidates = [paste_tile(case.image, g, t) for t in case.option_cells]
        self.candidate_features = [
            detect_and_describe(c, cfg.register) for c in self.candidates
        ]
        self.prepared_options = [
            simpanel.prepare_image(t, cfg.nmi_bins) for t in case.option_cells
        ]

    def _aligned_crop(self, inpainted: np.ndarray, feats: Features, k: int):
        cfg = self.cfg.register
        y0, x0, hgt, wdt = self.region
        cand_feats = self.candidate_features[k]
        if len(feats.points) >= 4 and len(cand_feats.points) >= 4:
            pairs = match(
                feats.descriptors, cand_feats.descriptors, max_distance=cfg.match_max_distance
            )
            if len(pairs) >= max(4, cfg.min_inliers):
                src = feats.points[[p[0] for p in pairs]]
                dst = cand_feats.points[[p[1] for p in pairs]]
                try:
                    h, _ = ransac_homography(
                        src,
                        dst,
                        reproj_threshold=cfg.ransac_threshold,
                        max_iters=cfg.ransac_iters,
                        seed=cfg.ransac_seed,
                        min_inliers=cfg.min_inliers,
                    )
                except DegenerateModelError:
                    pass
                else:
                    corners = np.array(
                        [
                            [x0, y0],
                            [x0 + wdt - 1, y0],
                            [x0, y0 + hgt - 1],
                            [x0 + wdt - 1, y0 + hgt - 1],
                        ],
                        dtype=float,
                    )
                    moved = np.linalg.norm(h.apply(corners) - corners, axis=1).max()
                    if moved <= cfg.max_displacement:
                        return warp_region(inpainted, h, self.region), "registered"
        return inpainted[y0 : y0 + hgt, x0 : x0 + wdt], "identity_fallback"

    def score(self, inpainted: np.ndarray) -> tuple[simpanel.VoteRecord, int]:
        """Vote record for one in-painted image, plus the identity-fallback count."""
        feats = detect_and_describe(inpainted, self.cfg.register)
        panels = []
        fallbacks = 0
        for k in range(8):
            crop, flag = self._aligned_crop(inpainted, feats, k)
            fallbacks += flag == "identity_fallback"
            panels.append(
                simpanel.panel_from_prepared(
                    simpanel.prepare_image(crop, self.cfg.nmi_bins),
                    self.prepared_options[k],
                    ergas_ratio=self.cfg.ergas_ratio,
                )
            )
        record = simpanel.vote_from_panels(panels)
        return record, fallbacks


@dataclass(frozen=True)
class RepOutcome:
    rep: int
    kind: str
    magnitude: float
    choice: int
    correct: bool
    fallbacks: int


def run_case_repetitions(
    case: RasterCase,
    item: MatrixItem,
    substrate,
    n: int = 50,
    seed: int = 0,
    schedule: PerturbSchedule = PerturbSchedule(),
    scoring: ScoringConfig = ScoringConfig(),
    scorer: CaseScorer | None = None,
) -> list[RepOutcome]:
    """Detailed per-repetition outcomes: perturb -> in-paint -> register -> vote."""
    from ravenbench.inpaint import InpaintRequest

    if scorer is None:
        scorer = CaseScorer(case, scoring)
    outcomes = []
    for rep in range(n):
        kind, magnitude, noise_seed = schedule.rep_perturbation(seed, rep)
        perturbed = perturb(case.image, noise_seed, kind, magnitude)
        result = substrate(InpaintRequest(perturbed, case.mask))
        record, fallbacks = scorer.score(result.image)
        outcomes.append(
            RepOutcome(
                rep=rep,
                kind=kind,
                magnitude=magnitude,
                choice=record.choice,
                correct=record.choice == item.answer_index,
                fallbacks=fallbacks,
            )
        )
    return outcomes


def run_repetitions(
    case: RasterCase,
    item: MatrixItem,
    substrate,
    n: int = 50,
    seed: int = 0,
    schedule: PerturbSchedule = PerturbSchedule(),
    scoring: ScoringConfig = ScoringConfig(),
) -> TrialBlock:
    """Success count over n seeded perturbed repetitions of one item."""
    outcomes = run_case_repetitions(case, item, substrate, n, seed, schedule, scoring)
    return TrialBlock(x=float(item.difficulty_rank), k=sum(o.correct for o in outcomes), n=n)


def trialblocks_from_responses(responses, ranks, answer_key) -> list[TrialBlock]:
    """Aggregate per-row option choices into per-rank success counts.

    `responses` is (rows, items) of chosen option indices; rows are
    participants or perturbed repetitions.
    """
    responses = np.asarray(responses)
    ranks = list(ranks)
    answer_key = list(answer_key)
    if responses.shape[1] != len(ranks) or len(ranks) != len(answer_key):
        raise ValueError("responses, ranks and answer key disagree on item count")
    blocks = []
    for j, (rank, ans) in enumerate(zip(ranks, answer_key)):
        k = int((responses[:, j] == ans).sum())
        blocks.append(TrialBlock(x=float(rank), k=k, n=int(responses.shape[0])))
    return blocks
