"""Difficulty-ordered response grids and error-pattern statistics.

Response tables are arranged into 12x8 grids ordered by the reference
group's success rate (rows) and selection frequency (columns), per-cell
proportion differences are z-tested with Benjamini-Yekutieli FDR control,
and model-error overlap with cohort characteristics is screened with
chi-squared and Mann-Whitney tests under the same correction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.special import gammaincc

N_OPTIONS = 8


class ItemMismatchError(ValueError):
    """Two response tables disagree on the item set."""


class ZeroMarginError(ValueError):
    """A contingency table row or column sums to zero."""


class NoModelErrorsError(ValueError):
    """The model answered every item correctly; the overlap split is undefined."""


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _two_sided_p(z: float) -> float:
    return min(1.0, 2.0 * _normal_sf(abs(z)))


@dataclass(frozen=True)
class ResponseTable:
    """Complete per-row option choices plus optional covariates.

    Rows are participants (or perturbed model repetitions); every response
    is an option index in 0..7.  Rows with incomplete responses are not
    representable, matching the exclusion of incomplete error data.
    """

    responses: np.ndarray  # (rows, items) int
    group: tuple[str, ...] = ()
    covariates: dict = field(default_factory=dict)
    participant_ids: tuple[str, ...] = ()

    def __post_init__(self):
        responses = np.asarray(self.responses, dtype=np.int64)
        object.__setattr__(self, "responses", responses)
        if responses.ndim != 2:
            raise ValueError("responses must be (rows, items)")
        if responses.size and (responses.min() < 0 or responses.max() >= N_OPTIONS):
            raise ValueError("responses must be option indices 0..7")
        if self.group and len(self.group) != responses.shape[0]:
            raise ValueError("group labels must cover every row")

    @property
    def n_rows(self) -> int:
        return self.responses.shape[0]

    @property
    def n_items(self) -> int:
        return self.responses.shape[1]

    def subset(self, row_mask) -> "ResponseTable":
        row_mask = np.asarray(row_mask, dtype=bool)
        return ResponseTable(
            self.responses[row_mask],
            tuple(g for g, m in zip(self.group, row_mask) if m) if self.group else (),
            {k: np.asarray(v)[row_mask] for k, v in self.covariates.items()},
            tuple(p for p, m in zip(self.participant_ids, row_mask) if m)
            if self.participant_ids
            else (),
        )


def read_cohort_csv(path) -> ResponseTable:
    """Cohort schema: participant_id, group, age, education_years,
    premorbid_score, sex, item_1..item_N (chosen option 0..7)."""
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"empty cohort file {path}")
    item_cols = sorted(
        (c for c in rows[0] if c.startswith("item_")), key=lambda c: int(c.split("_")[1])
    )
    responses = np.array([[int(r[c]) for c in item_cols] for r in rows])
    covariates = {
        "age": np.array([float(r["age"]) for r in rows]),
        "education_years": np.array([float(r["education_years"]) for r in rows]),
        "premorbid_score": np.array([float(r["premorbid_score"]) for r in rows]),
        "sex": np.array([r["sex"] for r in rows]),
    }
    return ResponseTable(
        responses,
        tuple(r["group"] for r in rows),
        covariates,
        tuple(r["participant_id"] for r in rows),
    )


@dataclass(frozen=True)
class ErrorGrid:
    """Response counts under reference-derived orderings.

    Row i shows item item_order[i]; column j of that row shows the count
    of responses equal to option_orders[i][j].  Column 0 is the correct
    option whenever the reference group's modal response is correct.
    """

    counts: np.ndarray  # (items, 8)
    item_order: tuple[int, ...]
    option_orders: tuple[tuple[int, ...], ...]

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def build_error_grid(table: ResponseTable, reference: ResponseTable, answer_key) -> ErrorGrid:
    """Grid of `table`'s responses under `reference`-derived orderings.

    Items are ordered by decreasing reference success (count answering
    correctly) and options within each item by decreasing reference
    selection frequency; ties break toward the correct option and then the
    original index, so orderings are deterministic.
    """
    if table.n_items != reference.n_items:
        raise ItemMismatchError(
            f"tables disagree on items: {table.n_items} vs {reference.n_items}"
        )
    answer_key = list(answer_key)
    if len(answer_key) != reference.n_items:
        raise ItemMismatchError("answer key length does not match the item count")
    n_items = reference.n_items
    success = [
        int((reference.responses[:, j] == answer_key[j]).sum()) for j in range(n_items)
    ]
    item_order = sorted(range(n_items), key=lambda j: (-success[j], j))
    option_orders = []
    counts = np.zeros((n_items, N_OPTIONS), dtype=np.int64)
    for display_i, j in enumerate(item_order):
        freq = np.bincount(reference.responses[:, j], minlength=N_OPTIONS)
        order = sorted(
            range(N_OPTIONS), key=lambda k: (-freq[k], 0 if k == answer_key[j] else 1, k)
        )
        option_orders.append(tuple(order))
        table_freq = np.bincount(table.responses[:, j], minlength=N_OPTIONS) if table.n_rows else np.zeros(N_OPTIONS, dtype=np.int64)
        counts[display_i] = table_freq[order]
    return ErrorGrid(counts, tuple(item_order), tuple(option_orders))


def ztest_two_proportions(k1: int, n1: int, k2: int, n2: int) -> tuple[float, float]:
    """Pooled two-proportion z-test; degenerate pooled 0 or 1 gives (0, 1)."""
    if n1 < 1 or n2 < 1:
        raise ValueError("both sample sizes must be >= 1")
    p1 = k1 / n1
    p2 = k2 / n2
    pooled = (k1 + k2) / (n1 + n2)
    if pooled <= 0.0 or pooled >= 1.0:
        return 0.0, 1.0
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    z = (p1 - p2) / se
    return z, _two_sided_p(z)


def fdr_by(pvals, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Yekutieli step-up control at level alpha.

    Thresholds are j*alpha/(m*c(m)) with the harmonic correction
    c(m) = sum 1/i; adjusted p-values are the step-up monotonised
    min(1, p*(m*c(m))/j).  Returns (reject flags, adjusted p) in the input
    order.
    """
    p = np.asarray(pvals, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)
    if p.min() < 0 or p.max() > 1:
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    c_m = float(np.sum(1.0 / np.arange(1, m + 1)))
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    j = np.arange(1, m + 1)
    passed = ranked <= j * alpha / (m * c_m)
    reject_sorted = np.zeros(m, dtype=bool)
    if passed.any():
        cutoff = int(np.max(np.nonzero(passed)[0]))
        reject_sorted[: cutoff + 1] = True
    adjusted_sorted = np.minimum(1.0, ranked * m * c_m / j)
    adjusted_sorted = np.minimum.accumulate(adjusted_sorted[::-1])[::-1]
    reject = np.zeros(m, dtype=bool)
    adjusted = np.zeros(m)
    reject[order] = reject_sorted
    adjusted[order] = adjusted_sorted
    return reject, adjusted


@dataclass(frozen=True)
class Chi2Result:
    chi2: float
    dof: int
    p: float
    low_expected: bool  # any expected cell count below 5


def chi2_contingency(table) -> Chi2Result:
    """Pearson chi-squared against independence, upper-tail p.

    Flags (never blocks on) expected counts below 5; raises ZeroMarginError
    when a row or column is all zero.
    """
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or (obs < 0).any() or obs.sum() <= 0:
        raise ValueError("need a nonnegative, nonzero 2-D table")
    rows = obs.sum(axis=1)
    cols = obs.sum(axis=0)
    if (rows == 0).any() or (cols == 0).any():
        raise ZeroMarginError("a row or column sums to zero")
    expected = np.outer(rows, cols) / obs.sum()
    chi2 = float(((obs - expected) ** 2 / expected).sum())
    dof = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    if dof == 0:
        return Chi2Result(0.0, 0, 1.0, bool((expected < 5).any()))
    p = float(gammaincc(dof / 2.0, chi2 / 2.0))
    return Chi2Result(chi2, dof, p, bool((expected < 5).any()))


def _rank_with_ties(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(a, b, method: str = "auto") -> tuple[float, float]:
    """Rank-sum U for the first sample with a two-sided p.

    Exact enumeration when the smaller sample has <= 8 values and there
    are no ties; otherwise a normal approximation with tie-corrected
    variance and continuity correction.  All-tied data returns p = 1.
    `method` forces one branch ("exact" requires tie-free data).
    """
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _rank_with_ties(pooled)
    u1 = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    has_ties = len(np.unique(pooled)) < pooled.size
    if method == "exact" and has_ties:
        raise ValueError("exact enumeration requires tie-free data")
    use_exact = method == "exact" or (method == "auto" and min(n1, n2) <= 8 and not has_ties)
    if use_exact:
        return u1, _exact_mwu_p(u1, n1, n2)
    mean_u = n1 * n2 / 2.0
    n = n1 + n2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts)).sum()) / (n * (n - 1))
    var_u = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var_u <= 0:
        return u1, 1.0
    if u1 > mean_u:
        z = (u1 - mean_u - 0.5) / math.sqrt(var_u)
    elif u1 < mean_u:
        z = (u1 - mean_u + 0.5) / math.sqrt(var_u)
    else:
        z = 0.0
    return u1, _two_sided_p(z)


def _exact_mwu_p(u1: float, n1: int, n2: int) -> float:
    n = n1 + n2
    total = math.comb(n, n1)
    base = n1 * (n1 + 1) / 2.0
    count_le = 0
    u_obs = min(u1, n1 * n2 - u1)
    for positions in combinations(range(1, n + 1), n1):
        u = sum(positions) - base
        if min(u, n1 * n2 - u) <= u_obs + 1e-12:
            count_le += 1
    return min(1.0, count_le / total)


@dataclass(frozen=True)
class CellTest:
    item: int  # original item index
    option: int  # original option index
    z: float
    p: float
    p_adjusted: float
    rejected: bool


@dataclass(frozen=True)
class GridTestResult:
    tests: tuple[CellTest, ...]
    n_skipped: int  # cells empty in both groups, excluded from the family


def grid_cell_tests(
    table_a: ResponseTable, table_b: ResponseTable, alpha: float = 0.05
) -> GridTestResult:
    """Per-cell selection-proportion z-tests over the items x options grid.

    Cells that neither group ever selected are skipped (their p is
    undefined) and the BY correction runs over the remaining family.
    """
    if table_a.n_items != table_b.n_items:
        raise ItemMismatchError("tables disagree on the item count")
    if table_a.n_rows < 1 or table_b.n_rows < 1:
        raise ValueError("both tables need at least one row")
    cells = []
    skipped = 0
    for j in range(table_a.n_items):
        freq_a = np.bincount(table_a.responses[:, j], minlength=N_OPTIONS)
        freq_b = np.bincount(table_b.responses[:, j], minlength=N_OPTIONS)
        for k in range(N_OPTIONS):
            if freq_a[k] == 0 and freq_b[k] == 0:
                skipped += 1
                continue
            z, p = ztest_two_proportions(
                int(freq_a[k]), table_a.n_rows, int(freq_b[k]), table_b.n_rows
            )
            cells.append((j, k, z, p))
    reject, adjusted = fdr_by([c[3] for c in cells], alpha)
    tests = tuple(
        CellTest(j, k, z, p, float(adj), bool(rej))
        for (j, k, z, p), adj, rej in zip(cells, adjusted, reject)
    )
    return GridTestResult(tests, skipped)


@dataclass(frozen=True)
class CovariateTest:
    name: str
    kind: str  # "categorical" | "continuous"
    statistic: float
    p: float
    p_adjusted: float
    rejected: bool


@dataclass(frozen=True)
class OverlapReport:
    n_sharers: int
    n_non_sharers: int
    shared_pairs: tuple[tuple[int, int], ...]  # (item, wrong option) the model chose
    tests: tuple[CovariateTest, ...]

    def to_dict(self) -> dict:
        return {
            "n_sharers": self.n_sharers,
            "n_non_sharers": self.n_non_sharers,
            "model_error_pairs": [list(p) for p in self.shared_pairs],
            "tests": [
                {
                    "covariate": t.name,
                    "kind": t.kind,
                    "statistic": t.statistic,
                    "p": t.p,
                    "p_adjusted": t.p_adjusted,
                    "rejected": t.rejected,
                }
                for t in self.tests
            ],
        }


def model_error_overlap(
    model_choices, answer_key, cohort: ResponseTable, alpha: float = 0.05
) -> OverlapReport:
    """Split the cohort by sharing any model error and screen covariates.

    A participant shares an error when they picked the model's wrong
    option on an item the model got wrong.  String covariates (plus the
    group label) get chi-squared tests, numeric ones Mann-Whitney, and the
    whole covariate family is BY-corrected at alpha.
    """
    model_choices = list(model_choices)
    answer_key = list(answer_key)
    if len(model_choices) != cohort.n_items or len(answer_key) != cohort.n_items:
        raise ItemMismatchError("model choices and answer key must cover every item")
    wrong_pairs = [
        (j, model_choices[j])
        for j in range(cohort.n_items)
        if model_choices[j] != answer_key[j]
    ]
    if not wrong_pairs:
        raise NoModelErrorsError("model made no errors; overlap partition undefined")
    sharer = np.zeros(cohort.n_rows, dtype=bool)
    for j, opt in wrong_pairs:
        sharer |= cohort.responses[:, j] == opt
    if cohort.n_rows == 0:
        raise ValueError("cohort is empty")

    candidates: list[tuple[str, str, np.ndarray]] = []
    if cohort.group:
        candidates.append(("group", "categorical", np.asarray(cohort.group)))
    for name, values in sorted(cohort.covariates.items()):
        values = np.asarray(values)
        kind = "continuous" if np.issubdtype(values.dtype, np.number) else "categorical"
        candidates.append((name, kind, values))

    raw = []
    for name, kind, values in candidates:
        if kind == "categorical":
            levels = sorted(set(values.tolist()))
            table = np.array(
                [
                    [int(((values == lv) & sharer).sum()), int(((values == lv) & ~sharer).sum())]
                    for lv in levels
                ]
            )
            keep = table.sum(axis=1) > 0
            table = table[keep]
            if table.shape[0] < 2 or (table.sum(axis=0) == 0).any():
                continue
            res = chi2_contingency(table)
            raw.append((name, kind, res.chi2, res.p))
        else:
            a = values[sharer]
            b = values[~sharer]
            if a.size == 0 or b.size == 0:
                continue
            u, p = mann_whitney_u(a, b)
            raw.append((name, kind, u, p))
    reject, adjusted = fdr_by([r[3] for r in raw], alpha)
    tests = tuple(
        CovariateTest(name, kind, stat, p, float(adj), bool(rej))
        for (name, kind, stat, p), adj, rej in zip(raw, adjusted, reject)
    )
    return OverlapReport(int(sharer.sum()), int((~sharer).sum()), tuple(wrong_pairs), tests)
