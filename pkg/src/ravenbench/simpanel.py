"""Five-metric similarity panel and mode vote over candidate answer options.

The panel compares the in-painted answer region against each rendered
option with Hausdorff distance (on Otsu-binarised foregrounds), mean
squared error, 1-D Wasserstein distance between intensity samples, ERGAS,
and normalised mutual information.  Each metric nominates one option; the
mode of the five nominations is the chosen answer.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

METRICS = ("hd", "mse", "wd", "ergas", "nmi")


class ZeroMeanReference(ValueError):
    """ERGAS reference image has (near-)zero mean."""


def _as_float(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64)


def otsu_threshold(img) -> int | None:
    """Otsu cut over a 256-bin histogram, or None for constant images.

    The returned integer t splits intensities into classes [0, t] and
    (t, 255]; callers treat the darker class as foreground (ink on paper).
    """
    values = np.clip(np.rint(_as_float(img)), 0, 255).astype(np.int64)
    counts = np.bincount(values.ravel(), minlength=256).astype(np.float64)
    total = counts.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(counts)[:-1]
    w1 = total - w0
    m0 = np.cumsum(counts * levels)[:-1]
    m1 = np.sum(counts * levels) - m0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return None
    mu0 = np.where(valid, m0 / np.where(w0 > 0, w0, 1.0), 0.0)
    mu1 = np.where(valid, m1 / np.where(w1 > 0, w1, 1.0), 0.0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    best = int(np.argmax(between))
    if between[best] <= 0:
        return None
    return best


def _foreground_mask(img) -> np.ndarray:
    t = otsu_threshold(img)
    values = np.clip(np.rint(_as_float(img)), 0, 255)
    if t is None:
        return np.zeros(values.shape, dtype=bool)
    return values <= t


def foreground_points(img) -> np.ndarray:
    """(N, 2) array of (row, col) coordinates of the darker Otsu class."""
    return np.argwhere(_foreground_mask(img))


@dataclass
class PreparedImage:
    """Cached per-image ingredients for the metric panel.

    Preparing the fixed side of repeated comparisons (the option tiles)
    once saves the Otsu pass, distance transform, sort and binning on
    every repetition.
    """

    values: np.ndarray  # float64
    fg_mask: np.ndarray  # bool
    fg_distance: np.ndarray | None  # distance of every pixel to nearest fg
    sorted_values: np.ndarray
    bin_idx: np.ndarray  # flat intensity-bin indices
    bins: int
    mean: float


def prepare_image(img, bins: int = 64) -> PreparedImage:
    values = _as_float(img)
    fg = _foreground_mask(values)
    fg_distance = distance_transform_edt(~fg) if fg.any() else None
    clipped = np.clip(np.rint(values), 0, 255).astype(np.int64).ravel()
    bin_idx = np.minimum(clipped * bins // 256, bins - 1)
    return PreparedImage(
        values=values,
        fg_mask=fg,
        fg_distance=fg_distance,
        sorted_values=np.sort(values.ravel()),
        bin_idx=bin_idx,
        bins=bins,
        mean=float(values.mean()),
    )


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _hausdorff_prepared(a: PreparedImage, b: PreparedImage) -> float:
    if a.fg_distance is None and b.fg_distance is None:
        return 0.0
    if a.fg_distance is None or b.fg_distance is None:
        h, w = a.values.shape
        return float(np.hypot(h - 1, w - 1))
    d_ab = b.fg_distance[a.fg_mask].max()
    d_ba = a.fg_distance[b.fg_mask].max()
    return float(max(d_ab, d_ba))


def _nmi_prepared(a: PreparedImage, b: PreparedImage) -> float:
    bins = a.bins
    joint = np.bincount(a.bin_idx * bins + b.bin_idx, minlength=bins * bins).astype(np.float64)
    joint /= joint.sum()
    h_joint = _entropy(joint)
    if h_joint <= 1e-15:
        # both images constant: aligned bins are a perfect match
        return 2.0 if a.bin_idx[0] == b.bin_idx[0] else 1.0
    h_a = _entropy(joint.reshape(bins, bins).sum(axis=1))
    h_b = _entropy(joint.reshape(bins, bins).sum(axis=0))
    return float((h_a + h_b) / h_joint)


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance between the two foreground point sets.

    Both images are binarised by Otsu threshold first; distances come from
    an exact Euclidean distance transform.  An empty set against a
    non-empty one scores the image diagonal; two empty sets score 0.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("images must share dimensions")
    return _hausdorff_prepared(prepare_image(a), prepare_image(b))


def mse(a, b) -> float:
    """Mean squared intensity difference."""
    fa = _as_float(a)
    fb = _as_float(b)
    if fa.shape != fb.shape:
        raise ValueError("images must share dimensions")
    return float(np.mean((fa - fb) ** 2))


def wasserstein(a, b) -> float:
    """1-D Wasserstein-1 between the flattened intensity samples.

    Equal sample counts pair off sorted values, so this is the mean
    absolute difference of the two sorted intensity sequences.
    """
    fa = _as_float(a).ravel()
    fb = _as_float(b).ravel()
    if fa.size != fb.size:
        raise ValueError("images must share pixel count")
    return float(np.mean(np.abs(np.sort(fa) - np.sort(fb))))


def ergas(ref, test, ratio: float = 1.0) -> float:
    """ERGAS for a single grayscale band: 100 * ratio * RMSE / mean(ref)."""
    fr = _as_float(ref)
    ft = _as_float(test)
    if fr.shape != ft.shape:
        raise ValueError("images must share dimensions")
    mean_ref = float(np.mean(fr))
    if mean_ref <= 1e-9:
        raise ZeroMeanReference(f"reference mean {mean_ref} too small for ERGAS")
    rmse = float(np.sqrt(np.mean((fr - ft) ** 2)))
    return 100.0 * ratio * rmse / mean_ref


def nmi(a, b, bins: int = 64) -> float:
    """Normalised mutual information (H(A)+H(B))/H(A,B), natural log.

    Intensities are dropped into `bins` equal-width bins spanning [0, 256).
    Two constant images score 2.0 when they share a bin and 1.0 otherwise
    (the joint entropy is zero there and the ratio is undefined).
    """
    fa = _as_float(a)
    fb = _as_float(b)
    if fa.size != fb.size:
        raise ValueError("images must share pixel count")
    return _nmi_prepared(prepare_image(fa, bins), prepare_image(fb, bins))


@dataclass(frozen=True)
class MetricPanel:
    """Values of the five similarity metrics for one (region, option) pair."""

    hd: float
    mse: float
    wd: float
    ergas: float
    nmi: float

    def values(self) -> tuple[float, float, float, float, float]:
        return (self.hd, self.mse, self.wd, self.ergas, self.nmi)


@dataclass(frozen=True)
class VoteRecord:
    """Panels, per-metric winners and the mode-vote choice for one item."""

    panels: tuple[MetricPanel, ...]
    winners: tuple[int, int, int, int, int]
    choice: int
    tiebreak: str  # "none" | "mse" | "lowest_index"


def panel_from_prepared(
    region: PreparedImage, option: PreparedImage, *, ergas_ratio: float = 1.0
) -> MetricPanel:
    """All five metrics; ERGAS treats the option render as the reference band."""
    if region.values.shape != option.values.shape:
        raise ValueError("images must share dimensions")
    if option.mean <= 1e-9:
        raise ZeroMeanReference(f"reference mean {option.mean} too small for ERGAS")
    mse_value = float(np.mean((region.values - option.values) ** 2))
    return MetricPanel(
        hd=_hausdorff_prepared(region, option),
        mse=mse_value,
        wd=float(np.mean(np.abs(region.sorted_values - option.sorted_values))),
        ergas=100.0 * ergas_ratio * float(np.sqrt(mse_value)) / option.mean,
        nmi=_nmi_prepared(region, option),
    )


def compute_panel(region, option, *, nmi_bins: int = 64, ergas_ratio: float = 1.0) -> MetricPanel:
    """All five metrics between the in-painted region and one option."""
    return panel_from_prepared(
        prepare_image(region, nmi_bins), prepare_image(option, nmi_bins), ergas_ratio=ergas_ratio
    )


def vote_from_panels(panels) -> VoteRecord:
    """Mode vote given precomputed panels; ties: smaller mse, then lowest index."""
    panels = tuple(panels)
    winners = []
    for idx, metric in enumerate(METRICS):
        column = [panel.values()[idx] for panel in panels]
        if metric == "nmi":
            winners.append(int(np.argmax(column)))
        else:
            winners.append(int(np.argmin(column)))
    counts = Counter(winners)
    top = max(counts.values())
    mode_set = sorted(k for k, c in counts.items() if c == top)
    if len(mode_set) == 1:
        return VoteRecord(panels, tuple(winners), mode_set[0], "none")
    mses = [panels[k].mse for k in mode_set]
    best = min(mses)
    leaders = [k for k, v in zip(mode_set, mses) if v == best]
    if len(leaders) == 1:
        return VoteRecord(panels, tuple(winners), leaders[0], "mse")
    return VoteRecord(panels, tuple(winners), leaders[0], "lowest_index")


def vote(region, options, *, nmi_bins: int = 64, ergas_ratio: float = 1.0) -> VoteRecord:
    """Mode vote of the five metric winners over the candidate options.

    Within a metric, ties go to the lowest option index.  A tied mode is
    broken by the smaller MSE among the tied options, then by the lowest
    index; the tie-break path is recorded.
    """
    region_prep = prepare_image(np.asarray(region), nmi_bins)
    panels = [
        panel_from_prepared(region_prep, prepare_image(opt, nmi_bins), ergas_ratio=ergas_ratio)
        for opt in options
    ]
    if not panels:
        raise ValueError("need at least one option")
    return vote_from_panels(panels)
