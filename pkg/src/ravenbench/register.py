"""Corner-feature alignment of an in-painted image onto candidate images.

Stages: segment-test corner detection on a radius-3 Bresenham circle,
binary intensity-comparison descriptors over smoothed 31x31 patches,
mutual-nearest-neighbour Hamming matching, RANSAC homography estimation
via the normalised direct linear transform, and bilinear inverse warping.
Descriptors skip orientation assignment: puzzle renders and candidate
renders share axis alignment, so rotation invariance buys nothing here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

# radius-3 Bresenham circle, 16 points clockwise from 12 o'clock: (dy, dx)
_CIRCLE = np.array(
    [
        (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
        (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
    ],
    dtype=np.int64,
)
# Contiguous circle pixels required for a corner.  9 (the classic choice)
# rather than 12: an ideal 90-degree corner subtends only 11 of the 16
# discrete circle pixels, so axis-aligned rectangles would go undetected
# at 12 and the puzzle renders are full of right angles.
_ARC_LENGTH = 9

_DESCRIPTOR_BITS = 256
_PATCH_RADIUS = 15  # 31x31 descriptor support
_SMOOTH_RADIUS = 2  # 5x5 box smoothing before comparisons
_LAYOUT_SEED = 20240229

_contig_lut: np.ndarray | None = None
_pair_layout: np.ndarray | None = None


class DegenerateModelError(RuntimeError):
    """RANSAC found no homography with the required inlier support."""


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    score: int


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, normalised so the bottom-right entry is 1."""

    matrix: np.ndarray

    @classmethod
    def from_matrix(cls, m) -> "Homography":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if abs(m[2, 2]) < 1e-12 or not np.isfinite(m).all():
            raise DegenerateModelError("unnormalisable homography")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-9:
            raise DegenerateModelError("non-invertible homography")
        return cls(m)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        proj = np.hstack([pts, ones]) @ self.matrix.T
        return proj[:, :2] / proj[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography.from_matrix(np.linalg.inv(self.matrix))


def _circular_run_lut() -> np.ndarray:
    """LUT over 16-bit ring patterns: has a long-enough circular run of set bits."""
    global _contig_lut
    if _contig_lut is None:
        codes = np.arange(1 << 16, dtype=np.uint32)
        bits = ((codes[:, None] >> np.arange(16)) & 1).astype(bool)
        doubled = np.concatenate([bits, bits], axis=1)
        ok = np.zeros(1 << 16, dtype=bool)
        for start in range(16):
            ok |= doubled[:, start : start + _ARC_LENGTH].all(axis=1)
        _contig_lut = ok
    return _contig_lut


def detect_corners(image, threshold: int = 20, max_n: int = 500) -> list[Keypoint]:
    """Segment-test corners with non-maximum suppression, best max_n by score.

    A pixel is a corner when at least 9 contiguous pixels on its radius-3
    circle are all brighter than centre+threshold or all darker than
    centre-threshold.  The score is the sum of absolute ring differences.
    Keypoints stay >= 3 px from the border so the circle fits.
    """
    img = np.asarray(image, dtype=np.int32)
    h, w = img.shape
    if h < 32 or w < 32:
        raise ValueError("image must be at least 32x32")
    centre = img[3 : h - 3, 3 : w - 3]
    bright_code = np.zeros(centre.shape, dtype=np.uint16)
    dark_code = np.zeros(centre.shape, dtype=np.uint16)
    score = np.zeros(centre.shape, dtype=np.int32)
    for i, (dy, dx) in enumerate(_CIRCLE):
        ring = img[3 + dy : h - 3 + dy, 3 + dx : w - 3 + dx]
        bright_code |= ((ring > centre + threshold).astype(np.uint16)) << i
        dark_code |= ((ring < centre - threshold).astype(np.uint16)) << i
        score += np.abs(ring - centre)
    lut = _circular_run_lut()
    corner = lut[bright_code] | lut[dark_code]
    score = np.where(corner, score, 0)
    full = np.zeros((h, w), dtype=np.int32)
    full[3 : h - 3, 3 : w - 3] = score
    peak = (full > 0) & (full == maximum_filter(full, size=3, mode="constant", cval=0))
    ys, xs = np.nonzero(peak)
    scores = full[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:max_n]
    return [Keypoint(int(xs[i]), int(ys[i]), int(scores[i])) for i in order]


def _comparison_pairs() -> np.ndarray:
    """Fixed seeded (dy1, dx1, dy2, dx2) offsets shared by every descriptor."""
    global _pair_layout
    if _pair_layout is None:
        rng = np.random.default_rng(_LAYOUT_SEED)
        raw = rng.normal(0.0, (2 * _PATCH_RADIUS + 1) / 5.0, size=(_DESCRIPTOR_BITS, 4))
        _pair_layout = np.clip(np.rint(raw), -_PATCH_RADIUS, _PATCH_RADIUS).astype(np.int64)
    return _pair_layout


def _box_sums(image) -> np.ndarray:
    """Exact integer 5x5 box sums (edge padded), same shape as the input."""
    img = np.pad(np.asarray(image, dtype=np.int64), _SMOOTH_RADIUS, mode="edge")
    c = np.cumsum(np.cumsum(img, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    k = 2 * _SMOOTH_RADIUS + 1
    return c[k:, k:] - c[k:, :-k] - c[:-k, k:] + c[:-k, :-k]


def describe(image, keypoints) -> np.ndarray:
    """Packed 256-bit descriptors, one row of 32 bytes per keypoint.

    Bit i is 1 when the smoothed intensity at the first point of pair i is
    strictly below the second.  Comparisons use exact integer box sums so
    the bits are deterministic; sample coordinates are clipped to the image.
    """
    img = np.asarray(image)
    if len(keypoints) == 0:
        return np.zeros((0, _DESCRIPTOR_BITS // 8), dtype=np.uint8)
    sums = _box_sums(img)
    h, w = img.shape
    ky = np.array([kp.y for kp in keypoints], dtype=np.int64)[:, None]
    kx = np.array([kp.x for kp in keypoints], dtype=np.int64)[:, None]
    pairs = _comparison_pairs()
    y1 = np.clip(ky + pairs[:, 0], 0, h - 1)
    x1 = np.clip(kx + pairs[:, 1], 0, w - 1)
    y2 = np.clip(ky + pairs[:, 2], 0, h - 1)
    x2 = np.clip(kx + pairs[:, 3], 0, w - 1)
    bits = sums[y1, x1] < sums[y2, x2]
    return np.packbits(bits, axis=1)


def hamming_distances(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) matrix of Hamming distances between packed descriptors."""
    a = desc_a.reshape(len(desc_a), -1).view(np.uint64)
    b = desc_b.reshape(len(desc_b), -1).view(np.uint64)
    return np.bitwise_count(a[:, None, :] ^ b[None, :, :]).sum(axis=2, dtype=np.int64)


def match(desc_a: np.ndarray, desc_b: np.ndarray, max_distance: int = 64) -> list[tuple[int, int, int]]:
    """Mutual nearest neighbours under Hamming distance, cross-checked.

    Pairs further than max_distance apart are dropped.  Ties resolve to
    the lowest index, which keeps the matching symmetric.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    d = hamming_distances(desc_a, desc_b)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    ia = np.arange(len(desc_a))
    keep = (nn_ba[nn_ab] == ia) & (d[ia, nn_ab] <= max_distance)
    return [(int(i), int(nn_ab[i]), int(d[i, nn_ab[i]])) for i in ia[keep]]


def _normalise(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = points.mean(axis=0)
    spread = np.mean(np.linalg.norm(points - centroid, axis=1))
    scale = np.sqrt(2.0) / max(spread, 1e-12)
    t = np.array(
        [[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]]
    )
    ones = np.ones((points.shape[0], 1))
    return (np.hstack([points, ones]) @ t.T)[:, :2], t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Least-squares homography via the normalised direct linear transform."""
    ns, ts = _normalise(src)
    nd, td = _normalise(dst)
    n = src.shape[0]
    a = np.zeros((2 * n, 9))
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1.0
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1.0
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    try:
        _, _, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    h = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ h @ ts
    if abs(m[2, 2]) < 1e-12 or not np.isfinite(m).all():
        return None
    return m / m[2, 2]


def _collinear(points: np.ndarray) -> bool:
    for i in range(points.shape[0]):
        sub = np.delete(points, i, axis=0)
        u = sub[1] - sub[0]
        v = sub[2] - sub[0]
        if abs(u[0] * v[1] - u[1] * v[0]) < 1e-6:
            return True
    return False


def _reprojection_errors(m: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ones = np.ones((src.shape[0], 1))
    proj = np.hstack([src, ones]) @ m.T
    wcol = proj[:, 2:3]
    bad = np.abs(wcol[:, 0]) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        pts = proj[:, :2] / wcol
    err = np.linalg.norm(pts - dst, axis=1)
    err[bad | ~np.isfinite(err)] = np.inf
    return err


def ransac_homography(
    src_pts,
    dst_pts,
    *,
    reproj_threshold: float = 2.0,
    max_iters: int = 500,
    seed: int = 0,
    min_inliers: int = 8,
) -> tuple[Homography, np.ndarray]:
    """RANSAC over 4-point minimal samples with a least-squares refit.

    Sampling is seeded and the iteration count adapts to the observed
    inlier ratio, so results are deterministic.  Raises
    DegenerateModelError when no model reaches min_inliers support.
    """
    src = np.asarray(src_pts, dtype=np.float64)
    dst = np.asarray(dst_pts, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("need matching (N, 2) point arrays")
    n = src.shape[0]
    if n < 4:
        raise DegenerateModelError("need at least 4 point pairs")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers: np.ndarray | None = None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        m = _dlt(src[idx], dst[idx])
        if m is None:
            continue
        inliers = _reprojection_errors(m, src, dst) < reproj_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            ratio = count / n
            if ratio >= 1.0:
                break
            # enough iterations for 0.9999 confidence at the observed ratio
            needed = int(np.ceil(np.log(1e-4) / np.log(1.0 - ratio**4 + 1e-12)))
    if best_inliers is None or best_count < min_inliers:
        raise DegenerateModelError(f"best support {best_count} < {min_inliers}")
    refit = _dlt(src[best_inliers], dst[best_inliers])
    if refit is None:
        refit_h = Homography.from_matrix(_dlt(src[best_inliers][:4], dst[best_inliers][:4]))
    else:
        refit_h = Homography.from_matrix(refit)
    return refit_h, best_inliers


def warp(image, h: Homography, out_dims: tuple[int, int]) -> np.ndarray:
    """Inverse-mapped bilinear warp; samples outside the source read as 0."""
    return warp_region(image, h, (0, 0) + tuple(out_dims))


def warp_region(image, h: Homography, region: tuple[int, int, int, int]) -> np.ndarray:
    """Warp only the output window (y0, x0, height, width).

    Pixel-identical to cropping the corresponding window out of a full
    warp; the scoring loop only ever needs the answer-cell window.
    """
    img = np.asarray(image)
    src = img.astype(np.float64)
    hh, ww = img.shape
    oy, ox, oh, ow = region
    inv = np.linalg.inv(h.matrix)
    xs, ys = np.meshgrid(
        np.arange(ox, ox + ow, dtype=np.float64), np.arange(oy, oy + oh, dtype=np.float64)
    )
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    valid = (sx >= 0) & (sx <= ww - 1) & (sy >= 0) & (sy <= hh - 1)
    x0c = np.clip(x0, 0, ww - 1)
    y0c = np.clip(y0, 0, hh - 1)
    x1c = np.clip(x0 + 1, 0, ww - 1)
    y1c = np.clip(y0 + 1, 0, hh - 1)
    out = (
        src[y0c, x0c] * (1 - fx) * (1 - fy)
        + src[y0c, x1c] * fx * (1 - fy)
        + src[y1c, x0c] * (1 - fx) * fy
        + src[y1c, x1c] * fx * fy
    )
    out = np.where(valid, out, 0.0)
    if np.issubdtype(img.dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(img.dtype)
    return out


@dataclass(frozen=True)
class RegistrationConfig:
    corner_threshold: int = 20
    max_corners: int = 250
    match_max_distance: int = 64
    ransac_threshold: float = 2.0
    ransac_iters: int = 120
    ransac_seed: int = 11
    min_inliers: int = 8
    border_margin: int = 17  # keypoints need full descriptor support
    # repeated shapes let matching lock onto a whole-lattice shift; any
    # corner displaced further than this is treated as a failed registration
    max_displacement: float = 40.0


@dataclass(frozen=True)
class Features:
    """Cached corner locations and packed descriptors for one image."""

    points: np.ndarray  # (N, 2) as (x, y)
    descriptors: np.ndarray  # (N, 32) uint8


def detect_and_describe(image, cfg: RegistrationConfig = RegistrationConfig()) -> Features:
    img = np.asarray(image)
    h, w = img.shape
    m = cfg.border_margin
    kps = [
        kp
        for kp in detect_corners(img, threshold=cfg.corner_threshold, max_n=cfg.max_corners)
        if m <= kp.x < w - m and m <= kp.y < h - m
    ]
    desc = describe(img, kps)
    pts = np.array([[kp.x, kp.y] for kp in kps], dtype=np.float64).reshape(-1, 2)
    return Features(pts, desc)


def register_to_candidate(
    inpainted,
    candidate,
    cfg: RegistrationConfig = RegistrationConfig(),
    candidate_features: Features | None = None,
    inpainted_features: Features | None = None,
) -> tuple[np.ndarray, str]:
    """Align the in-painted image onto the candidate; never raises.

    Runs corners -> descriptors -> mutual matching -> RANSAC -> warp.  Any
    failure (too few features, matches or inliers) returns the in-painted
    image unchanged with the flag "identity_fallback".
    """
    inpainted = np.asarray(inpainted)
    candidate = np.asarray(candidate)
    if inpainted.shape != candidate.shape:
        raise ValueError("images must share dimensions")
    fa = inpainted_features if inpainted_features is not None else detect_and_describe(inpainted, cfg)
    fb = candidate_features if candidate_features is not None else detect_and_describe(candidate, cfg)
    if len(fa.points) < 4 or len(fb.points) < 4:
        return inpainted, "identity_fallback"
    pairs = match(fa.descriptors, fb.descriptors, max_distance=cfg.match_max_distance)
    if len(pairs) < max(4, cfg.min_inliers):
        return inpainted, "identity_fallback"
    src = fa.points[[p[0] for p in pairs]]
    dst = fb.points[[p[1] for p in pairs]]
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
        return inpainted, "identity_fallback"
    hh, ww = candidate.shape
    corners = np.array([[0, 0], [ww - 1, 0], [0, hh - 1], [ww - 1, hh - 1]], dtype=float)
    if np.linalg.norm(h.apply(corners) - corners, axis=1).max() > cfg.max_displacement:
        return inpainted, "identity_fallback"
    return warp(inpainted, h, candidate.shape), "registered"
