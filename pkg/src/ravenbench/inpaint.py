"""In-painter contract and the two reference substrates.

Local diffusion fills the mask by iterative neighbourhood averaging from
the boundary inward (a short-range substrate); lattice extrapolation
detects the periodic cell structure by masked FFT autocorrelation and
extrapolates each masked pixel linearly from its homologues in the two
cells above and the two cells to the left (a long-range substrate).  A
directory-based protocol runs external in-painters.
"""

from __future__ import annotations

import re
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from ravenbench.pngio import load_gray

_CONVERGENCE_TOL = 0.5  # gray levels, max per-iteration change


class ConstantImageError(ValueError):
    """No off-origin autocorrelation peak: image carries no lattice."""


class ExternalProtocolError(RuntimeError):
    """Base for external in-painter protocol violations."""


class ExternalTimeoutError(ExternalProtocolError):
    pass


class ExternalCommandError(ExternalProtocolError):
    pass


class MissingResultError(ExternalProtocolError):
    def __init__(self, item_index: int):
        super().__init__(f"item {item_index}: result file missing")
        self.item_index = item_index


class DimensionMismatchError(ExternalProtocolError):
    def __init__(self, item_index: int):
        super().__init__(f"item {item_index}: result dimensions differ from input")
        self.item_index = item_index


class UnmaskedPixelsModifiedError(ExternalProtocolError):
    def __init__(self, item_index: int, worst: int):
        super().__init__(f"item {item_index}: unmasked pixels changed by up to {worst}")
        self.item_index = item_index


@dataclass(frozen=True)
class InpaintRequest:
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.image)
        msk = np.asarray(self.mask)
        if img.shape != msk.shape:
            raise ValueError("image and mask must share dimensions")
        if not msk.any():
            raise ValueError("mask must be non-empty")
        if msk[0, :].any() or msk[-1, :].any() or msk[:, 0].any() or msk[:, -1].any():
            raise ValueError("mask must be strictly interior to the image")


@dataclass(frozen=True)
class InpaintResult:
    image: np.ndarray
    substrate_id: str
    elapsed: float
    converged: bool = True


@dataclass(frozen=True)
class LatticeEstimate:
    pitch_x: int
    pitch_y: int
    origin_x: float
    origin_y: float
    peak_strength: float  # secondary-peak / zero-lag autocorrelation ratio


@dataclass(frozen=True)
class LocalFillConfig:
    iterations: int = 400
    kernel_radius: int = 1


@dataclass(frozen=True)
class LatticeConfig:
    # the default floor sits above intra-cell slot spacing and the central
    # autocorrelation lobe of typical shape sizes; detect_lattice accepts
    # anything down to 16
    min_pitch: int = 64
    min_strength: float = 0.1
    local: LocalFillConfig = field(default_factory=LocalFillConfig)


def inpaint_local(req: InpaintRequest, cfg: LocalFillConfig = LocalFillConfig()) -> InpaintResult:
    """Fill the mask by iterated box-mean averaging of its surroundings.

    Masked pixels start at the mean of the boundary ring and relax until
    the largest per-iteration change drops under half a gray level or the
    iteration cap is hit (reported via `converged`, never an error).  The
    fixed point is a discrete harmonic fill for the box kernel, and the
    fill only ever reads original pixels within kernel reach of the mask.
    """
    t0 = time.perf_counter()
    img = np.asarray(req.image)
    mask = np.asarray(req.mask, dtype=bool)
    r = cfg.kernel_radius
    ys, xs = np.nonzero(mask)
    y0 = max(0, ys.min() - r)
    y1 = min(img.shape[0], ys.max() + 1 + r)
    x0 = max(0, xs.min() - r)
    x1 = min(img.shape[1], xs.max() + 1 + r)
    crop = img[y0:y1, x0:x1].astype(np.float64)
    cmask = mask[y0:y1, x0:x1]
    ring = (maximum_filter(cmask, size=2 * r + 1) & ~cmask)
    crop[cmask] = crop[ring].mean() if ring.any() else 0.0
    converged = False
    for _ in range(cfg.iterations):
        smoothed = uniform_filter(crop, size=2 * r + 1, mode="nearest")
        delta = np.abs(smoothed[cmask] - crop[cmask]).max()
        crop[cmask] = smoothed[cmask]
        if delta < _CONVERGENCE_TOL:
            converged = True
            break
    out = img.copy()
    filled = np.clip(np.rint(crop[cmask]), 0, 255).astype(img.dtype)
    out[mask] = filled
    return InpaintResult(out, "local", time.perf_counter() - t0, converged)


def detect_lattice(
    image,
    mask=None,
    *,
    min_pitch: int = 16,
    min_strength: float = 0.1,
) -> LatticeEstimate:
    """Dominant lattice pitch from masked, coverage-normalised autocorrelation.

    Masked pixels are zero-filled after mean subtraction and each shift is
    normalised by its unmasked-pair count, which keeps the estimate
    unbiased under light masking (caller guarantees >= 8/9 unmasked).
    Raises ConstantImageError when no off-origin peak clears min_strength.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if mask is None:
        unmasked = np.ones_like(img, dtype=bool)
    else:
        unmasked = ~np.asarray(mask, dtype=bool)
    coverage_frac = unmasked.mean()
    if coverage_frac < 8.0 / 9.0 - 1e-9:
        raise ValueError("detect_lattice needs at least 8/9 of the image unmasked")
    mu = img[unmasked].mean()
    f = np.where(unmasked, img - mu, 0.0)
    wgt = unmasked.astype(np.float64)
    num = np.fft.irfft2(np.abs(np.fft.rfft2(f)) ** 2, s=f.shape)
    cov = np.fft.irfft2(np.abs(np.fft.rfft2(wgt)) ** 2, s=f.shape)
    r = np.where(cov > 0.5, num / np.maximum(cov, 0.5), 0.0)
    r0 = r[0, 0]
    if r0 <= 1e-9:
        raise ConstantImageError("zero variance")
    max_px = w // 2
    max_py = h // 2
    if min_pitch > max_px or min_pitch > max_py:
        raise ValueError("min_pitch exceeds half the image dimensions")
    profile_x = r[0, min_pitch : max_px + 1]
    profile_y = r[min_pitch : max_py + 1, 0]
    px = int(np.argmax(profile_x)) + min_pitch
    py = int(np.argmax(profile_y)) + min_pitch
    strength = float(max(profile_x[px - min_pitch], profile_y[py - min_pitch]) / r0)
    if strength < min_strength:
        raise ConstantImageError(f"strongest off-origin peak {strength:.3f} below {min_strength}")
    return LatticeEstimate(
        pitch_x=px,
        pitch_y=py,
        origin_x=_axis_phase(f, wgt, px, axis=0),
        origin_y=_axis_phase(f, wgt, py, axis=1),
        peak_strength=strength,
    )


def _axis_phase(f: np.ndarray, wgt: np.ndarray, pitch: int, axis: int) -> float:
    """Offset in [0, pitch) of the fundamental lattice component along an axis."""
    other = 1 - axis
    sums = f.sum(axis=other)
    counts = np.maximum(wgt.sum(axis=other), 1.0)
    prof = sums / counts
    n = prof.size
    z = np.sum(prof * np.exp(-2j * np.pi * np.arange(n) / pitch))
    if abs(z) < 1e-12:
        return 0.0
    return float((-np.angle(z) * pitch / (2 * np.pi)) % pitch)


def inpaint_lattice(req: InpaintRequest, cfg: LatticeConfig = LatticeConfig()) -> InpaintResult:
    """Extrapolate each masked pixel from its lattice homologues.

    For masked pixel p the two unmasked samples one and two pitches above
    give a linear prediction down the column, the two samples to the left
    one along the row; predictions are averaged (or the single available
    sample is carried over).  Falls back to the local fill on
    ConstantImageError, recording the fallback in the substrate id.
    """
    t0 = time.perf_counter()
    img = np.asarray(req.image)
    mask = np.asarray(req.mask, dtype=bool)
    try:
        est = detect_lattice(
            img, mask, min_pitch=cfg.min_pitch, min_strength=cfg.min_strength
        )
    except ConstantImageError:
        local = inpaint_local(req, cfg.local)
        return replace(
            local,
            substrate_id="lattice+localfallback",
            elapsed=time.perf_counter() - t0,
        )
    h, w = img.shape
    src = img.astype(np.float64)
    ys, xs = np.nonzero(mask)

    def samples(dy: int, dx: int):
        sy = ys + dy
        sx = xs + dx
        ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
        ok[ok] &= ~mask[sy[ok], sx[ok]]
        vals = np.zeros(len(ys))
        vals[ok] = src[sy[ok], sx[ok]]
        return vals, ok

    a1, ok_a1 = samples(-est.pitch_y, 0)
    a2, ok_a2 = samples(-2 * est.pitch_y, 0)
    l1, ok_l1 = samples(0, -est.pitch_x)
    l2, ok_l2 = samples(0, -2 * est.pitch_x)

    col_pred = np.where(ok_a1 & ok_a2, 2.0 * a1 - a2, np.where(ok_a1, a1, np.nan))
    row_pred = np.where(ok_l1 & ok_l2, 2.0 * l1 - l2, np.where(ok_l1, l1, np.nan))
    both = np.stack([col_pred, row_pred])
    have = ~np.isnan(both)
    counts = have.sum(axis=0)
    pred = np.where(counts > 0, np.nansum(both, axis=0) / np.maximum(counts, 1), np.nan)

    out = img.copy()
    missing = counts == 0
    if missing.any():
        base = inpaint_local(req, cfg.local).image
        out[mask] = base[mask]
    values = np.clip(np.rint(pred), 0, 255)
    good = ~missing
    out[ys[good], xs[good]] = values[good].astype(img.dtype)
    return InpaintResult(out, "lattice", time.perf_counter() - t0, True)


def inpaint_oracle(req: InpaintRequest, truth_image) -> InpaintResult:
    """Degenerate reference substrate: paste ground truth into the mask."""
    t0 = time.perf_counter()
    truth = np.asarray(truth_image)
    img = np.asarray(req.image)
    if truth.shape != img.shape:
        raise ValueError("truth image must match request dimensions")
    out = img.copy()
    mask = np.asarray(req.mask, dtype=bool)
    out[mask] = truth[mask]
    return InpaintResult(out, "oracle", time.perf_counter() - t0, True)


_ITEM_RE = re.compile(r"^item_(\d{3})_image\.png$")


def run_external(
    case_dir,
    command,
    timeout: float,
    poll_interval: float = 0.1,
) -> list[InpaintResult]:
    """Run an external in-painter over a case directory and validate results.

    The command is invoked as `<command> <case_dir>` and must write
    `item_{NNN}_result.png` for every `item_{NNN}_image.png`.  Results are
    checked for matching dimensions and for unmasked pixels unchanged
    within 2 gray levels (external models may re-encode).  Child output is
    captured into external_stdout.log / external_stderr.log alongside the
    case files.
    """
    case_dir = Path(case_dir)
    indices = sorted(
        int(m.group(1)) for p in case_dir.iterdir() if (m := _ITEM_RE.match(p.name))
    )
    if not indices:
        raise ValueError(f"no item_NNN_image.png files in {case_dir}")
    t0 = time.perf_counter()
    argv = [str(a) for a in command] + [str(case_dir)]
    with open(case_dir / "external_stdout.log", "wb") as out_log, open(
        case_dir / "external_stderr.log", "wb"
    ) as err_log:
        proc = subprocess.Popen(argv, stdout=out_log, stderr=err_log)
        try:
            while True:
                code = proc.poll()
                if code is not None:
                    break
                if time.perf_counter() - t0 > timeout:
                    proc.kill()
                    proc.wait()
                    raise ExternalTimeoutError(f"{argv[0]} exceeded {timeout}s")
                if all(
                    (case_dir / f"item_{i:03d}_result.png").exists() for i in indices
                ):
                    # results complete; give the writer one poll to finish
                    time.sleep(poll_interval)
                    code = proc.poll()
                    break
                time.sleep(poll_interval)
        finally:
            if proc.poll() is None:
                proc.terminate()
                try:
                    proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()
    missing = [i for i in indices if not (case_dir / f"item_{i:03d}_result.png").exists()]
    if missing:
        raise MissingResultError(missing[0])
    if code not in (0, None):
        raise ExternalCommandError(f"{argv[0]} exited with status {code}")
    elapsed = time.perf_counter() - t0
    name = Path(str(command[0])).name
    results = []
    for i in indices:
        image = load_gray(case_dir / f"item_{i:03d}_image.png")
        mask = load_gray(case_dir / f"item_{i:03d}_mask.png") > 127
        result = load_gray(case_dir / f"item_{i:03d}_result.png")
        if result.shape != image.shape:
            raise DimensionMismatchError(i)
        diff = np.abs(result.astype(np.int16) - image.astype(np.int16))
        worst = int(diff[~mask].max()) if (~mask).any() else 0
        if worst > 2:
            raise UnmaskedPixelsModifiedError(i, worst)
        results.append(
            InpaintResult(result, f"external:{name}", elapsed / len(indices), True)
        )
    return results
