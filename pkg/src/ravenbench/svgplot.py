"""Minimal deterministic SVG emission for psychometric curves and error grids.

Hand-rolled markup keeps output bytes identical across runs; a plotting
library would embed hashed ids and version-dependent structure.
"""

from __future__ import annotations

import numpy as np

from ravenbench.psychfit import GUESS_RATE, PsychPosterior, TrialBlock

_COLORS = ("#2c6fbb", "#c23b22", "#3a8f5f", "#8456a8")


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    )
    return "\n".join([head, *body, "</svg>"]) + "\n"


def _fmt(value: float) -> str:
    return f"{value:.2f}"


class _Axes:
    """Maps (rank, probability) data coordinates onto the pixel frame."""

    def __init__(self, x_range, width=640, height=420, margin=56):
        self.width = width
        self.height = height
        self.margin = margin
        self.x_lo, self.x_hi = x_range

    def x(self, v: float) -> float:
        frac = (v - self.x_lo) / (self.x_hi - self.x_lo)
        return self.margin + frac * (self.width - 2 * self.margin)

    def y(self, p: float) -> float:
        return self.height - self.margin - p * (self.height - 2 * self.margin)

    def frame(self, title: str) -> list[str]:
        parts = [
            f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="white"/>',
            f'<text x="{self.width / 2:.1f}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{title}</text>',
        ]
        x0, y0 = self.margin, self.height - self.margin
        x1, y1 = self.width - self.margin, self.margin
        parts.append(
            f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black" stroke-width="1"/>'
        )
        parts.append(
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black" stroke-width="1"/>'
        )
        for p in (0.0, 0.25, 0.5, 0.75, 1.0):
            parts.append(
                f'<text x="{x0 - 8}" y="{self.y(p) + 4:.1f}" text-anchor="end" '
                f'font-family="sans-serif" font-size="11">{p:.2f}</text>'
            )
        for rank in range(int(self.x_lo), int(self.x_hi) + 1):
            parts.append(
                f'<text x="{self.x(rank):.1f}" y="{y0 + 18}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="11">{rank}</text>'
            )
        parts.append(
            f'<text x="{(x0 + x1) / 2:.1f}" y="{self.height - 12}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">item difficulty rank</text>'
        )
        return parts


def _psi_band(posterior: PsychPosterior, xs: np.ndarray, lo=0.025, hi=0.975):
    """Pointwise posterior quantile band of the psychometric curve."""
    m = posterior.m_grid[:, None, None]
    s = posterior.s_grid[None, :, None]
    lap = posterior.lapse_grid[None, None, :]
    weights = posterior.mass.ravel()
    los, his, meds = [], [], []
    for x in xs:
        p = GUESS_RATE + (1.0 - GUESS_RATE - lap) / (1.0 + np.exp(-(m - x) / s))
        values = p.ravel()
        order = np.argsort(values)
        cw = np.cumsum(weights[order])
        cw /= cw[-1]
        los.append(values[order][np.searchsorted(cw, lo)])
        his.append(values[order][min(np.searchsorted(cw, hi), len(order) - 1)])
        meds.append(values[order][np.searchsorted(cw, 0.5)])
    return np.array(los), np.array(his), np.array(meds)


def render_psych_plot(
    curves: list[tuple[str, list[TrialBlock], PsychPosterior | None]],
    title: str = "psychometric fit",
) -> str:
    """One SVG with empirical points, fitted curves and credible bands.

    `curves` holds (label, trial blocks, posterior-or-None) per substrate.
    """
    ranks = [b.x for _, blocks, _ in curves for b in blocks]
    x_lo, x_hi = min(ranks) - 0.5, max(ranks) + 0.5
    ax = _Axes((x_lo, x_hi))
    body = ax.frame(title)
    xs = np.linspace(x_lo, x_hi, 49)
    for ci, (label, blocks, posterior) in enumerate(curves):
        color = _COLORS[ci % len(_COLORS)]
        if posterior is not None:
            band_lo, band_hi, median = _psi_band(posterior, xs)
            pts_up = [f"{ax.x(x):.2f},{ax.y(v):.2f}" for x, v in zip(xs, band_hi)]
            pts_dn = [f"{ax.x(x):.2f},{ax.y(v):.2f}" for x, v in zip(xs[::-1], band_lo[::-1])]
            body.append(
                f'<polygon points="{" ".join(pts_up + pts_dn)}" fill="{color}" '
                f'fill-opacity="0.18" stroke="none"/>'
            )
            pts = [f"{ax.x(x):.2f},{ax.y(v):.2f}" for x, v in zip(xs, median)]
            body.append(
                f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="2"/>'
            )
        for b in blocks:
            if b.n:
                body.append(
                    f'<circle cx="{ax.x(b.x):.2f}" cy="{ax.y(b.k / b.n):.2f}" r="3.5" '
                    f'fill="{color}"/>'
                )
        body.append(
            f'<text x="{ax.width - ax.margin}" y="{ax.margin + 16 * ci}" text-anchor="end" '
            f'font-family="sans-serif" font-size="12" fill="{color}">{label}</text>'
        )
    body.append(
        f'<line x1="{ax.margin}" y1="{ax.y(0.5):.2f}" x2="{ax.width - ax.margin}" '
        f'y2="{ax.y(0.5):.2f}" stroke="#999999" stroke-dasharray="4 3" stroke-width="1"/>'
    )
    return _svg(ax.width, ax.height, body)


def render_error_grid(counts: np.ndarray, title: str = "response grid") -> str:
    """Heat table of the items x options response counts (grayscale)."""
    counts = np.asarray(counts)
    n_items, n_options = counts.shape
    cell = 34
    margin = 60
    width = margin * 2 + n_options * cell
    height = margin * 2 + n_items * cell
    body = [
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="28" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{title}</text>',
    ]
    top = counts.max() if counts.size else 0
    for i in range(n_items):
        for j in range(n_options):
            frac = counts[i, j] / top if top else 0.0
            shade = int(round(255 - 215 * frac))
            x = margin + j * cell
            y = margin + i * cell
            body.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},{shade})" stroke="#cccccc" stroke-width="0.5"/>'
            )
            tone = "black" if frac < 0.55 else "white"
            body.append(
                f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="11" fill="{tone}">{counts[i, j]}</text>'
            )
    body.append(
        f'<text x="{margin + n_options * cell / 2:.1f}" y="{margin - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">options by decreasing reference frequency</text>'
    )
    body.append(
        f'<text x="18" y="{margin + n_items * cell / 2:.1f}" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 18 {margin + n_items * cell / 2:.1f})" '
        f'text-anchor="middle">items by decreasing reference success</text>'
    )
    return _svg(width, height, body)
