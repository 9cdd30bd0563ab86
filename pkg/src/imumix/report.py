"""Plain SVG line plot of a weight trajectory (no plotting dependency)."""

from __future__ import annotations

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def write_trajectory_svg(path, alphas: np.ndarray, names, width: int = 640, height: int = 360) -> None:
    alphas = np.asarray(alphas, dtype=np.float64)
    T, k = alphas.shape
    pad = 40
    lo, hi = 0.0, max(float(alphas.max()) * 1.1, 1.0 / k + 0.05)

    def xy(t, a):
        x = pad + (width - 2 * pad) * (t / max(T - 1, 1))
        y = height - pad - (height - 2 * pad) * (a - lo) / (hi - lo)
        return f"{x:.2f},{y:.2f}"

    stride = max(1, T // 500)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" '
        f'font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">step (1..{T})</text>',
        f'<text x="8" y="{pad - 10}">domain weight (0..{hi:.3f})</text>',
    ]
    for i in range(k):
        pts = " ".join(xy(t, alphas[t, i]) for t in range(0, T, stride))
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 110}" y="{pad + 14 * i}" fill="{color}">{names[i]}: '
                     f'{alphas[:, i].mean():.4f}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
