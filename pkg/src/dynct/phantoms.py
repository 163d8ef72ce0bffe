"""Built-in test objects.

Shapes are defined in normalised coordinates where ``+-1`` is the edge of
the grid, so every phantom can be rendered at any resolution.
"""
from __future__ import annotations

import numpy as np

from .grid import ImageGrid, center_mesh

# strokes of simple block letters in a unit box (x right, y up)
_GLYPHS = {
    "U": [((0, 1), (0, 0)), ((0, 0), (1, 0)), ((1, 0), (1, 1))],
    "A": [((0, 0), (0.5, 1)), ((0.5, 1), (1, 0)), ((0.25, 0.45), (0.75, 0.45))],
    "N": [((0, 0), (0, 1)), ((0, 1), (1, 0)), ((1, 0), (1, 1))],
    "T": [((0, 1), (1, 1)), ((0.5, 1), (0.5, 0))],
    "W": [((0, 1), (0.25, 0)), ((0.25, 0), (0.5, 0.6)), ((0.5, 0.6), (0.75, 0)), ((0.75, 0), (1, 1))],
    "E": [((0, 0), (0, 1)), ((0, 1), (1, 1)), ((0, 0.5), (0.8, 0.5)), ((0, 0), (1, 0))],
    "R": [((0, 0), (0, 1)), ((0, 1), (1, 1)), ((1, 1), (1, 0.5)), ((1, 0.5), (0, 0.5)), ((0.3, 0.5), (1, 0))],
    "P": [((0, 0), (0, 1)), ((0, 1), (1, 1)), ((1, 1), (1, 0.5)), ((1, 0.5), (0, 0.5))],
}


def _segment_distance(X, Y, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    t = np.clip(((X - ax) * dx + (Y - ay) * dy) / L2, 0.0, 1.0)
    return np.hypot(X - ax - t * dx, Y - ay - t * dy)


def _draw_text(X, Y, text, x0, y0, width, height, gap, half_width):
    mask = np.zeros(X.shape, dtype=bool)
    for k, ch in enumerate(text):
        left = x0 + k * (width + gap)
        for a, b in _GLYPHS[ch]:
            pa = (left + a[0] * width, y0 + a[1] * height)
            pb = (left + b[0] * width, y0 + b[1] * height)
            mask |= _segment_distance(X, Y, pa, pb) <= half_width
    return mask


def logo_phantom(n: int = 256, size: float = 0.5) -> ImageGrid:
    """Binary text-like logo: large "UA" monogram, an underline and a word.

    ``size`` is the fraction of the half-width the layout spans; at the
    default 0.5 all structure lies within radius 0.4 of the centre, so the
    test motions keep it well inside the grid over ten scans and the largest
    per-scan displacement of the rotations stays near 3 pixels.
    """
    X, Y = center_mesh(n)
    X, Y = X / (n / 2.0 * size), Y / (n / 2.0 * size)
    mask = _draw_text(X, Y, "UA", -0.52, 0.02, 0.4, 0.5, 0.24, 0.05)
    mask |= (np.abs(Y + 0.13) <= 0.025) & (np.abs(X) <= 0.56)
    mask |= _draw_text(X, Y, "ANTWERPEN", -0.6, -0.46, 0.1, 0.16, 0.0375, 0.02)
    return ImageGrid(mask.astype(np.float64))


def disk_phantom(n: int, radius: float | None = None, value: float = 1.0) -> ImageGrid:
    X, Y = center_mesh(n)
    r = n / 4.0 if radius is None else radius
    return ImageGrid(np.where(X * X + Y * Y <= r * r, value, 0.0))


def gaussian_mixture(n: int, blobs=None) -> ImageGrid:
    """Sum of isotropic Gaussians ``(x0, y0, sigma, amplitude)`` in pixel units."""
    if blobs is None:
        s = n / 128.0
        blobs = [
            (-18 * s, 10 * s, 9 * s, 1.0),
            (20 * s, -6 * s, 7 * s, 0.8),
            (4 * s, -24 * s, 5 * s, 0.6),
            (-6 * s, 26 * s, 6 * s, 0.5),
        ]
    X, Y = center_mesh(n)
    f = np.zeros((n, n))
    for x0, y0, sig, amp in blobs:
        f += amp * np.exp(-((X - x0) ** 2 + (Y - y0) ** 2) / (2 * sig * sig))
    return ImageGrid(f)


BUILTIN = {"logo": logo_phantom, "builtin": logo_phantom, "disk": disk_phantom, "gaussians": gaussian_mixture}


def builtin_phantom(name: str, n: int) -> ImageGrid:
    try:
        return BUILTIN[name](n)
    except KeyError:
        raise ValueError(f"unknown built-in phantom {name!r}; choose from {sorted(BUILTIN)}") from None
