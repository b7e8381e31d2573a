"""Bundled synthetic problems (deterministic, no files needed)."""

import numpy as np

from .imaging import Grid, Image, fit_spline
from .registration import RegistrationProblem, rotation_about, transform
from .superres import generate_problem, random_transforms


def _blob(x, y, cx, cy, s):
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))


def _box(x, y, x0, x1, y0, y1, soft):
    sx = 1 / (1 + np.exp(-(x - x0) / soft)) - 1 / (1 + np.exp(-(x - x1) / soft))
    sy = 1 / (1 + np.exp(-(y - y0) / soft)) - 1 / (1 + np.exp(-(y - y1) / soft))
    return sx * sy


def registration_phantom(n=32):
    """Asymmetric arrangement of blobs and a bar on a dark background."""
    g = Grid.for_shape(n, n)
    x, y = g.points[:, 0], g.points[:, 1]
    f = (0.9 * _blob(x, y, 0.30, 0.32, 0.07) + 0.6 * _blob(x, y, 0.68, 0.62, 0.05)
         + 0.45 * _box(x, y, 0.45, 0.80, 0.22, 0.34, 0.02)
         + 0.35 * _blob(x, y, 0.35, 0.72, 0.04))
    return Image(g, np.clip(f, 0, 1))


def rotated_pair(n=32, angle_deg=60.0, shift=(0.0, 0.0), lam=0.0):
    """Template is the phantom; the reference samples its spline under a
    rotation about the image centre, so ``w_true`` has zero residual."""
    tmpl = registration_phantom(n)
    w_true = rotation_about(np.deg2rad(angle_deg), (0.5, 0.5), shift)
    s = fit_spline(tmpl, 0.0)
    ref = Image(tmpl.grid, s(transform(w_true, tmpl.grid.points)))
    return RegistrationProblem(tmpl, ref, lam), w_true


def gaussian_translation_pair(n=32, shift=(0.05, -0.03), sigma=0.12):
    """Smooth blob and its analytically translated copy."""
    g = Grid.for_shape(n, n)
    x, y = g.points[:, 0], g.points[:, 1]
    tmpl = Image(g, _blob(x, y, 0.5, 0.5, sigma))
    ref = Image(g, _blob(x + shift[0], y + shift[1], 0.5, 0.5, sigma))
    w_true = np.array([1.0, 0.0, shift[0], 0.0, 1.0, shift[1]])
    return RegistrationProblem(tmpl, ref), w_true


def superres_phantom(n=20):
    """Fine reference for the super-resolution problem."""
    g = Grid.for_shape(n, n)
    x, y = g.points[:, 0], g.points[:, 1]
    f = (_blob(x, y, 0.35, 0.40, 0.10) + 0.7 * _blob(x, y, 0.65, 0.70, 0.07)
         + 0.5 * _box(x, y, 0.45, 0.75, 0.20, 0.40, 0.01))
    return Image(g, f / f.max())


def superres_problem(seed=0, n=20, k=2, q=3, noise_sigma=0.0, max_angle_deg=10.0, max_shift=0.05):
    """20x20 reference, four 10x10 templates, 18 unknown parameters."""
    ref = superres_phantom(n)
    w_true = random_transforms(q, seed, max_angle_deg, max_shift)
    return generate_problem(ref, w_true, k, noise_sigma, seed)
