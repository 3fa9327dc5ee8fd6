"""Synthetic fundus-like fixtures with known vessel masks.

The renders are not anatomically faithful; they only need the structures the
metrics look at: a circular field of view with vignetting, an optic disc, a
darker macula, low-frequency background texture and a branching tree of dark
vessels whose widths shrink towards the periphery.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import check_seed
from .raster import FovMask, gaussian_blur

BASE_COLOR = np.array([0.78, 0.40, 0.20])
VESSEL_DEPTH = np.array([0.18, 0.55, 0.35])


@dataclass
class SyntheticFundus:
    image: np.ndarray
    clean: np.ndarray
    vessels: np.ndarray
    fov: FovMask
    noise_seed: int


def _segments(rng, size, disc):
    """Random branching polylines as (x0, y0, x1, y1, width) rows."""
    scale = size / 512.0
    out = []
    base = rng.uniform(0, 2 * math.pi)
    stack = [
        [disc[0], disc[1], base + k * math.pi / 2 + rng.normal(0, 0.3), rng.uniform(4.5, 6.0) * scale, 0]
        for k in range(4)
    ]
    centre = size / 2.0
    radius = 0.47 * size
    step = 4.0 * scale
    while stack:
        x, y, angle, width, depth = stack.pop()
        curvature = rng.normal(0, 0.02)
        length = rng.uniform(0.25, 0.45) * size / (1 + 0.5 * depth)
        travelled = 0.0
        while travelled < length:
            curvature = 0.9 * curvature + rng.normal(0, 0.015)
            angle += curvature
            nx, ny = x + step * math.cos(angle), y + step * math.sin(angle)
            if math.hypot(nx - centre, ny - centre) > radius:
                break
            out.append((x, y, nx, ny, width))
            x, y = nx, ny
            travelled += step
            if depth < 3 and width > 1.6 * scale and rng.uniform() < 0.025:
                side = 1 if rng.uniform() < 0.5 else -1
                stack.append([x, y, angle + side * rng.uniform(0.5, 1.0), width * 0.7, depth + 1])
                width *= 0.85
    return np.array(out, dtype=np.float64).reshape(-1, 5)


def _vessel_profile(size, segments):
    """Per-pixel vessel darkness profile in [0, 1] and the binary vessel mask."""
    profile = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=bool)
    for x0, y0, x1, y1, w in segments:
        reach = int(math.ceil(w * 1.5)) + 1
        xa, xb = int(max(0, min(x0, x1) - reach)), int(min(size, max(x0, x1) + reach + 1))
        ya, yb = int(max(0, min(y0, y1) - reach)), int(min(size, max(y0, y1) + reach + 1))
        if xa >= xb or ya >= yb:
            continue
        yy, xx = np.mgrid[ya:yb, xa:xb]
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        dist = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
        sigma = w / 2.5
        np.maximum(profile[ya:yb, xa:xb], np.exp(-0.5 * (dist / sigma) ** 2), out=profile[ya:yb, xa:xb])
        mask[ya:yb, xa:xb] |= dist <= w / 2.0
    return profile, mask


def make_fundus(size=512, seed=0, noise=0.025, texture=0.03):
    """Render one seeded fundus-like RGB image with its vessel mask and FOV."""
    rng = check_seed(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r = np.hypot(xx - c, yy - c) / (0.48 * size)
    fov = r <= 1.0

    side = 1 if rng.uniform() < 0.5 else -1
    disc = (c + side * 0.27 * size + rng.normal(0, 0.02 * size), c + rng.normal(0, 0.03 * size))
    macula = (c - side * 0.05 * size, c + rng.normal(0, 0.02 * size))

    tone = BASE_COLOR * rng.uniform(0.9, 1.1, size=3)
    vignette = 1.0 - 0.35 * r**2
    img = tone[None, None, :] * vignette[:, :, None]

    tex = ndimage.gaussian_filter(rng.normal(size=(size, size)), 6.0 * size / 512, mode="reflect")
    tex /= tex.std() + 1e-12
    img = img * (1.0 + texture * tex[:, :, None])

    disc_r = 0.07 * size
    d2 = ((xx - disc[0]) ** 2 + (yy - disc[1]) ** 2) / disc_r**2
    img = img + np.array([0.2, 0.35, 0.25]) * np.exp(-0.5 * d2 * 2.0)[:, :, None]
    m2 = ((xx - macula[0]) ** 2 + (yy - macula[1]) ** 2) / (0.09 * size) ** 2
    img = img * (1.0 - 0.25 * np.exp(-0.5 * m2))[:, :, None]

    profile, vessels = _vessel_profile(size, _segments(rng, size, disc))
    img = img * (1.0 - VESSEL_DEPTH[None, None, :] * profile[:, :, None])

    fov = FovMask(fov)
    clean = np.clip(np.where(fov.mask[:, :, None], img, 0.0), 0.0, 1.0)
    noise_seed = int(rng.integers(2**63))
    image = degrade(clean, noise=noise, seed=noise_seed, fov=fov)
    return SyntheticFundus(image, clean, vessels & fov.mask, fov, noise_seed)


def degrade(img, blur_sigma=0.0, chroma_noise=0.0, noise=0.0, seed=0, fov=None):
    """Simulate an acquisition: optical blur, smooth colour cast noise, sensor noise.

    The steps run in that order, so a blurred copy of a clean render keeps the
    same sensor-noise level as a sharp one.  The FOV (when given) is
    preserved: pixels outside it stay black.
    """
    rng = check_seed(seed)
    out = np.asarray(img, dtype=np.float64)
    if blur_sigma > 0:
        out = gaussian_blur(out, blur_sigma)
    if chroma_noise > 0:
        h, w = out.shape[:2]
        fields = np.stack(
            [ndimage.gaussian_filter(rng.normal(size=(h, w)), max(2.0, h / 64), mode="reflect")
             for _ in range(3)],
            axis=2,
        )
        fields /= fields.std(axis=(0, 1), keepdims=True) + 1e-12
        out = out + chroma_noise * fields
    if noise > 0:
        out = out + rng.normal(0, noise, size=out.shape)
    if fov is not None:
        out = np.where(fov.mask[:, :, None], out, 0.0)
    return np.clip(out, 0.0, 1.0)
