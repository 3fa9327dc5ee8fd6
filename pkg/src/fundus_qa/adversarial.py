"""Evaluators for the conditional adversarial objective and its patch geometry.

The discriminator is never run here: its per-patch probabilities arrive as
arrays (or CSV files) so that any external network can be scored.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import FundusQAError, check_rgb
from .raster import load_image
from .vesselness import load_vessel_tree

DEFAULT_LAMBDA = 100.0
DEFAULT_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """``lambda_l1`` weights the L1 term; probabilities are clamped to
    ``[epsilon_clamp, 1 - epsilon_clamp]`` before taking logs."""

    lambda_l1: float = DEFAULT_LAMBDA
    epsilon_clamp: float = DEFAULT_EPS

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 < self.epsilon_clamp < 0.5:
            raise ValueError("epsilon_clamp must lie in (0, 0.5)")


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    grid_rows: int
    grid_cols: int
    origins: list

    @property
    def axis_origins(self):
        return sorted({x for x, _ in self.origins})


def _axis_origins(image_size, patch_size, grid_dim):
    if grid_dim == 1:
        return [0]
    span = image_size - patch_size
    return [int(math.floor(i * span / (grid_dim - 1) + 0.5)) for i in range(grid_dim)]


def patch_grid(image_size, patch_size, grid_dim):
    """Evenly spaced, overlapping square patches covering both image edges.

    Origins per axis are ``round(i * (image_size - patch_size) / (grid_dim - 1))``
    (half rounds up); ``origins`` lists ``(x, y)`` in row-major order.
    """
    if patch_size < 1 or patch_size > image_size:
        raise ValueError(f"patch size {patch_size} does not fit in image size {image_size}")
    if grid_dim < 1:
        raise ValueError("grid_dim must be >= 1")
    axis = _axis_origins(image_size, patch_size, grid_dim)
    origins = [(x, y) for y in axis for x in axis]
    return PatchGrid(patch_size, grid_dim, grid_dim, origins)


def adversarial_loss(d_real, d_fake, cfg=None):
    """``mean log D(v, r) + mean log(1 - D(v, G(v)))`` over patches.

    Inputs are per-patch probability grids, or stacks of grids for a batch
    (the expectation is the mean over every patch of every field).
    """
    cfg = cfg or LossConfig()
    real = np.asarray(d_real, dtype=np.float64)
    fake = np.asarray(d_fake, dtype=np.float64)
    if real.shape != fake.shape:
        raise ValueError(f"discriminator grids differ in shape: {real.shape} vs {fake.shape}")
    eps = cfg.epsilon_clamp
    real = np.clip(real, eps, 1.0 - eps)
    fake = np.clip(fake, eps, 1.0 - eps)
    return float(np.mean(np.log(real)) + np.mean(np.log1p(-fake)))


def l1_term(r, g):
    """Mean absolute difference over every pixel and channel."""
    r = np.asarray(r, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if r.shape != g.shape:
        raise ValueError(f"image shapes differ: {r.shape} vs {g.shape}")
    return float(np.mean(np.abs(r - g)))


def combined_loss(adv, l1, cfg=None):
    cfg = cfg or LossConfig()
    if l1 < 0:
        raise ValueError("l1 must be >= 0")
    return adv + cfg.lambda_l1 * l1


# ---------------------------------------------------------------------------
# Discriminator fields on disk


def read_discriminator_csv(path):
    """Read a probability grid: header ``rows,cols``, a line with the two
    integers, then the ``rows * cols`` values in row-major order."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2 or [c.strip() for c in rows[0][:2]] != ["rows", "cols"]:
        raise FundusQAError(f"{path}: expected a 'rows,cols' header")
    try:
        n_rows, n_cols = int(rows[1][0]), int(rows[1][1])
        values = [float(c) for r in rows[2:] for c in r if c.strip()]
    except (ValueError, IndexError) as exc:
        raise FundusQAError(f"{path}: malformed discriminator grid") from exc
    if n_rows < 1 or n_cols < 1 or len(values) != n_rows * n_cols:
        raise FundusQAError(f"{path}: expected {n_rows}x{n_cols} values, got {len(values)}")
    grid = np.array(values).reshape(n_rows, n_cols)
    if np.any((grid < 0) | (grid > 1)) or not np.all(np.isfinite(grid)):
        raise FundusQAError(f"{path}: probabilities must lie in [0, 1]")
    return grid


def write_discriminator_csv(path, grid):
    grid = np.asarray(grid, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rows", "cols"])
        w.writerow(grid.shape)
        for row in grid:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Batch scoring


@dataclass
class TripleResult:
    id: str
    l1: float
    adversarial: float
    combined: float
    baseline_discriminator: bool


@dataclass
class TripleScores:
    results: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    lambda_l1: float = DEFAULT_LAMBDA

    def _mean(self, attr):
        vals = [getattr(r, attr) for r in self.results]
        return math.fsum(vals) / len(vals) if vals else math.nan

    @property
    def mean_l1(self):
        return self._mean("l1")

    @property
    def mean_adversarial(self):
        return self._mean("adversarial")

    @property
    def mean_combined(self):
        return self._mean("combined")


def baseline_fields(grid_dim=16):
    """Constant 0.5 discriminator output, the fixed point of the objective."""
    half = np.full((grid_dim, grid_dim), 0.5)
    return half, half


def score_triples(entries, cfg=None, discriminator=None):
    """Evaluate the combined loss for ``(id, vessel_path, retina_path, synthetic_path)`` entries.

    ``discriminator(entry_id)`` may return ``(d_real, d_fake)`` grids; without
    it (or when it returns ``None``) the constant-0.5 baseline is used.  A
    failing entry is recorded in ``errors`` and the batch continues.
    """
    cfg = cfg or LossConfig()
    out = TripleScores(lambda_l1=cfg.lambda_l1)
    for entry_id, v_path, r_path, g_path in entries:
        try:
            r = check_rgb(load_image(r_path), "retina")
            g = check_rgb(load_image(g_path), "synthetic")
            if r.shape != g.shape:
                raise FundusQAError(f"retina {r.shape[:2]} and synthetic {g.shape[:2]} sizes differ")
            if v_path:
                v = load_vessel_tree(v_path)
                if v.shape != r.shape[:2]:
                    raise FundusQAError(f"vessel tree {v.shape} and retina {r.shape[:2]} sizes differ")
            fields = discriminator(entry_id) if discriminator is not None else None
            baseline = fields is None
            d_real, d_fake = baseline_fields() if baseline else fields
            l1 = l1_term(r, g)
            adv = adversarial_loss(d_real, d_fake, cfg)
            out.results.append(TripleResult(entry_id, l1, adv, combined_loss(adv, l1, cfg), baseline))
        except (FundusQAError, OSError, ValueError) as exc:
            out.errors.append({"id": entry_id, "error": str(exc)})
    return out


def fields_from_dir(directory):
    """Discriminator supplier reading ``<id>_real.csv`` / ``<id>_fake.csv``."""
    directory = Path(directory)

    def supply(entry_id):
        real, fake = directory / f"{entry_id}_real.csv", directory / f"{entry_id}_fake.csv"
        if not real.exists() and not fake.exists():
            return None
        return read_discriminator_csv(real), read_discriminator_csv(fake)

    return supply
