"""Raster images, field-of-view handling and Gaussian scale-space primitives.

Images are plain numpy arrays: RGB rasters are float64 ``(H, W, 3)`` arrays with
intensities in [0, 1]; gray planes are float64 ``(H, W)`` arrays.  Row index is
``y``, column index is ``x``.
"""

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import png
from scipy import ndimage

from ._validation import (
    EmptyMaskError,
    ImageDecodeError,
    check_gray,
    check_positive,
    check_rgb,
    check_seed,
)

DEFAULT_TRUNCATION = 4.0
DEFAULT_FOV_THRESHOLD = 0.06


@dataclass(frozen=True)
class ScaleSpaceParams:
    sigmas: tuple = (1.0, 1.41, 2.0, 2.83, 4.0)
    truncation_radius: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        if not sigmas:
            raise ValueError("at least one scale is required")
        if any(s <= 0 for s in sigmas):
            raise ValueError("sigmas must be > 0")
        if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
            raise ValueError("sigmas must be strictly increasing")
        if self.truncation_radius < 3:
            raise ValueError("truncation_radius must be >= 3")
        object.__setattr__(self, "sigmas", sigmas)


@dataclass(frozen=True, eq=False)
class FovMask:
    """Boolean field-of-view plane with its tight bounding box.

    ``bbox`` is ``(x0, y0, x1, y1)`` with exclusive upper bounds, so
    ``mask[y0:y1, x0:x1]`` is the tight crop.
    """

    mask: np.ndarray
    bbox: tuple = field(init=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError("FOV mask must be 2-D")
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise EmptyMaskError("field-of-view mask is empty")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(
            self, "bbox", (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
        )

    @classmethod
    def full(cls, shape):
        return cls(np.ones(shape[:2], dtype=bool))

    @property
    def shape(self):
        return self.mask.shape

    def eroded(self, pixels):
        """Shrink the mask by ``pixels`` (Euclidean distance to the outside).

        Image borders do not count as outside. Returns ``self`` unchanged when
        erosion would empty the mask.
        """
        if pixels <= 0 or self.mask.all():
            return self
        padded = np.pad(self.mask, 1, mode="edge")
        dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
        core = dist > pixels
        if not core.any():
            return self
        return FovMask(core)


class Patch(NamedTuple):
    x: int
    y: int
    data: np.ndarray


# ---------------------------------------------------------------------------
# I/O


def _normalize(raw, maxval):
    arr = np.asarray(raw, dtype=np.float64) / float(maxval)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def _read_png(path):
    try:
        reader = png.Reader(filename=str(path))
        width, height, rows, info = reader.asDirect()
        data = np.vstack([np.asarray(r, dtype=np.uint32) for r in rows])
    except (png.FormatError, png.ChunkError, zlib.error, EOFError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode PNG {path}: {exc}") from exc
    planes = info["planes"]
    if width < 1 or height < 1 or data.size == 0:
        raise ImageDecodeError(f"zero-sized image: {path}")
    data = data.reshape(height, width, planes)
    if info.get("alpha"):
        data = data[:, :, :-1]
    if data.shape[2] == 1:
        data = data[:, :, 0]
    return _normalize(data, 2 ** info["bitdepth"] - 1)


def _read_ppm(path):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 2
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageDecodeError(f"truncated PPM header: {path}")
        tokens.append(raw[start:pos])
    pos += 1
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageDecodeError(f"malformed PPM header: {path}") from exc
    if width < 1 or height < 1:
        raise ImageDecodeError(f"zero-sized image: {path}")
    if not 0 < maxval < 65536:
        raise ImageDecodeError(f"unsupported PPM maxval {maxval}: {path}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * 3 * dtype.itemsize
    body = raw[pos : pos + need]
    if len(body) < need:
        raise ImageDecodeError(f"truncated PPM data: {path}")
    data = np.frombuffer(body, dtype=dtype).reshape(height, width, 3)
    return _normalize(data, maxval)


def load_image(path):
    """Read an 8- or 16-bit RGB PNG or binary PPM (P6) into a float RGB raster.

    Intensities are divided by the bit-depth maximum (or the PPM maxval).
    Grayscale PNGs are replicated to three channels; alpha is dropped.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
    except OSError as exc:
        raise ImageDecodeError(f"cannot read {path}: {exc}") from exc
    if magic.startswith(b"\x89PNG"):
        img = _read_png(path)
    elif magic.startswith(b"P6"):
        img = _read_ppm(path)
    else:
        raise ImageDecodeError(f"unsupported image format: {path}")
    return np.clip(img, 0.0, 1.0)


def save_png(path, img, bitdepth=8):
    """Write an RGB raster (or a gray plane) as PNG, rounding to ``bitdepth``."""
    arr = np.asarray(img, dtype=np.float64)
    maxval = 2**bitdepth - 1
    q = np.rint(np.clip(arr, 0.0, 1.0) * maxval).astype(np.uint16 if bitdepth > 8 else np.uint8)
    greyscale = q.ndim == 2
    h, w = q.shape[:2]
    writer = png.Writer(w, h, greyscale=greyscale, bitdepth=bitdepth)
    with open(path, "wb") as fh:
        writer.write(fh, q.reshape(h, -1))


def to_green(img):
    """Green channel of an RGB raster, the plane used by the vessel metrics."""
    return check_rgb(img)[:, :, 1].copy()


# ---------------------------------------------------------------------------
# Field of view


def detect_fov(img, luminance_threshold=DEFAULT_FOV_THRESHOLD):
    """Threshold the channel mean and keep the largest connected component."""
    if not 0.0 < luminance_threshold < 1.0:
        raise ValueError("luminance_threshold must lie in (0, 1)")
    img = check_rgb(img)
    bright = img.mean(axis=2) > luminance_threshold
    labels, n = ndimage.label(bright)
    if n == 0:
        raise EmptyMaskError("no pixel above the luminance threshold")
    sizes = np.bincount(labels.ravel())[1:]
    return FovMask(labels == (int(np.argmax(sizes)) + 1))


def _resize_axis(arr, n_out, axis):
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    # half-pixel centres, clamped at the edges
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    shape = [1] * arr.ndim
    shape[axis] = n_out
    w1 = w1.reshape(shape)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    return a * (1.0 - w1) + b * w1


def crop_resize(img, mask, target=512):
    """Crop to the FOV bounding box, then bilinearly resample to ``target`` squared."""
    if target < 16:
        raise ValueError("target must be >= 16")
    img = check_rgb(img)
    if mask.shape != img.shape[:2]:
        raise ValueError("mask and image dimensions differ")
    x0, y0, x1, y1 = mask.bbox
    crop = img[y0:y1, x0:x1]
    out = _resize_axis(_resize_axis(crop, target, 0), target, 1)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Gaussian scale space


def gaussian_kernel(sigma, order, truncation_radius=DEFAULT_TRUNCATION):
    """Sampled Gaussian (derivative) kernel in correlation form.

    Returned ``k`` has length ``2r+1`` with ``out(x) = sum_j k[r+j] f(x+j)``.
    Kernels are normalized so that a constant, a unit ramp and ``x**2/2`` give
    exactly the response 1 for orders 0, 1 and 2 respectively.
    """
    r = int(math.ceil(truncation_radius * sigma))
    j = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (j / sigma) ** 2)
    g0 = g / g.sum()
    if order == 0:
        return g0
    if order == 1:
        k = j * g
        return k / np.sum(j * k)
    if order == 2:
        k = (j**2 - sigma**2) * g
        k = k - k.sum() * g0
        return k / np.sum(0.5 * j**2 * k)
    raise ValueError("derivative order must be 0, 1 or 2")


def _correlate_axis(arr, kernel, axis, parity):
    # Symmetric-pair accumulation: results are exactly mirror-equivariant,
    # which makes 90-degree rotations commute bit-for-bit with the filters.
    r = kernel.size // 2
    n = arr.shape[axis]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    padded = np.pad(arr, pad, mode="symmetric")

    def window(offset):
        idx = [slice(None)] * arr.ndim
        idx[axis] = slice(r + offset, r + offset + n)
        return padded[tuple(idx)]

    if parity == 0:
        out = kernel[r] * window(0)
    else:
        out = np.zeros_like(arr)
    for j in range(1, r + 1):
        if parity == 0:
            out += kernel[r + j] * (window(j) + window(-j))
        else:
            out += kernel[r + j] * (window(j) - window(-j))
    return out


def _separable(img, sigma, dx, dy, truncation_radius):
    kx = gaussian_kernel(sigma, dx, truncation_radius)
    ky = gaussian_kernel(sigma, dy, truncation_radius)

    def x_then_y():
        return _correlate_axis(_correlate_axis(img, kx, 1, dx % 2), ky, 0, dy % 2)

    def y_then_x():
        return _correlate_axis(_correlate_axis(img, ky, 0, dy % 2), kx, 1, dx % 2)

    # higher-order axis first; equal orders average both so x<->y swaps are exact
    if dx > dy:
        return x_then_y()
    if dy > dx:
        return y_then_x()
    return 0.5 * (x_then_y() + y_then_x())


def gaussian_derivative(img, sigma, dx=0, dy=0, truncation_radius=DEFAULT_TRUNCATION):
    """Gaussian derivative of a gray plane of order ``dx`` in x and ``dy`` in y.

    Separable correlation with sampled kernels of radius
    ``ceil(truncation_radius * sigma)`` and symmetric (reflect) borders.
    ``dx = dy = 0`` is a plain Gaussian blur.
    """
    img = check_gray(img)
    sigma = check_positive(sigma, "sigma")
    if dx not in (0, 1, 2) or dy not in (0, 1, 2) or dx + dy > 2:
        raise ValueError("need dx, dy in {0, 1, 2} with dx + dy <= 2")
    if truncation_radius < 3:
        raise ValueError("truncation_radius must be >= 3")
    return _separable(img, sigma, dx, dy, truncation_radius)


def gaussian_blur(img, sigma, truncation_radius=DEFAULT_TRUNCATION):
    """Blur a gray plane or every channel of an RGB raster."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        return np.stack(
            [gaussian_derivative(arr[:, :, c], sigma, 0, 0, truncation_radius) for c in range(arr.shape[2])],
            axis=2,
        )
    return gaussian_derivative(arr, sigma, 0, 0, truncation_radius)


def hessian_at_scale(img, sigma, truncation_radius=DEFAULT_TRUNCATION):
    """Scale-normalized Hessian planes ``(Ixx, Ixy, Iyy)``, each multiplied by sigma**2."""
    img = check_gray(img)
    s2 = check_positive(sigma, "sigma") ** 2
    ixx = gaussian_derivative(img, sigma, 2, 0, truncation_radius)
    ixy = gaussian_derivative(img, sigma, 1, 1, truncation_radius)
    iyy = gaussian_derivative(img, sigma, 0, 2, truncation_radius)
    return s2 * ixx, s2 * ixy, s2 * iyy


# ---------------------------------------------------------------------------
# Patches


def extract_patches(img, size, count, seed):
    """Sample ``count`` square patches with origins uniform over all valid positions."""
    arr = np.asarray(img)
    h, w = arr.shape[:2]
    if size < 1 or size > min(h, w):
        raise ValueError(f"patch size {size} exceeds image {w}x{h}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = check_seed(seed)
    xs = rng.integers(0, w - size + 1, size=count)
    ys = rng.integers(0, h - size + 1, size=count)
    return [Patch(int(x), int(y), arr[y : y + size, x : x + size].copy()) for x, y in zip(xs, ys)]
