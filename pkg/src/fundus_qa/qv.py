"""Qv no-reference quality score: vesselness-weighted local gradient coherence."""

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_gray, check_odd_window, check_rgb
from .raster import DEFAULT_FOV_THRESHOLD, FovMask, ScaleSpaceParams, detect_fov, gaussian_derivative, to_green
from .vesselness import DEFAULT_FOV_EROSION, DEFAULT_VESSEL_THRESHOLD, FrangiParams, frangi_vesselness

EPS = 1e-12
DEFAULT_WINDOW = 15
GRADIENT_SIGMA = 1.0


@dataclass(frozen=True)
class QvReport:
    score: float
    vessel_pixel_count: int
    params_fingerprint: str


def gradient_planes(green, gradient_sigma=GRADIENT_SIGMA):
    green = check_gray(green, "green")
    return (gaussian_derivative(green, gradient_sigma, 1, 0),
            gaussian_derivative(green, gradient_sigma, 0, 1))


def local_svd_anisotropy(green, window=DEFAULT_WINDOW, gradient_sigma=GRADIENT_SIGMA):
    """Coherence ``(s1 - s2) / (s1 + s2)`` of the gradients inside each window.

    ``s1 >= s2`` are the singular values of the ``n x 2`` matrix stacking the
    gradient vectors of the ``window x window`` neighbourhood (mirrored at the
    borders).  They follow in closed form from the 2x2 Gram matrix, whose
    entries are box sums of ``gx**2``, ``gx*gy`` and ``gy**2``.
    Pixels with ``s1 + s2 < 1e-12`` get 0.
    """
    green = check_gray(green, "green")
    window = check_odd_window(window, green.shape)
    gx, gy = gradient_planes(green, gradient_sigma)
    n = window * window
    sxx = ndimage.uniform_filter(gx * gx, window, mode="reflect") * n
    sxy = ndimage.uniform_filter(gx * gy, window, mode="reflect") * n
    syy = ndimage.uniform_filter(gy * gy, window, mode="reflect") * n
    half_trace = 0.5 * (sxx + syy)
    root = np.sqrt((0.5 * (sxx - syy)) ** 2 + sxy**2)
    s1 = np.sqrt(np.maximum(half_trace + root, 0.0))
    s2 = np.sqrt(np.maximum(half_trace - root, 0.0))
    total = s1 + s2
    out = np.zeros_like(green)
    ok = total >= EPS
    out[ok] = (s1[ok] - s2[ok]) / total[ok]
    return np.clip(out, 0.0, 1.0)


def params_fingerprint(params, window):
    text = f"{params.key()};window={window}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def qv_score(img, params=None, window=DEFAULT_WINDOW, mask=None,
             fov_threshold=DEFAULT_FOV_THRESHOLD, fov_erosion=DEFAULT_FOV_EROSION):
    """Qv score of an RGB fundus image.

    ``score = sum(V * A) / sum(V)`` over FOV pixels, with ``V`` the Frangi
    vesselness of the green channel (used as soft weights) and ``A`` the local
    SVD anisotropy.  The FOV is detected when ``mask`` is not given and eroded
    by ``fov_erosion`` pixels.  ``vessel_pixel_count`` counts FOV pixels with
    ``V >= DEFAULT_VESSEL_THRESHOLD`` (0.05).
    """
    params = params or FrangiParams()
    img = check_rgb(img)
    if mask is None:
        mask = detect_fov(img, fov_threshold)
    elif not isinstance(mask, FovMask):
        mask = FovMask(mask)
    inside = mask.eroded(fov_erosion).mask
    green = to_green(img)
    if params.bright_ridges:
        green = 1.0 - green
    vmap = frangi_vesselness(green, params)
    aniso = local_svd_anisotropy(green, window)
    fingerprint = params_fingerprint(params, window)
    weights = vmap[inside]
    total = float(np.sum(weights))
    if total < EPS:
        return QvReport(0.0, 0, fingerprint)
    score = float(np.sum(weights * aniso[inside]) / total)
    count = int(np.count_nonzero(weights >= DEFAULT_VESSEL_THRESHOLD))
    return QvReport(min(max(score, 0.0), 1.0), count, fingerprint)


class QvScorer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`qv_score`.

    The metric needs no training; ``fit`` only validates parameters.
    ``score_samples`` returns one score per image and ``transform`` the same
    values as a column.
    """

    def __init__(self, sigmas=(1.0, 1.41, 2.0, 2.83, 4.0), beta=0.5, c=15.0, window=DEFAULT_WINDOW,
                 fov_threshold=DEFAULT_FOV_THRESHOLD, fov_erosion=DEFAULT_FOV_EROSION):
        self.sigmas = sigmas
        self.beta = beta
        self.c = c
        self.window = window
        self.fov_threshold = fov_threshold
        self.fov_erosion = fov_erosion

    def _params(self):
        return FrangiParams(scales=ScaleSpaceParams(tuple(self.sigmas)), beta=self.beta, c=self.c)

    def fit(self, X=None, y=None):
        self.params_ = self._params()
        return self

    def report(self, img, mask=None):
        return qv_score(img, self._params(), self.window, mask, self.fov_threshold, self.fov_erosion)

    def score_samples(self, X):
        return np.array([self.report(img).score for img in X])

    def transform(self, X):
        return self.score_samples(X)[:, None]
