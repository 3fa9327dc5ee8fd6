"""Image Structure Clustering (ISC) quality metric.

Pipeline: per-pixel colour and Gaussian-derivative features, standardized per
image; k-means clustering into (by default) five structure classes; the
normalized cluster-count histogram of an image goes to a linear SVM whose
margin is mapped to [0, 1] with a Platt sigmoid.
"""

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import FingerprintMismatchError, FundusQAError, check_rgb, check_seed
from .raster import DEFAULT_FOV_THRESHOLD, FovMask, detect_fov, gaussian_derivative

MAGIC = b"ISCM1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class IscFeatureConfig:
    sigmas: tuple = (1.0, 2.0, 4.0)
    derivative_orders: tuple = ((1, 0), (0, 1))
    include_raw_intensity: bool = True

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        orders = tuple((int(dx), int(dy)) for dx, dy in self.derivative_orders)
        if any(s <= 0 for s in sigmas):
            raise ValueError("sigmas must be > 0")
        if any(dx < 0 or dy < 0 or dx + dy > 1 for dx, dy in orders):
            raise ValueError("derivative orders must satisfy dx + dy <= 1")
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "derivative_orders", orders)
        if self.feature_dim == 0:
            raise ValueError("feature configuration selects no features")

    @property
    def feature_dim(self):
        per_channel = int(self.include_raw_intensity) + len(self.sigmas) * len(self.derivative_orders)
        return 3 * per_channel

    def fingerprint(self):
        text = f"isc(sigmas={list(self.sigmas)},orders={list(self.derivative_orders)},raw={self.include_raw_intensity})"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ClusterModel:
    k: int
    centers: np.ndarray
    feature_dim: int
    feature_config_fingerprint: str = ""


@dataclass(frozen=True, eq=False)
class SvmModel:
    weights: np.ndarray
    bias: float
    calibration: tuple = (1.0, 0.0)

    def decision_function(self, histograms):
        return np.asarray(histograms, dtype=np.float64) @ self.weights + self.bias

    def predict_proba(self, histograms):
        slope, intercept = self.calibration
        return _sigmoid(slope * self.decision_function(histograms) + intercept)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Features


def _standardize(features):
    mean = features.mean(axis=0)
    centered = features - mean
    std = np.sqrt(np.mean(centered**2, axis=0))
    out = np.zeros_like(features)
    # exact test for constant columns: their float mean need not be exact
    ok = (features.max(axis=0) > features.min(axis=0)) & (std > 0)
    out[:, ok] = centered[:, ok] / std[ok]
    return out


def extract_isc_features(img, mask, cfg=None, standardize=True):
    """One row per FOV pixel, columns grouped by channel (R, G, B).

    Per channel: the raw intensity (if enabled) followed by the response for
    each ``(sigma, (dx, dy))`` pair in config order.  Columns are standardized
    over the image; zero-variance columns become 0.
    """
    cfg = cfg or IscFeatureConfig()
    img = check_rgb(img)
    if mask is None:
        mask = FovMask.full(img.shape)
    inside = mask.mask if isinstance(mask, FovMask) else np.asarray(mask, dtype=bool)
    if inside.shape != img.shape[:2]:
        raise ValueError("mask and image dimensions differ")
    if not inside.any():
        raise FundusQAError("field of view is empty")
    columns = []
    for ch in range(3):
        plane = img[:, :, ch]
        if cfg.include_raw_intensity:
            columns.append(plane[inside])
        for sigma in cfg.sigmas:
            for dx, dy in cfg.derivative_orders:
                columns.append(gaussian_derivative(plane, sigma, dx, dy)[inside])
    features = np.column_stack(columns)
    return _standardize(features) if standardize else features


# ---------------------------------------------------------------------------
# k-means


def _sq_distances(X, centers):
    d = np.empty((X.shape[0], centers.shape[0]))
    for j, c in enumerate(centers):
        diff = X - c
        d[:, j] = np.einsum("ij,ij->i", diff, diff)
    return d


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = _sq_distances(X, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError(f"data has fewer than {k} distinct points")
        idx = int(np.searchsorted(np.cumsum(closest), rng.uniform() * total, side="right"))
        idx = min(idx, n - 1)
        centers.append(X[idx])
        np.minimum(closest, _sq_distances(X, X[idx][None, :])[:, 0], out=closest)
    return np.array(centers)


def _cluster_means(X, labels, k, old):
    centers = old.copy()
    for j in range(k):
        members = X[labels == j]
        if len(members):
            # shift by a member so identical points average exactly
            ref = members[0]
            centers[j] = ref + (members - ref).mean(axis=0)
    return centers


class KMeans(ClusterMixin, BaseEstimator):
    """Lloyd's k-means with seeded k-means++ initialization.

    Empty clusters are re-seeded at the point farthest from its assigned
    centre.  ``inertia_history_`` holds the inertia after every assignment
    step; it never increases.
    """

    def __init__(self, n_clusters=5, max_iter=300, tol=1e-6, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        k = self.n_clusters
        if X.ndim != 2:
            raise ValueError("X must be 2-D")
        if X.shape[0] < k:
            raise ValueError(f"need at least {k} rows, got {X.shape[0]}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        rng = check_seed(self.random_state)
        centers = _kmeans_pp(X, k, rng)
        history = []
        repairs = 0
        for it in range(1, self.max_iter + 1):
            d = _sq_distances(X, centers)
            labels = np.argmin(d, axis=1)
            history.append(float(d[np.arange(len(X)), labels].sum()))
            counts = np.bincount(labels, minlength=k)
            for j in np.flatnonzero(counts == 0)[:k]:
                far = int(np.argmax(d[np.arange(len(X)), labels]))
                centers[j] = X[far]
                labels[far] = j
                d[far, labels[far]] = 0.0
                repairs += 1
            new = _cluster_means(X, labels, k, centers)
            shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
            centers = new
            if shift < self.tol:
                break
        d = _sq_distances(X, centers)
        self.labels_ = np.argmin(d, axis=1)
        self.inertia_ = float(d[np.arange(len(X)), self.labels_].sum())
        history.append(self.inertia_)
        self.cluster_centers_ = centers
        self.inertia_history_ = history
        self.n_iter_ = it
        self.n_repairs_ = repairs
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.cluster_centers_.shape[1]:
            raise ValueError("feature dimension mismatch")
        return np.argmin(_sq_distances(X, self.cluster_centers_), axis=1)


def kmeans_fit(features, k=5, seed=0, max_iter=300, tol=1e-6, fingerprint=""):
    km = KMeans(k, max_iter, tol, seed).fit(features)
    return ClusterModel(k, km.cluster_centers_, km.cluster_centers_.shape[1], fingerprint)


def isc_histogram(features, model):
    """Fraction of rows nearest to each centre (ties go to the lower index)."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.feature_dim:
        raise ValueError(f"features must have {model.feature_dim} columns")
    if X.shape[0] == 0:
        raise ValueError("no feature rows")
    labels = np.argmin(_sq_distances(X, model.centers), axis=1)
    return np.bincount(labels, minlength=model.k) / X.shape[0]


# ---------------------------------------------------------------------------
# Linear SVM


def _fsum_cols(A):
    return np.array([math.fsum(col) for col in A.T])


def _svm_objective(w, b, X, y, lam):
    margins = y * (X @ w + b)
    hinge = math.fsum(np.maximum(0.0, 1.0 - margins)) / len(y)
    return 0.5 * lam * float(w @ w) + hinge


def _platt(f, y):
    """Fit ``P(y=1|f) = sigmoid(slope*f + intercept)`` by Newton's method.

    Uses the smoothed targets of Platt (1999) with the backtracking scheme of
    Lin, Lin & Weng (2007).
    """
    pos = int(np.sum(y > 0))
    neg = len(y) - pos
    t = np.where(y > 0, (pos + 1.0) / (pos + 2.0), 1.0 / (neg + 2.0))
    a, b = 0.0, math.log((neg + 1.0) / (pos + 1.0))
    # P = 1 / (1 + exp(a*f + b)); slope = -a

    def nll(a, b):
        z = a * f + b
        return float(np.sum(np.logaddexp(0.0, z) - (1.0 - t) * z))

    val = nll(a, b)
    for _ in range(100):
        p = _sigmoid(-(a * f + b))
        q = 1 - p
        d2 = p * q
        h11 = 1e-12 + float(np.sum(f * f * d2))
        h22 = 1e-12 + float(np.sum(d2))
        h21 = float(np.sum(f * d2))
        d1 = t - p
        g1 = float(np.sum(f * d1))
        g2 = float(np.sum(d1))
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= 1e-10:
            na, nb = a + step * da, b + step * db
            nval = nll(na, nb)
            if nval < val + 1e-4 * step * gd:
                a, b, val = na, nb, nval
                break
            step /= 2.0
        else:
            break
    return -a, -b


class LinearSVM(ClassifierMixin, BaseEstimator):
    """Linear SVM trained by full-batch subgradient descent.

    Minimizes ``(1/(2C)) * ||w||**2 + mean(hinge)`` with Pegasos step sizes
    ``C / t`` and keeps the best iterate, so ``objective_history_`` (best value
    after each epoch) is non-increasing.  Gradient sums use ``math.fsum``,
    which makes training invariant to duplicating the whole training set and
    exactly antisymmetric under label flips.  The schedule itself is
    deterministic; ``random_state`` is recorded for interface symmetry with
    the other estimators.  A Platt sigmoid fitted on the training margins
    provides ``predict_proba``.  Labels are 0/1 (or -1/+1).
    """

    def __init__(self, C=1000.0, epochs=2000, random_state=0):
        self.C = C
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y_raw = np.asarray(y)
        if X.ndim != 2 or X.shape[0] != y_raw.shape[0]:
            raise ValueError("X must be 2-D with one row per label")
        classes = np.unique(y_raw)
        if classes.size != 2:
            raise ValueError("training labels must contain both classes")
        if X.shape[0] < 2:
            raise ValueError("need at least two examples")
        self.classes_ = classes
        ys = np.where(y_raw == classes[1], 1.0, -1.0)
        n, dim = X.shape
        lam = 1.0 / self.C
        radius = 1.0 / math.sqrt(lam)
        w = np.zeros(dim)
        b = 0.0
        best = (_svm_objective(w, b, X, ys, lam), w.copy(), b)
        history = []
        for t in range(1, self.epochs + 1):
            eta = 1.0 / (lam * t)
            active = ys * (X @ w + b) < 1.0
            yx = X[active] * ys[active][:, None]
            grad_w = lam * w - _fsum_cols(yx) / n
            grad_b = -math.fsum(ys[active]) / n
            w = w - eta * grad_w
            b = b - eta * grad_b
            norm = math.sqrt(float(w @ w))
            if norm > radius:
                w = w * (radius / norm)
            obj = _svm_objective(w, b, X, ys, lam)
            if obj < best[0]:
                best = (obj, w.copy(), b)
            history.append(best[0])
        self.coef_ = best[1]
        self.intercept_ = best[2]
        self.objective_history_ = history
        self.calibration_ = _platt(self.decision_function(X), ys)
        if self.calibration_[0] <= 0:
            self.calibration_ = (1e-6, self.calibration_[1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0, self.classes_[1], self.classes_[0])

    def predict_proba(self, X):
        p = self.model().predict_proba(X)
        return np.column_stack([1 - p, p])

    def model(self):
        check_is_fitted(self, "coef_")
        return SvmModel(self.coef_.copy(), float(self.intercept_), tuple(float(v) for v in self.calibration_))


def svm_train(histograms, labels, c_reg=1000.0, epochs=2000, seed=0):
    return LinearSVM(c_reg, epochs, seed).fit(histograms, labels).model()


# ---------------------------------------------------------------------------
# Scoring and persistence


def _check_fingerprint(cluster, cfg):
    if cluster.feature_config_fingerprint and cluster.feature_config_fingerprint != cfg.fingerprint():
        raise FingerprintMismatchError("cluster model was trained with a different feature configuration")


def isc_score(img, mask, cluster, svm, cfg=None):
    """Calibrated ISC quality in [0, 1] for one RGB image."""
    cfg = cfg or IscFeatureConfig()
    _check_fingerprint(cluster, cfg)
    hist = isc_histogram(extract_isc_features(img, mask, cfg), cluster)
    return float(svm.predict_proba(hist[None, :])[0])


def _fp_to_floats(fp):
    value = int(fp, 16)
    return [float(value >> 32), float(value & 0xFFFFFFFF)]


def _floats_to_fp(hi, lo):
    return f"{(int(hi) << 32) | int(lo):016x}"


def save_isc_model(path, cfg, cluster, svm):
    """Write config, centres and SVM as little-endian float64 after an ISCM1 header."""
    _check_fingerprint(cluster, cfg)
    values = [float(FORMAT_VERSION), *_fp_to_floats(cfg.fingerprint())]
    values += [len(cfg.sigmas), *cfg.sigmas]
    values += [len(cfg.derivative_orders), *(v for o in cfg.derivative_orders for v in o)]
    values += [float(cfg.include_raw_intensity), cluster.k, cluster.feature_dim]
    values += list(np.asarray(cluster.centers, dtype=np.float64).ravel())
    values += [len(svm.weights), *np.asarray(svm.weights, dtype=np.float64), svm.bias, *svm.calibration]
    payload = struct.pack(f"<{len(values)}d", *values)
    Path(path).write_bytes(MAGIC + payload)


def load_isc_model(path, expected_config=None):
    """Read a model file; returns ``(config, cluster_model, svm_model)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC) or (len(raw) - len(MAGIC)) % 8:
        raise FundusQAError(f"{path} is not an ISCM1 model file")
    vals = list(struct.unpack(f"<{(len(raw) - len(MAGIC)) // 8}d", raw[len(MAGIC):]))
    pos = 0

    def take(n=1):
        nonlocal pos
        if pos + n > len(vals):
            raise FundusQAError(f"{path}: truncated model file")
        out = vals[pos : pos + n]
        pos += n
        return out

    (version,) = take()
    if int(version) != FORMAT_VERSION:
        raise FundusQAError(f"{path}: unsupported model version {version}")
    stored_fp = _floats_to_fp(*take(2))
    sigmas = tuple(take(int(take()[0])))
    flat = take(2 * int(take()[0]))
    orders = tuple((int(flat[i]), int(flat[i + 1])) for i in range(0, len(flat), 2))
    (raw_flag,) = take()
    cfg = IscFeatureConfig(sigmas, orders, bool(raw_flag))
    if cfg.fingerprint() != stored_fp:
        raise FingerprintMismatchError(f"{path}: stored fingerprint does not match its configuration")
    if expected_config is not None and expected_config.fingerprint() != stored_fp:
        raise FingerprintMismatchError(f"{path}: model was trained with a different feature configuration")
    k, dim = (int(v) for v in take(2))
    if dim != cfg.feature_dim:
        raise FundusQAError(f"{path}: feature dimension inconsistent with configuration")
    centers = np.array(take(k * dim)).reshape(k, dim)
    weights = np.array(take(int(take()[0])))
    bias, slope, intercept = take(3)
    if pos != len(vals):
        raise FundusQAError(f"{path}: trailing data in model file")
    return cfg, ClusterModel(k, centers, dim, stored_fp), SvmModel(weights, bias, (slope, intercept))


class IscQualityModel(ClassifierMixin, BaseEstimator):
    """End-to-end ISC estimator over lists of RGB images.

    ``fit(images, y)`` with ``y = 1`` for acceptable quality; ``predict_proba``
    returns ``[P(bad), P(good)]`` per image and ``score_samples`` the ISC
    score ``P(good)``.  FOV masks are detected unless passed explicitly.
    At most ``max_pixels_per_image`` FOV pixels per training image feed
    k-means; histograms always use every FOV pixel.
    """

    def __init__(self, n_clusters=5, sigmas=(1.0, 2.0, 4.0), derivative_orders=((1, 0), (0, 1)),
                 include_raw_intensity=True, C=1000.0, epochs=2000, max_pixels_per_image=50000,
                 max_iter=300, tol=1e-6, fov_threshold=DEFAULT_FOV_THRESHOLD, random_state=0):
        self.n_clusters = n_clusters
        self.sigmas = sigmas
        self.derivative_orders = derivative_orders
        self.include_raw_intensity = include_raw_intensity
        self.C = C
        self.epochs = epochs
        self.max_pixels_per_image = max_pixels_per_image
        self.max_iter = max_iter
        self.tol = tol
        self.fov_threshold = fov_threshold
        self.random_state = random_state

    def _config(self):
        return IscFeatureConfig(tuple(self.sigmas), tuple(tuple(o) for o in self.derivative_orders),
                                self.include_raw_intensity)

    def _features(self, images, masks, cfg):
        for i, img in enumerate(images):
            mask = masks[i] if masks is not None else detect_fov(img, self.fov_threshold)
            yield extract_isc_features(img, mask, cfg)

    def fit(self, X, y, masks=None):
        cfg = self._config()
        sample_seed, kmeans_seed = np.random.SeedSequence(self.random_state).generate_state(2, np.uint64)
        rng = np.random.default_rng(int(sample_seed))
        feats = list(self._features(X, masks, cfg))
        pool = []
        for f in feats:
            if len(f) > self.max_pixels_per_image:
                idx = np.sort(rng.choice(len(f), self.max_pixels_per_image, replace=False))
                f = f[idx]
            pool.append(f)
        km = KMeans(self.n_clusters, self.max_iter, self.tol, int(kmeans_seed)).fit(np.vstack(pool))
        self.kmeans_ = km
        self.config_ = cfg
        self.cluster_model_ = ClusterModel(self.n_clusters, km.cluster_centers_, cfg.feature_dim, cfg.fingerprint())
        hists = np.array([isc_histogram(f, self.cluster_model_) for f in feats])
        self.svm_ = LinearSVM(self.C, self.epochs, self.random_state).fit(hists, y)
        self.svm_model_ = self.svm_.model()
        self.classes_ = self.svm_.classes_
        return self

    def histograms(self, X, masks=None):
        check_is_fitted(self, "cluster_model_")
        return np.array([isc_histogram(f, self.cluster_model_) for f in self._features(X, masks, self.config_)])

    def score_samples(self, X, masks=None):
        return self.svm_model_.predict_proba(self.histograms(X, masks))

    def predict_proba(self, X, masks=None):
        p = self.score_samples(X, masks)
        return np.column_stack([1 - p, p])

    def predict(self, X, masks=None):
        return np.where(self.score_samples(X, masks) >= 0.5, self.classes_[1], self.classes_[0])

    def save(self, path):
        check_is_fitted(self, "cluster_model_")
        save_isc_model(path, self.config_, self.cluster_model_, self.svm_model_)

    @classmethod
    def from_file(cls, path):
        cfg, cluster, svm = load_isc_model(path)
        est = cls(n_clusters=cluster.k, sigmas=cfg.sigmas, derivative_orders=cfg.derivative_orders,
                  include_raw_intensity=cfg.include_raw_intensity)
        est.config_ = cfg
        est.cluster_model_ = cluster
        est.svm_model_ = svm
        est.classes_ = np.array([0, 1])
        return est
