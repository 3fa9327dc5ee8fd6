import numpy as np
import pytest
from sklearn.base import clone

from fundus_qa.qv import QvScorer, gradient_planes, local_svd_anisotropy, qv_score
from fundus_qa.raster import FovMask
from fundus_qa.synthetic import degrade, make_fundus
from fundus_qa.vesselness import FrangiParams


def svd_oracle(green, window):
    """Coherence from an explicit SVD of each window's stacked gradients."""
    gx, gy = gradient_planes(green)
    r = window // 2
    px = np.pad(gx, r, mode="symmetric")
    py = np.pad(gy, r, mode="symmetric")
    h, w = green.shape
    out = np.zeros_like(green)
    for y in range(h):
        for x in range(w):
            m = np.column_stack([px[y : y + window, x : x + window].ravel(), py[y : y + window, x : x + window].ravel()])
            s = np.linalg.svd(m, compute_uv=False)
            out[y, x] = 0.0 if s.sum() < 1e-12 else (s[0] - s[1]) / (s[0] + s[1])
    return out


def test_ramp_coherence_one():
    ramp = np.tile(np.arange(40, dtype=float), (30, 1))
    a = local_svd_anisotropy(ramp, 7)
    np.testing.assert_allclose(a[5:-5, 5:-5], 1.0, atol=1e-12)


def test_constant_coherence_zero():
    assert np.all(local_svd_anisotropy(np.full((20, 20), 0.4), 5) == 0.0)


def test_matches_direct_svd():
    img = np.random.default_rng(0).uniform(size=(24, 20))
    np.testing.assert_allclose(local_svd_anisotropy(img, 7), svd_oracle(img, 7), atol=1e-9)


def test_white_noise_low_coherence():
    for seed in range(10):
        img = np.random.default_rng(seed).normal(size=(64, 64))
        a = local_svd_anisotropy(img, 15)
        assert a[10:-10, 10:-10].mean() < 0.5
        np.testing.assert_allclose(a[20:30, 20:30], svd_oracle(img, 15)[20:30, 20:30], atol=1e-9)


def test_affine_intensity_invariance():
    img = np.random.default_rng(1).uniform(size=(40, 40))
    base = local_svd_anisotropy(img, 9)
    for a, b in [(2.0, 0.1), (0.3, -5.0), (17.0, 3.0)]:
        np.testing.assert_allclose(local_svd_anisotropy(a * img + b, 9), base, atol=1e-9)


def test_window_preconditions():
    img = np.zeros((10, 10))
    for bad in (4, 1, 11):
        with pytest.raises(ValueError):
            local_svd_anisotropy(img, bad)


def test_constant_image_scores_zero():
    r = qv_score(np.full((64, 64, 3), 0.5))
    assert r.score == 0.0 and r.vessel_pixel_count == 0


def test_score_range_and_determinism():
    f = make_fundus(256, seed=3)
    a = qv_score(f.image)
    b = qv_score(f.image.copy())
    assert a == b
    assert 0.0 < a.score < 0.6
    assert a.vessel_pixel_count > 0
    assert len(a.params_fingerprint) == 16


def test_fingerprint_tracks_parameters():
    f = make_fundus(128, seed=0)
    a = qv_score(f.image)
    assert qv_score(f.image, window=9).params_fingerprint != a.params_fingerprint
    assert qv_score(f.image, FrangiParams(c=10)).params_fingerprint != a.params_fingerprint


def test_blur_lowers_score():
    f = make_fundus(256, seed=4)
    blurred = degrade(f.clean, blur_sigma=2.0, noise=0.025, seed=f.noise_seed, fov=f.fov)
    assert qv_score(f.image).score > qv_score(blurred).score


def test_explicit_mask_matches_detected():
    f = make_fundus(128, seed=2)
    assert qv_score(f.image, mask=f.fov) == qv_score(f.image, mask=f.fov.mask)
    assert qv_score(f.image, mask=FovMask.full(f.image.shape)).score != qv_score(f.image, mask=f.fov).score


def test_scorer_estimator():
    f = make_fundus(128, seed=5)
    est = clone(QvScorer(window=11)).fit()
    scores = est.score_samples([f.image, f.image])
    assert scores[0] == scores[1] == qv_score(f.image, window=11).score
    assert est.transform([f.image]).shape == (1, 1)
