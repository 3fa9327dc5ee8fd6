import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from fundus_qa import FingerprintMismatchError, FundusQAError
from fundus_qa.isc import (
    ClusterModel,
    IscFeatureConfig,
    IscQualityModel,
    KMeans,
    LinearSVM,
    SvmModel,
    extract_isc_features,
    isc_histogram,
    isc_score,
    kmeans_fit,
    load_isc_model,
    svm_train,
)
from fundus_qa.raster import FovMask
from fundus_qa.synthetic import degrade, make_fundus


def brute_inertia(X, centers):
    return sum(min(float(np.sum((x - c) ** 2)) for c in centers) for x in X)


# ---------------------------------------------------------------------------
# Features


def test_feature_dims():
    assert IscFeatureConfig().feature_dim == 21
    assert IscFeatureConfig(sigmas=(1, 2)).feature_dim == 15
    with pytest.raises(ValueError):
        IscFeatureConfig(sigmas=(), include_raw_intensity=False)
    with pytest.raises(ValueError):
        IscFeatureConfig(derivative_orders=((1, 1),))
    with pytest.raises(ValueError):
        IscFeatureConfig(sigmas=(0,))


def test_constant_image_features():
    img = np.full((20, 20, 3), 0.4)
    raw = extract_isc_features(img, None, IscFeatureConfig(sigmas=(1, 2)), standardize=False)
    assert raw.shape == (400, 15)
    np.testing.assert_array_equal(raw[:, [0, 5, 10]], 0.4)
    assert np.abs(np.delete(raw, [0, 5, 10], axis=1)).max() < 1e-12
    std = extract_isc_features(img, None, IscFeatureConfig(sigmas=(), include_raw_intensity=True))
    assert np.all(std == 0.0)


def test_feature_rows_follow_mask():
    img = np.random.default_rng(0).uniform(size=(16, 18, 3))
    mask = np.zeros((16, 18), bool)
    mask[3:9, 2:7] = True
    f = extract_isc_features(img, FovMask(mask))
    assert f.shape == (30, 21)
    np.testing.assert_allclose(f.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(f.std(axis=0), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        extract_isc_features(img, FovMask(np.ones((5, 5), bool)))


# ---------------------------------------------------------------------------
# k-means


def test_two_clouds():
    rng = np.random.default_rng(1)
    a = rng.uniform(-0.1, 0.1, size=(50, 2))
    b = np.array([10.0, 10.0]) + rng.uniform(-0.1, 0.1, size=(50, 2))
    model = kmeans_fit(np.vstack([a, b]), k=2, seed=3)
    centers = sorted(model.centers.tolist())
    assert np.allclose(centers[0], a.mean(axis=0), atol=0.2)
    assert np.allclose(centers[1], b.mean(axis=0), atol=0.2)


def test_replicated_colours_exact():
    colours = np.random.default_rng(2).uniform(size=(5, 3))
    X = np.repeat(colours, 100, axis=0)
    for seed in range(5):
        model = kmeans_fit(X, k=5, seed=seed)
        got = sorted(map(tuple, model.centers))
        assert got == sorted(map(tuple, colours))


def test_kmeans_deterministic_and_inertia():
    X = np.random.default_rng(3).normal(size=(400, 4))
    a = KMeans(5, random_state=11).fit(X)
    b = KMeans(5, random_state=11).fit(X)
    np.testing.assert_array_equal(a.cluster_centers_, b.cluster_centers_)
    assert a.inertia_ == pytest.approx(brute_inertia(X, a.cluster_centers_), rel=1e-12)
    hist = a.inertia_history_
    assert all(later <= earlier for earlier, later in zip(hist, hist[1:]))
    c = KMeans(5, random_state=12).fit(X)
    assert not np.array_equal(a.cluster_centers_, c.cluster_centers_)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 6))
def test_inertia_never_increases(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3)) * rng.uniform(0.1, 5, size=3)
    km = KMeans(k, random_state=seed).fit(X)
    hist = km.inertia_history_
    assert all(later <= earlier for earlier, later in zip(hist, hist[1:]))
    assert len(np.unique(km.cluster_centers_, axis=0)) == k
    assert np.isfinite(km.cluster_centers_).all()


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((3, 2)), k=5)
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((10, 2)), k=2)  # a single distinct point
    with pytest.raises(ValueError):
        KMeans(2, max_iter=0).fit(np.eye(4))


def test_empty_cluster_repair(monkeypatch):
    import fundus_qa.isc as isc

    X = np.array([[0.0], [0.1], [0.2], [5.0], [5.1], [10.0], [10.05]])
    # duplicated seeds: ties go to the lower index, so cluster 1 starts empty
    monkeypatch.setattr(isc, "_kmeans_pp", lambda X, k, rng: X[[0, 0, 3]].copy())
    km = KMeans(3, random_state=0).fit(X)
    assert km.n_repairs_ >= 1
    assert np.bincount(km.labels_, minlength=3).min() >= 1
    assert km.inertia_ == pytest.approx(brute_inertia(X, km.cluster_centers_))
    hist = km.inertia_history_
    assert all(later <= earlier for earlier, later in zip(hist, hist[1:]))


# ---------------------------------------------------------------------------
# Histograms


def _model(k=5, dim=3, seed=4):
    centers = np.random.default_rng(seed).normal(size=(k, dim)) * 5
    return ClusterModel(k, centers, dim)


def test_histogram_examples():
    m = _model()
    np.testing.assert_array_equal(isc_histogram(np.repeat(m.centers[2:3], 7, axis=0), m), [0, 0, 1, 0, 0])
    rows = np.vstack([np.repeat(m.centers[:1], 4, axis=0), np.repeat(m.centers[1:2], 4, axis=0)])
    np.testing.assert_array_equal(isc_histogram(rows, m), [0.5, 0.5, 0, 0, 0])
    with pytest.raises(ValueError):
        isc_histogram(np.zeros((3, 4)), m)


def test_histogram_ties_go_to_lower_index():
    m = ClusterModel(2, np.array([[1.0], [-1.0]]), 1)
    np.testing.assert_array_equal(isc_histogram(np.zeros((3, 1)), m), [1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n1=st.integers(1, 80), n2=st.integers(1, 80))
def test_histogram_additivity(seed, n1, n2):
    rng = np.random.default_rng(seed)
    m = _model(seed=seed % 100)
    A, B = rng.normal(size=(n1, 3)) * 5, rng.normal(size=(n2, 3)) * 5
    joint = isc_histogram(np.vstack([A, B]), m)
    ref = (n1 * isc_histogram(A, m) + n2 * isc_histogram(B, m)) / (n1 + n2)
    np.testing.assert_allclose(joint, ref, atol=1e-12)
    assert abs(joint.sum() - 1.0) <= 1e-9


# ---------------------------------------------------------------------------
# SVM


def test_svm_separable():
    X = np.array([[1, 0, 0], [0.9, 0.1, 0], [0, 1, 0], [0.1, 0.9, 0]], float)
    y = np.array([1, 1, 0, 0])
    svm = LinearSVM().fit(X, y)
    assert (svm.predict(X) == y).all()
    proba = svm.predict_proba(X)[:, 1]
    assert np.all(proba[:2] > 0.5) and np.all(proba[2:] < 0.5)
    assert svm.calibration_[0] > 0


def _random_histograms(n=50, k=5, seed=0):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(int)
    alpha = np.where(y[:, None] == 1, [4, 2, 1, 1, 1], [1, 1, 2, 2, 4])
    return np.array([rng.dirichlet(a) for a in alpha]), y


def test_svm_label_flip_negates_decision():
    X, y = _random_histograms(seed=1)
    f = LinearSVM(C=100, epochs=300).fit(X, y).decision_function(X)
    g = LinearSVM(C=100, epochs=300).fit(X, 1 - y).decision_function(X)
    np.testing.assert_array_equal(np.sign(g), -np.sign(f))


def test_svm_objective_decreases():
    X, y = _random_histograms(seed=2)
    ys = np.where(y == 1, 1.0, -1.0)
    C = 100.0

    def objective(svm):
        margins = ys * (X @ svm.coef_ + svm.intercept_)
        return 0.5 / C * svm.coef_ @ svm.coef_ + np.maximum(0, 1 - margins).mean()

    values = [objective(LinearSVM(C=C, epochs=e).fit(X, y)) for e in range(10, 201, 10)]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] < values[0]
    full = LinearSVM(C=C, epochs=200).fit(X, y)
    assert full.objective_history_[-1] == pytest.approx(objective(full), rel=1e-12)
    zero = 1.0  # objective at w = 0, b = 0
    assert values[-1] < zero


def test_svm_duplication_invariance():
    X, y = _random_histograms(seed=3)
    a = LinearSVM(C=50, epochs=200).fit(X, y)
    b = LinearSVM(C=50, epochs=200).fit(np.vstack([X, X]), np.r_[y, y])
    np.testing.assert_array_equal(a.coef_, b.coef_)
    assert a.intercept_ == b.intercept_


def test_svm_errors():
    with pytest.raises(ValueError):
        svm_train(np.eye(3), [1, 1, 1])
    with pytest.raises(ValueError):
        svm_train(np.eye(3), [1, 0])


def test_svm_model_probability_range():
    m = SvmModel(np.array([1000.0, -1000.0]), 0.0, (5.0, 0.0))
    p = m.predict_proba(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert np.all((p >= 0) & (p <= 1)) and p[0] > p[1]


# ---------------------------------------------------------------------------
# Scoring, persistence and the estimator


@pytest.fixture(scope="module")
def small_corpus():
    good, bad = [], []
    for s in range(6):
        f = make_fundus(64, seed=500 + s)
        good.append(f.image)
        bad.append(degrade(f.clean, blur_sigma=3.0, chroma_noise=0.06, noise=0.025, seed=900 + s, fov=f.fov))
    return good, bad


@pytest.fixture(scope="module")
def small_model(small_corpus):
    good, bad = small_corpus
    y = np.r_[np.ones(len(good), int), np.zeros(len(bad), int)]
    return IscQualityModel(epochs=300, max_pixels_per_image=400, random_state=5).fit(good + bad, y)


def test_estimator_round_trip(tmp_path, small_corpus, small_model):
    good, bad = small_corpus
    path = tmp_path / "m.iscm"
    small_model.save(path)
    assert path.read_bytes().startswith(b"ISCM1")
    loaded = IscQualityModel.from_file(path)
    np.testing.assert_array_equal(loaded.score_samples(good + bad), small_model.score_samples(good + bad))
    assert clone(small_model).get_params()["random_state"] == 5


def test_same_seed_same_bytes(tmp_path, small_corpus, small_model):
    good, bad = small_corpus
    y = np.r_[np.ones(len(good), int), np.zeros(len(bad), int)]
    again = clone(small_model).fit(good + bad, y)
    small_model.save(tmp_path / "a")
    again.save(tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_isc_score_matches_estimator(small_corpus, small_model):
    good, _ = small_corpus
    img = good[0]
    from fundus_qa.raster import detect_fov

    s = isc_score(img, detect_fov(img), small_model.cluster_model_, small_model.svm_model_, small_model.config_)
    assert 0.0 <= s <= 1.0
    assert s == small_model.score_samples([img])[0]


def test_fingerprint_mismatch(tmp_path, small_model):
    path = tmp_path / "m.iscm"
    small_model.save(path)
    with pytest.raises(FingerprintMismatchError):
        load_isc_model(path, expected_config=IscFeatureConfig(sigmas=(1.0, 2.0)))
    with pytest.raises(FingerprintMismatchError):
        isc_score(np.ones((8, 8, 3)), None, small_model.cluster_model_, small_model.svm_model_,
                  IscFeatureConfig(sigmas=(1.0,)))


def test_corrupt_model_files(tmp_path, small_model):
    path = tmp_path / "m.iscm"
    small_model.save(path)
    raw = path.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-8])
    (tmp_path / "magic").write_bytes(b"XXXXX" + raw[5:])
    (tmp_path / "odd").write_bytes(raw[:-3])
    for name in ("trunc", "magic", "odd"):
        with pytest.raises(FundusQAError):
            load_isc_model(tmp_path / name)


def test_feature_row_permutation_invariance(small_model):
    f = make_fundus(64, seed=77)
    feats = extract_isc_features(f.image, f.fov, small_model.config_)
    perm = np.random.default_rng(0).permutation(len(feats))
    h1 = isc_histogram(feats, small_model.cluster_model_)
    h2 = isc_histogram(feats[perm], small_model.cluster_model_)
    np.testing.assert_array_equal(h1, h2)


def test_fov_scramble_invariance_for_intensity_features():
    # with intensity-only features the histogram ignores geometry entirely
    cfg = IscFeatureConfig(sigmas=(), include_raw_intensity=True)
    imgs = [make_fundus(64, seed=s).image for s in range(4)]
    fov = make_fundus(64, seed=0).fov
    y = np.array([1, 1, 0, 0])
    est = IscQualityModel(sigmas=(), epochs=100, max_pixels_per_image=500).fit(imgs, y, masks=[fov] * 4)
    img = imgs[0].copy()
    rng = np.random.default_rng(1)
    inside = fov.mask
    pixels = img[inside]
    img[inside] = pixels[rng.permutation(len(pixels))]
    a = isc_score(imgs[0], fov, est.cluster_model_, est.svm_model_, cfg)
    b = isc_score(img, fov, est.cluster_model_, est.svm_model_, cfg)
    assert abs(a - b) <= 1e-9
