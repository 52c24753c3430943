import numpy as np
import pytest
from scipy.stats import ortho_group

from fewshotlab import autodiff as ad
from fewshotlab.metrics import (
    DegenerateInputError,
    build_histogram,
    filter_norm_distance,
    lda_project,
    linear_cka,
    r_fc_loss,
    r_hv,
    r_hv_mean,
    variance_ratio,
)
from fewshotlab.models import ParamSet

from conftest import finite_diff, rel_err

HAND_FEATURES = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 0.0], [12.0, 0.0]])
HAND_IDS = np.array([0, 0, 1, 1])


def _vec(v):
    return ad.Tensor(np.asarray(v, dtype=np.float64))


# -- variance ratio -----------------------------------------------------------


def test_variance_ratio_hand_value():
    assert variance_ratio(HAND_FEATURES, HAND_IDS) == pytest.approx(0.08, abs=1e-15)


def test_variance_ratio_point_masses():
    feats = np.array([[1.0, 1.0], [1.0, 1.0], [5.0, 0.0], [5.0, 0.0]])
    assert variance_ratio(feats, HAND_IDS) == 0.0


def test_variance_ratio_scale_invariant():
    assert variance_ratio(3.0 * HAND_FEATURES, HAND_IDS) == pytest.approx(
        0.08, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_variance_ratio_invariances(seed):
    rng = np.random.default_rng((seed, 7))
    feats = rng.normal(size=(30, 6))
    ids = np.repeat(np.arange(5), 6)
    base = variance_ratio(feats, ids)
    shifted = variance_ratio(feats + rng.normal(size=6), ids)
    rotated = variance_ratio(feats @ ortho_group.rvs(6, random_state=seed), ids)
    scaled = variance_ratio(feats * 2.7, ids)
    assert abs(shifted - base) < 1e-10
    assert abs(rotated - base) < 1e-10
    assert abs(scaled - base) < 1e-10


def test_variance_ratio_unbalanced_uses_harmonic_mean():
    feats = np.array([[0.0], [2.0], [10.0], [12.0], [14.0]])
    ids = np.array([0, 0, 1, 1, 1])
    # within: class0 = 2, class1 = 8; means 1 and 12, overall mean 7.6
    # between: (1-7.6)^2 + (12-7.6)^2 = 43.56 + 19.36
    n_h = 2 / (1 / 2 + 1 / 3)
    expected = (2 / n_h) * 10.0 / (43.56 + 19.36)
    assert variance_ratio(feats, ids) == pytest.approx(expected, rel=1e-12)


def test_variance_ratio_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        variance_ratio(np.ones((4, 2)), HAND_IDS)  # coincident class means
    with pytest.raises(DegenerateInputError):
        variance_ratio(HAND_FEATURES, np.zeros(4, dtype=int))  # one class
    with pytest.raises(DegenerateInputError):
        variance_ratio(HAND_FEATURES[:3], np.array([0, 0, 1]))  # singleton class


# -- feature clustering loss -----------------------------------------------------


def test_r_fc_matches_variance_ratio_exactly():
    t = ad.Tensor(HAND_FEATURES)
    assert abs(r_fc_loss(t, HAND_IDS).item() - 0.08) < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_r_fc_agrees_with_numpy_oracle(seed):
    rng = np.random.default_rng((seed, 13))
    feats = rng.normal(size=(14, 5))
    ids = np.array([0, 0, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 3])
    a = r_fc_loss(ad.Tensor(feats), ids).item()
    b = variance_ratio(feats, ids)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(b))


def test_r_fc_zero_when_classes_collapse():
    feats = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 4.0], [3.0, 4.0]])
    assert r_fc_loss(ad.Tensor(feats), HAND_IDS).item() == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_r_fc_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng((seed, 17))
    feats = rng.normal(size=(8, 4))
    ids = np.repeat(np.arange(4), 2)

    def f(x):
        return r_fc_loss(ad.Tensor(x), ids).item()

    t = ad.Tensor(feats, requires_grad=True)
    r_fc_loss(t, ids).backward()
    assert rel_err(t.grad, finite_diff(f, [feats], 0)) < 1e-6


# -- hyperplane variation ---------------------------------------------------------


def test_r_hv_zero_when_differences_equal():
    out = r_hv(_vec([1.0, 2.0]), _vec([3.0, 5.0]),
               _vec([0.0, 1.0]), _vec([2.0, 4.0]))
    assert out.item() == 0.0


def test_r_hv_hand_values():
    # difference vectors (1,0) and (0,1)
    out = r_hv(_vec([1.0, 0.0]), _vec([0.0, 1.0]),
               _vec([0.0, 0.0]), _vec([0.0, 0.0]))
    assert out.item() == pytest.approx(np.sqrt(2.0) / 2.0, abs=1e-15)
    # difference vectors (1,0) and (-1,0): the maximum
    out = r_hv(_vec([1.0, 0.0]), _vec([-1.0, 0.0]),
               _vec([0.0, 0.0]), _vec([0.0, 0.0]))
    assert out.item() == pytest.approx(1.0, abs=1e-15)


def test_r_hv_degenerate_error():
    z = _vec([0.0, 0.0])
    with pytest.raises(DegenerateInputError):
        r_hv(z, z, z, z)


@pytest.mark.parametrize("seed", range(10))
def test_r_hv_bounds_and_scale_invariance(seed):
    rng = np.random.default_rng((seed, 19))
    vs = [rng.normal(size=3) for _ in range(4)]
    out = r_hv(*[_vec(v) for v in vs]).item()
    assert 0.0 <= out <= 1.0
    scaled = r_hv(*[_vec(5.0 * v) for v in vs]).item()
    assert abs(out - scaled) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_r_hv_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng((seed, 23))
    vs = [rng.normal(size=4) for _ in range(4)]

    def f(a, b, c, d):
        return r_hv(_vec(a), _vec(b), _vec(c), _vec(d)).item()

    tensors = [ad.Tensor(v, requires_grad=True) for v in vs]
    r_hv(*tensors).backward()
    for i, t in enumerate(tensors):
        assert rel_err(t.grad, finite_diff(f, vs, i)) < 1e-6


def test_r_hv_mean_over_consecutive_pairs():
    feats = np.array([
        [1.0, 0.0], [0.0, 1.0],   # class 0
        [0.0, 0.0], [0.0, 0.0],   # class 1
        [2.0, 0.0], [0.0, 2.0],   # class 2
    ])
    ids = np.array([0, 0, 1, 1, 2, 2])
    # pair (0,1): diffs (1,0),(0,1) -> sqrt(2)/2
    # pair (1,2): diffs (-2,0),(0,-2) -> 2*sqrt(2)/4 = sqrt(2)/2
    out = r_hv_mean(ad.Tensor(feats), ids)
    assert out.item() == pytest.approx(np.sqrt(2.0) / 2.0, abs=1e-12)


# -- linear CKA ----------------------------------------------------------------


def test_cka_self_and_invariances():
    rng = np.random.default_rng(31)
    x = rng.normal(size=(40, 6))
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)
    assert linear_cka(x, 2.0 * x) == pytest.approx(1.0, abs=1e-8)
    r = ortho_group.rvs(6, random_state=1)
    assert linear_cka(x, x @ r) == pytest.approx(1.0, abs=1e-8)


def test_cka_symmetric_and_bounded():
    rng = np.random.default_rng(32)
    for _ in range(5):
        x = rng.normal(size=(30, 5))
        y = rng.normal(size=(30, 8))
        a, b = linear_cka(x, y), linear_cka(y, x)
        assert abs(a - b) < 1e-12
        assert -1e-12 <= a <= 1.0 + 1e-12


def test_cka_independent_representations_low():
    rng = np.random.default_rng(33)
    x = rng.normal(size=(100, 16))
    y = rng.normal(size=(100, 16))
    assert linear_cka(x, y) < 0.5


def test_cka_degenerate_error():
    with pytest.raises(DegenerateInputError):
        linear_cka(np.ones((10, 3)), np.random.default_rng(0).normal(size=(10, 3)))


def test_cka_row_count_mismatch():
    with pytest.raises(ValueError):
        linear_cka(np.ones((10, 3)), np.ones((9, 3)))


# -- LDA -----------------------------------------------------------------------


def test_lda_first_direction_aligns_with_mean_difference():
    rng = np.random.default_rng(41)
    mu0, mu1, mu2 = np.array([0.0, 0.0]), np.array([6.0, 0.0]), np.array([0.0, 6.0])
    feats = np.concatenate([
        mu0 + 0.3 * rng.normal(size=(60, 2)),
        mu1 + 0.3 * rng.normal(size=(60, 2)),
        mu2 + 0.3 * rng.normal(size=(60, 2)),
    ])
    ids = np.repeat(np.arange(3), 60)
    # two-class case: first direction within 5 degrees of the mean line
    coords, basis = lda_project(feats[:120], ids[:120], out_dims=1)
    direction = basis[:, 0]
    line = (mu1 - mu0) / np.linalg.norm(mu1 - mu0)
    angle = np.degrees(np.arccos(min(1.0, abs(float(direction @ line)))))
    assert angle < 5.0
    assert coords.shape == (120, 1)


def test_lda_beats_random_directions():
    rng = np.random.default_rng(42)
    feats = rng.normal(size=(80, 8)) + np.repeat(
        rng.normal(scale=3.0, size=(4, 8)), 20, axis=0)
    ids = np.repeat(np.arange(4), 20)
    _, basis = lda_project(feats, ids, out_dims=1)
    lda_ratio = variance_ratio(feats @ basis, ids)
    for _ in range(100):
        v = rng.normal(size=8)
        v /= np.linalg.norm(v)
        assert lda_ratio <= variance_ratio(feats @ v[:, None], ids) + 1e-12


def test_lda_needs_enough_classes():
    feats = np.random.default_rng(0).normal(size=(10, 3))
    with pytest.raises(DegenerateInputError):
        lda_project(feats, np.zeros(10, dtype=int), out_dims=2)
    with pytest.raises(DegenerateInputError):
        lda_project(feats, np.repeat([0, 1], 5), out_dims=2)


def test_lda_basis_orthonormal():
    rng = np.random.default_rng(43)
    feats = rng.normal(size=(90, 6)) + np.repeat(
        rng.normal(scale=4.0, size=(3, 6)), 30, axis=0)
    ids = np.repeat(np.arange(3), 30)
    _, basis = lda_project(feats, ids, out_dims=2)
    assert np.allclose(basis.T @ basis, np.eye(2), atol=1e-10)


# -- filter-normalized distance ---------------------------------------------------


def _param_pair(seed):
    rng = np.random.default_rng((seed, 47))
    a = ParamSet({
        "layer0.weight": rng.normal(size=(4, 3)),
        "layer0.bias": rng.normal(size=4),
        "layer1.weight": rng.normal(size=(2, 4)),
        "layer1.bias": rng.normal(size=2),
    })
    b = ParamSet({k: rng.normal(size=v.shape) for k, v in a.items()})
    return a, b


def test_filter_norm_distance_identity():
    a, _ = _param_pair(0)
    assert filter_norm_distance(a, a) == 0.0


def test_filter_norm_distance_per_filter_scale_invariant():
    a, _ = _param_pair(1)
    b = a.copy()
    rng = np.random.default_rng(3)
    for name in b.names():
        arr = b[name]
        if arr.ndim == 2:
            b[name] = arr * rng.uniform(0.1, 10.0, size=(arr.shape[0], 1))
        else:
            b[name] = arr * rng.uniform(0.1, 10.0)
    assert filter_norm_distance(a, b) < 1e-12


def test_filter_norm_distance_hand_value():
    a = ParamSet({"layer0.weight": np.array([[1.0, 0.0]]),
                  "layer0.bias": np.zeros(1)})
    b = ParamSet({"layer0.weight": np.array([[0.0, 1.0]]),
                  "layer0.bias": np.zeros(1)})
    assert filter_norm_distance(a, b) == pytest.approx(np.sqrt(2.0), abs=1e-15)


def test_filter_norm_distance_zero_rows_stay_zero():
    a = ParamSet({"layer0.weight": np.zeros((2, 2)), "layer0.bias": np.zeros(2)})
    b = ParamSet({"layer0.weight": np.zeros((2, 2)), "layer0.bias": np.zeros(2)})
    assert filter_norm_distance(a, b) == 0.0


def test_filter_norm_distance_shape_mismatch():
    a, _ = _param_pair(2)
    b = ParamSet({"layer0.weight": np.zeros((1, 1))})
    with pytest.raises(ValueError):
        filter_norm_distance(a, b)


def test_filter_norm_distance_pseudometric():
    rng = np.random.default_rng(48)
    for _ in range(100):
        trio = []
        for _ in range(3):
            trio.append(ParamSet({
                "layer0.weight": rng.normal(size=(3, 2)),
                "layer0.bias": rng.normal(size=3),
            }))
        a, b, c = trio
        dab, dba = filter_norm_distance(a, b), filter_norm_distance(b, a)
        dac, dcb = filter_norm_distance(a, c), filter_norm_distance(c, b)
        assert dab >= 0
        assert abs(dab - dba) < 1e-15
        assert dab <= dac + dcb + 1e-12


# -- histogram ---------------------------------------------------------------------


def test_histogram_counts_sum():
    rng = np.random.default_rng(50)
    values = rng.uniform(0, 1, size=137)
    hist = build_histogram(values, 10, 0.0, 1.0)
    assert hist.total == 137
    assert len(hist.counts) == 10


def test_histogram_degenerate_range():
    hist = build_histogram(np.zeros(5), 4)
    assert hist.total == 5
    assert hist.counts[0] == 5
