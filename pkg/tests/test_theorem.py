import numpy as np
import pytest
from scipy.stats import ortho_group

from fewshotlab.theorem import (
    ClassPairSpec,
    accuracy_bound,
    chebyshev_condition_rate,
    one_shot_classifier,
    solve_separation_for_ratio,
    sweep_bounds,
    verify_bound,
)


def test_separation_hand_value():
    sep = solve_separation_for_ratio(0.01, 1.0, 1.0)
    assert sep == pytest.approx(np.sqrt(796.0), rel=1e-15)


def test_separation_rejects_boundary_ratio():
    with pytest.raises(ValueError):
        solve_separation_for_ratio(2.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        solve_separation_for_ratio(0.0, 1.0, 1.0)


def test_bound_values():
    assert accuracy_bound(0.01) == pytest.approx(1 - 0.32 / 0.99, rel=1e-15)
    assert accuracy_bound(0.001) == pytest.approx(1 - 0.032 / 0.999, rel=1e-15)
    assert accuracy_bound(0.5) == 0.0  # vacuous, clamped


@pytest.mark.parametrize("family", ["gaussian", "uniform_ball"])
def test_realized_ratio_matches_target(family):
    sep = solve_separation_for_ratio(0.05, 1.0, 1.0)
    spec = ClassPairSpec(dim=8, family=family, var_x=1.0, var_y=1.0,
                         separation=sep, trials=1_000_000, seed=13)
    report = verify_bound(spec, 0.05)
    assert abs(report.empirical_ratio - 0.05) / 0.05 < 0.02


def test_classifier_on_training_points():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=4), rng.normal(size=4)
    assert one_shot_classifier(x, y, x) == 1
    assert one_shot_classifier(x, y, y) == 2
    midpoint = (x + y) / 2.0
    assert one_shot_classifier(x, y, midpoint) == 1  # boundary maps to class 1


def test_classifier_identical_training_points_rejected():
    x = np.ones(3)
    with pytest.raises(ValueError):
        one_shot_classifier(x, x, np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_classifier_invariant_to_translation_and_rotation(seed):
    rng = np.random.default_rng((seed, 3))
    x, y, z = rng.normal(size=(3, 5))
    t = rng.normal(size=5) * 10.0
    r = ortho_group.rvs(5, random_state=seed)
    base = one_shot_classifier(x, y, z)
    assert one_shot_classifier(x + t, y + t, z + t) == base
    assert one_shot_classifier(r @ x, r @ y, r @ z) == base

    def score(a, b, c):
        return c @ (a - b) - 0.5 * a @ a + 0.5 * b @ b

    assert abs(score(x, y, z) - score(r @ x, r @ y, r @ z)) < 1e-9


def test_verify_bound_vacuous_at_large_ratio():
    sep = solve_separation_for_ratio(0.5, 1.0, 1.0)
    spec = ClassPairSpec(dim=2, family="gaussian", var_x=1.0, var_y=1.0,
                         separation=sep, trials=2000, seed=1)
    report = verify_bound(spec, 0.5)
    assert report.bound == 0.0
    assert report.passed


@pytest.mark.parametrize("family", ["gaussian", "uniform_ball"])
def test_verify_bound_small_ratio(family):
    sep = solve_separation_for_ratio(0.001, 1.0, 1.0)
    spec = ClassPairSpec(dim=16, family=family, var_x=1.0, var_y=1.0,
                         separation=sep, trials=20_000, seed=2)
    report = verify_bound(spec, 0.001)
    assert report.bound == pytest.approx(0.96797, abs=5e-6)
    assert report.accuracy >= 0.99
    assert report.passed


def test_verify_bound_deterministic():
    sep = solve_separation_for_ratio(0.01, 1.0, 1.0)
    spec = ClassPairSpec(dim=4, family="uniform_ball", var_x=1.0, var_y=1.0,
                         separation=sep, trials=10_000, seed=11)
    a, b = verify_bound(spec, 0.01), verify_bound(spec, 0.01)
    assert a == b


def test_verify_bound_surfaces_both_ratio_readings():
    sep = solve_separation_for_ratio(0.01, 1.0, 1.0)
    spec = ClassPairSpec(dim=4, family="gaussian", var_x=1.0, var_y=1.0,
                         separation=sep, trials=5000, seed=4)
    report = verify_bound(spec, 0.01)
    # proof-style denominator uses var_x + var_y + separation^2
    expected = 2.0 / (2.0 + sep**2)
    assert report.proof_denominator_ratio == pytest.approx(expected, rel=1e-12)
    assert report.proof_denominator_ratio != pytest.approx(0.01, rel=0.2)


def test_chebyshev_rate_large_delta():
    spec = ClassPairSpec(dim=4, family="gaussian", var_x=1.0, var_y=1.0,
                         separation=8.0, trials=5000, seed=5)
    report = chebyshev_condition_rate(spec, delta=1e6)
    assert report.frequency == 1.0
    assert report.passed


def test_chebyshev_rate_point_masses():
    spec = ClassPairSpec(dim=4, family="gaussian", var_x=1e-30, var_y=1e-30,
                         separation=1.0, trials=2000, seed=6)
    report = chebyshev_condition_rate(spec, delta=0.01)
    assert report.frequency == 1.0


def test_chebyshev_rate_hand_fixture():
    # total variances 1, delta 4: bound = 1 - 3/16
    spec = ClassPairSpec(dim=4, family="gaussian", var_x=1.0, var_y=1.0,
                         separation=16.0, trials=50_000, seed=7)
    report = chebyshev_condition_rate(spec, delta=4.0)
    assert report.chebyshev_bound == pytest.approx(0.8125, abs=1e-15)
    assert report.frequency >= 0.8125 - 3 * report.frequency_se
    assert report.passed


def test_sweep_accuracy_monotone_in_ratio():
    eps_list = [0.001, 0.01, 0.1, 0.5, 1.5]
    rows = sweep_bounds(eps_list, [2], ["gaussian"], trials=40_000, seed=8)
    accs = [r.accuracy for _, r in rows]
    ses = [r.accuracy_se for _, r in rows]
    for i in range(len(accs) - 1):
        assert accs[i + 1] <= accs[i] + 3 * (ses[i] + ses[i + 1])


def test_spec_validation():
    with pytest.raises(ValueError):
        ClassPairSpec(dim=0, family="gaussian", var_x=1, var_y=1,
                      separation=1, trials=10).validate()
    with pytest.raises(ValueError):
        ClassPairSpec(dim=2, family="poisson", var_x=1, var_y=1,
                      separation=1, trials=10).validate()
    with pytest.raises(ValueError):
        ClassPairSpec(dim=2, family="gaussian", var_x=0, var_y=1,
                      separation=1, trials=10).validate()
