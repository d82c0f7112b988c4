import math

import numpy as np
import pytest

from latte.data import TheoryWorld, sample_theory_batch, theory_predictor
from latte.errors import DomainError, EmptyMemory, ValidationError
from latte.theory import (
    ErrorReport,
    analytic_error,
    asymptotic_targets,
    calibrated_world,
    cap_ratio,
    cap_ratio_bounds,
    cap_volume,
    margin_for_error,
    mc_error,
    onenn_oracle,
    sphere_volume,
    theta_radius,
)


@pytest.mark.parametrize("d,v", [(1, 2.0), (2, math.pi), (3, 4 * math.pi / 3)])
def test_sphere_volume(d, v):
    assert sphere_volume(d) == pytest.approx(v, rel=1e-14)


def test_cap_volume_endpoints():
    assert cap_volume(4, 0.0) == 0.0
    for d in (1, 2, 5, 11):
        assert cap_volume(d, math.pi) == pytest.approx(sphere_volume(d), rel=1e-9)


def test_circular_segment():
    # closed form for d=2: theta - sin(theta) cos(theta)
    t = math.pi / 3
    assert cap_volume(2, t) == pytest.approx(t - math.sin(t) * math.cos(t), rel=1e-12)
    assert cap_volume(2, t) == pytest.approx(0.61418, abs=5e-6)


def test_cap_volume_three_d_closed_form():
    # spherical cap of height h = 1 - cos(theta): pi h^2 (3 - h) / 3
    for t in (0.2, 1.0, 2.5):
        h = 1 - math.cos(t)
        assert cap_volume(3, t) == pytest.approx(math.pi * h * h * (3 - h) / 3, rel=1e-12)


def test_cap_volume_strictly_increasing():
    for d in (2, 6):
        vals = [cap_volume(d, t) for t in np.linspace(0.01, math.pi - 0.01, 60)]
        assert all(a < b for a, b in zip(vals, vals[1:]))


def test_cap_angle_validation():
    with pytest.raises(DomainError):
        cap_volume(3, -0.1)
    with pytest.raises(DomainError):
        cap_ratio_bounds(3, 2.0)


def test_bounds_vanish_at_zero():
    assert cap_ratio_bounds(5, 0.0) == (0.0, 0.0)


def test_bounds_bracket_hemisphere():
    lo, hi = cap_ratio_bounds(2, math.pi / 2)
    assert lo <= 0.5 <= hi


def test_bounds_sweep_odd_grid():
    for d in range(2, 11):
        for t in np.arange(0.1, 1.55, 0.2):
            lo, hi = cap_ratio_bounds(d, t)
            assert lo <= cap_ratio(d, t) <= hi


def test_theta_radius_monotone():
    assert theta_radius(1e9, 1, 3, 0.1) < theta_radius(1e3, 1, 3, 0.1)
    assert theta_radius(1e4, 2, 3, 0.1) > theta_radius(1e4, 1, 3, 0.1)
    assert theta_radius(1e4, 2, 4, 0.1) > theta_radius(1e4, 2, 3, 0.1)
    assert theta_radius(4 * 500, 4, 3, 0.1) == theta_radius(500 * 4, 4, 3, 0.1)


def test_theta_radius_golden():
    # pinned from a direct evaluation of the closed form
    inner = 8 / math.sqrt(math.pi) * math.sqrt(10) * (math.log(2 / 0.05) + 2) / 1e4
    assert theta_radius(1e4, 2, 3, 0.05) == pytest.approx(math.pi / 2 * inner**0.25, rel=1e-15)
    assert theta_radius(1e4, 2, 3, 0.05) == pytest.approx(0.4715256500996, rel=1e-12)


def test_theta_radius_validation():
    for args in [(0, 1, 3, 0.1), (10, 0, 3, 0.1), (10, 1, 3, 1.0)]:
        with pytest.raises(ValidationError):
            theta_radius(*args)


def test_onenn_examples(rng):
    assert onenn_oracle([0.0, 1.0], [[5.0, 5.0]], [3]) == 3
    M = rng.standard_normal((20, 4))
    cls = rng.integers(0, 5, 20)
    assert onenn_oracle(M[7], M, cls) == cls[7]
    f = rng.standard_normal(4)
    assert onenn_oracle(f, M, cls) == cls[int(np.argmin([np.linalg.norm(f - m) for m in M]))]
    with pytest.raises(EmptyMemory):
        onenn_oracle(f, np.empty((0, 4)), [])


def test_onenn_ties_go_to_lower_class():
    assert onenn_oracle([0.0], [[1.0], [-1.0]], [4, 2]) == 2


def test_analytic_error_special_cases():
    mu = np.array([1.2, 0.0, 0.0])
    assert analytic_error(mu, mu / 1.2) == 0.0
    assert analytic_error(mu, [0.0, 1.0, 0.0]) == pytest.approx(0.5, abs=1e-12)
    w = np.array([0.5, math.sqrt(0.75), 0.0])
    assert analytic_error([1.0, 0.0, 0.0], w) == pytest.approx(cap_ratio(3, math.pi / 3), rel=1e-12)
    # cap of height 1/2 in the unit 3-ball: (pi/4 * 5/2 / 3) / (4 pi / 3)
    assert analytic_error([1.0, 0.0, 0.0], w) == pytest.approx(0.15625, rel=1e-12)


def test_analytic_error_nonincreasing():
    w = np.array([1.0, 0.0, 0.0])
    vals = [analytic_error(np.array([a, 0.3, 0.0]), w) for a in np.linspace(0.0, 1.2, 100)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_analytic_matches_mc():
    w = np.array([0.5, math.sqrt(0.75), 0.0])
    world = TheoryWorld([1.0, 0.0, 0.0], w)
    rep = mc_error(theory_predictor(world).predict, world, 10**6, np.random.default_rng(8))
    assert abs(rep.estimate - analytic_error(world.mu, w)) <= 3 * rep.half_width


def test_mc_error_edge_predictors():
    world = TheoryWorld([1.0, 0.0], [1.0, 0.0])
    perfect = mc_error(theory_predictor(world).predict, world, 5000, np.random.default_rng(0))
    assert perfect.estimate == 0.0 and perfect.half_width == 0.0
    assert analytic_error(world.mu, world.w_pre) == 0.0
    coin = np.random.default_rng(1)
    rep = mc_error(lambda X: coin.integers(0, 2, len(X)), world, 10**6, np.random.default_rng(2))
    assert abs(rep.estimate - 0.5) <= 0.002
    with pytest.raises(ValidationError):
        mc_error(lambda X: X[:, 0] > 0, world, 10, np.random.default_rng(0))


def test_mc_error_batches_do_not_change_result():
    world = TheoryWorld([0.5, 0.0], [0.8, 0.6])
    p = theory_predictor(world).predict
    a = mc_error(p, world, 12345, np.random.default_rng(3), batch=1000)
    b = mc_error(p, world, 12345, np.random.default_rng(3), batch=1000)
    assert a == b
    assert ErrorReport.from_counts(25, 100).half_width == pytest.approx(1.96 * math.sqrt(0.25 * 0.75 / 100))


def test_targets():
    w = TheoryWorld([1.0, 0.0], [1.0, 0.0])
    m0, m1 = asymptotic_targets(w)
    assert np.allclose(m1, [2.0, 0.0]) and np.allclose(m0, -m1)


def test_tilting_toward_mu_never_hurts(rng):
    for _ in range(1000):
        d = int(rng.integers(2, 8))
        mu = rng.standard_normal(d) * rng.uniform(0.1, 1.5)
        w = rng.standard_normal(d)
        w /= np.linalg.norm(w)
        if mu @ w <= 0:
            w = -w
        w_asym = (mu + w) / np.linalg.norm(mu + w)
        assert analytic_error(mu, w_asym) <= analytic_error(mu, w) + 1e-12


def test_bias_only_hurts():
    world = TheoryWorld([0.7, 0.0, 0.0], [0.6, 0.8, 0.0], b_pre=0.25)
    rep = mc_error(theory_predictor(world).predict, world, 200000, np.random.default_rng(4))
    assert rep.estimate >= analytic_error(world.mu, world.w_pre) - 3 * rep.half_width


def test_calibrated_world():
    a = margin_for_error(3, 0.2)
    assert cap_ratio(3, math.acos(a)) == pytest.approx(0.2, abs=1e-12)
    w = calibrated_world(3, 0.8, 0.2)
    assert analytic_error(w.mu, w.w_pre) == pytest.approx(0.2, abs=1e-12)
    with pytest.raises(ValidationError):
        calibrated_world(3, 0.1, 0.2)
