import numpy as np
import pytest

from conftest import central_difference_gradient, central_difference_hessian
from harp.core import NoiseMode, spawn_rng
from harp.problems import (
    ProblemSpec,
    build_problem,
    make_finite_sum,
    make_quadratic,
    make_skew_quartic,
    make_synthetic_components,
    skew_quartic,
    skew_quartic_gradient,
    skew_quartic_hessian,
    skew_quartic_third_action,
)


def rng(tag="problem", seed=7):
    return spawn_rng(seed, 0, tag)


class TestQuadratic:
    def test_motivating_example_value(self):
        p = make_quadratic(np.diag([100.0, 1.0]))
        assert p.true_loss(np.array([1.0, 1.0])) == pytest.approx(50.5, abs=1e-12)

    def test_rejects_bad_hessian(self):
        with pytest.raises(ValueError):
            make_quadratic(np.array([[1.0, 0.0], [0.0, -1.0]]))
        with pytest.raises(ValueError):
            make_quadratic(np.array([[1.0, 0.5], [0.2, 1.0]]))

    def test_iid_noise_variance(self):
        sigma = 0.7
        p = make_quadratic(np.eye(2), NoiseMode.IID, sigma=sigma)
        r = rng("iid-var")
        theta = np.array([0.3, -0.1])
        handle = p.new_handle(r)
        values = np.array([p.noisy_query(theta, handle, r) for _ in range(100_000)])
        assert np.var(values) == pytest.approx(sigma**2, rel=0.05)
        assert values.mean() == pytest.approx(p.true_loss(theta), abs=0.02)

    def test_crn_same_handle_shares_noise(self):
        p = make_quadratic(np.eye(2), NoiseMode.CRN, sigma=1.0)
        r = rng("crn")
        handle = p.new_handle(r)
        theta = np.array([1.0, 2.0])
        assert p.noisy_query(theta, handle, r) == p.noisy_query(theta, handle, r)
        # different handles disagree at the same point
        other = p.new_handle(r)
        assert p.noisy_query(theta, handle, r) != p.noisy_query(theta, other, r)

    def test_iid_handle_never_reuses_noise(self):
        p = make_quadratic(np.eye(2), NoiseMode.IID, sigma=1.0)
        r = rng("iid-fresh")
        handle = p.new_handle(r)
        theta = np.zeros(2)
        assert p.noisy_query(theta, handle, r) != p.noisy_query(theta, handle, r)

    def test_crn_linear_gradient_moments(self):
        # pathwise gradient at the optimum is the noise vector itself
        sigma, d = 0.5, 3
        p = make_quadratic(np.eye(d), NoiseMode.CRN, sigma=sigma, noise_law="linear")
        expected = d * sigma**2 * np.eye(d)
        assert np.allclose(p.crn_gradient_moments, expected)
        r = rng("crn-grad")
        g = p.noisy_gradient(p.theta_star, p.new_handle(r))
        assert g.shape == (d,)
        # away from the optimum the pathwise gradient is H theta + omega
        handle = p.new_handle(r)
        theta = np.array([1.0, -1.0, 2.0])
        assert np.allclose(p.noisy_gradient(theta, handle) - handle.omega, theta)

    def test_linear_law_requires_crn(self):
        with pytest.raises(ValueError):
            make_quadratic(np.eye(2), NoiseMode.IID, sigma=1.0, noise_law="linear")

    def test_batch_matches_scalar_loss(self):
        H = np.array([[2.0, 0.5], [0.5, 1.0]])
        p = make_quadratic(H)
        thetas = rng("batch").standard_normal((10, 2))
        batch = p.batch_true_loss(thetas)
        for i in range(10):
            assert batch[i] == pytest.approx(p.true_loss(thetas[i]), rel=1e-12)


class TestSkewQuartic:
    def test_zero_point(self):
        d = 6
        assert skew_quartic(np.zeros(d)) == 0.0
        assert np.allclose(skew_quartic_gradient(np.zeros(d)), 0.0)

    def test_hand_value_d2(self):
        assert skew_quartic(np.array([1.0, 1.0])) == pytest.approx(1.373125, abs=1e-12)

    def test_single_dominant_eigenvalue(self):
        for d in (5, 20):
            lam = np.sort(np.linalg.eigvalsh(skew_quartic_hessian(np.zeros(d))))
            assert lam[-1] > 5 * lam[-2]
            assert lam[0] > 0

    def test_gradient_matches_finite_differences(self):
        r = rng("skew-fd")
        for _ in range(5):
            theta = r.uniform(-2, 2, size=5)
            fd = central_difference_gradient(skew_quartic, theta, step=1e-6)
            an = skew_quartic_gradient(theta)
            assert np.allclose(an, fd, rtol=1e-5, atol=1e-7)

    def test_hessian_matches_finite_differences(self):
        r = rng("skew-fd2")
        theta = r.uniform(-1, 1, size=4)
        fd = central_difference_hessian(skew_quartic_gradient, theta, step=1e-5)
        assert np.allclose(skew_quartic_hessian(theta), fd, rtol=1e-4, atol=1e-6)

    def test_third_action_matches_hessian_differences(self):
        r = rng("skew-fd3")
        theta = r.uniform(-1, 1, size=4)
        u, v, w = r.standard_normal((3, 4))
        step = 1e-5
        dH = (skew_quartic_hessian(theta + step * w) - skew_quartic_hessian(theta - step * w)) / (
            2 * step
        )
        assert skew_quartic_third_action(theta, u, v, w) == pytest.approx(
            float(u @ dH @ v), rel=1e-4, abs=1e-8
        )

    def test_problem_wrapper(self):
        p = make_skew_quartic(5, NoiseMode.IID, sigma=1.0)
        assert p.noise_variance_at_optimum == 1.0
        assert np.allclose(p.theta_star, 0.0)
        r = rng("skew-noise")
        theta = np.ones(5)
        vals = np.array([p.noisy_query(theta, p.new_handle(r), r) for _ in range(20_000)])
        assert vals.mean() == pytest.approx(p.true_loss(theta), abs=3 * vals.std() / np.sqrt(len(vals)))

    def test_batch_loss_agrees(self):
        p = make_skew_quartic(3)
        thetas = rng("skew-batch").standard_normal((8, 3))
        batch = p.batch_true_loss(thetas)
        for i in range(8):
            assert batch[i] == pytest.approx(p.true_loss(thetas[i]), rel=1e-12)


@pytest.fixture(scope="module")
def components():
    return make_synthetic_components(10, 4, spawn_rng(5, 0, "components"))


class TestFiniteSum:

    def test_full_batch_is_exact(self, components):
        p = make_finite_sum(components, batch_size=10, kappa=0.1)
        r = rng("fs-full")
        for _ in range(5):
            theta = r.standard_normal(4)
            assert p.noisy_query(theta, p.new_handle(r), r) == pytest.approx(
                p.true_loss(theta), rel=1e-12
            )

    def test_magnitude_term(self, components):
        p = make_finite_sum(components, batch_size=2, kappa=0.1)
        theta = np.array([1.0, 2.0, 0.0, -1.0])
        terms = p.loss_terms(theta)
        assert terms["magnitude"] == pytest.approx(0.1 * 6.0, rel=1e-12)
        assert terms["magnitude"] + terms["component"] == pytest.approx(
            p.true_loss(theta), rel=1e-12
        )

    def test_subsampled_query_unbiased(self, components):
        p = make_finite_sum(components, batch_size=2, kappa=0.1)
        r = rng("fs-mc")
        theta = np.array([0.5, -0.5, 1.0, 0.0])
        vals = np.array([p.noisy_query(theta, p.new_handle(r), r) for _ in range(100_000)])
        se = vals.std() / np.sqrt(len(vals))
        assert vals.mean() == pytest.approx(p.true_loss(theta), abs=3 * se)

    def test_noise_variance_at_optimum_formula(self, components):
        p = make_finite_sum(components, batch_size=3, kappa=0.1)
        r = rng("fs-var")
        star = p.theta_star
        vals = np.array([p.noisy_query(star, p.new_handle(r), r) for _ in range(100_000)])
        assert vals.var() == pytest.approx(p.noise_variance_at_optimum, rel=0.05)

    def test_crn_handle_shares_subset(self, components):
        p = make_finite_sum(components, batch_size=1, kappa=0.1, noise_mode=NoiseMode.CRN)
        r = rng("fs-crn")
        handle = p.new_handle(r)
        theta = np.zeros(4)
        assert p.noisy_query(theta, handle, r) == p.noisy_query(theta, handle, r)

    def test_optimum_has_zero_gradient(self, components):
        p = make_finite_sum(components, batch_size=2, kappa=0.1)
        assert np.linalg.norm(p.gradient(p.theta_star)) < 1e-6

    def test_batch_size_validation(self, components):
        with pytest.raises(ValueError):
            make_finite_sum(components, batch_size=11, kappa=0.1)
        with pytest.raises(ValueError):
            make_finite_sum(components, batch_size=0, kappa=0.1)

    def test_analytic_derivatives_match_finite_differences(self, components):
        p = make_finite_sum(components, batch_size=2, kappa=0.1)
        r = rng("fs-fd")
        for _ in range(3):
            theta = r.uniform(-1, 1, 4)
            fd_g = central_difference_gradient(p.true_loss, theta, step=1e-6)
            assert np.allclose(p.gradient(theta), fd_g, rtol=1e-4, atol=1e-6)
        theta = r.uniform(-1, 1, 4)
        fd_h = central_difference_hessian(p.gradient, theta, step=1e-5)
        assert np.allclose(p.hessian(theta), fd_h, rtol=1e-4, atol=1e-6)


class TestAnalyticDerivativeConsistency:
    """Gradients and Hessians agree with central differences at random points."""

    @pytest.mark.parametrize(
        "factory",
        [
            lambda: make_quadratic(np.array([[3.0, 1.0], [1.0, 2.0]])),
            lambda: make_skew_quartic(5),
            lambda: make_finite_sum(
                make_synthetic_components(6, 3, spawn_rng(11, 0, "components")), 2, 0.05
            ),
        ],
        ids=["quadratic", "skew_quartic", "finite_sum"],
    )
    def test_twenty_random_points(self, factory):
        p = factory()
        r = rng("consistency")
        for _ in range(20):
            theta = r.uniform(-1.5, 1.5, p.dimension)
            fd = central_difference_gradient(p.true_loss, theta, step=1e-5)
            assert np.allclose(p.gradient(theta), fd, rtol=1e-4, atol=1e-5)


class TestBuildProblem:
    def test_quadratic_spec(self):
        p = build_problem(ProblemSpec("quadratic", {"hessian_diag": (4.0, 1.0), "sigma": 0.5}))
        assert p.dimension == 2
        assert p.noise_mode is NoiseMode.IID

    def test_skew_spec(self):
        p = build_problem(ProblemSpec("skew_quartic", {"dimension": 20, "sigma": 1.0}))
        assert p.dimension == 20

    def test_finite_sum_spec_deterministic(self):
        spec = ProblemSpec(
            "finite_sum",
            {"dimension": 5, "components": 8, "batch": 2, "kappa": 0.1, "component_seed": 3},
        )
        a, b = build_problem(spec), build_problem(spec)
        assert np.array_equal(a.theta_star, b.theta_star)
        theta = np.ones(5)
        assert a.true_loss(theta) == b.true_loss(theta)

    def test_unknown_problem(self):
        with pytest.raises(ValueError):
            build_problem(ProblemSpec("rosenbrock", {}))
