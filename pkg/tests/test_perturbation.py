import numpy as np
import pytest

from harp.core import spawn_rng
from harp.perturbation import (
    PerturbationKind,
    PerturbationScheme,
    batch_harp,
    batch_rdsa,
    batch_sfsa,
    batch_spsa,
    draw_harp,
    draw_rdsa,
    draw_sfsa,
    draw_spsa,
    harp_from_normal,
    rdsa_from_normal,
    sfsa_from_normal,
    spsa_from_signs,
)

N_MC = 100_000


def rng(tag="test", seed=123):
    return spawn_rng(seed, 0, tag)


class TestDefinitions:
    def test_spsa_components_are_signs(self):
        r = rng()
        for _ in range(50):
            draw = draw_spsa(3, r)
            assert set(np.unique(draw.delta)) <= {-1.0, 1.0}
            assert np.array_equal(draw.mapped, draw.delta)

    def test_rdsa_unit_norm_and_scaling(self):
        r = rng()
        for d in (1, 2, 7):
            draw = draw_rdsa(d, r)
            assert np.linalg.norm(draw.delta) == pytest.approx(1.0, abs=1e-12)
            assert np.allclose(draw.mapped, d * draw.delta)

    def test_sfsa_identity_map(self):
        draw = draw_sfsa(4, rng())
        assert np.array_equal(draw.mapped, draw.delta)

    def test_harp_identity_matches_sfsa(self):
        z = rng().standard_normal(5)
        eye = np.eye(5)
        shaped = harp_from_normal(eye, eye, z)
        plain = sfsa_from_normal(z)
        assert np.array_equal(shaped.delta, plain.delta)
        assert np.array_equal(shaped.mapped, plain.mapped)

    def test_harp_mapped_two_ways(self):
        r = rng()
        hhat = np.array([[4.0, 1.0], [1.0, 2.0]])
        from harp.hessian import shaping_factor

        C = shaping_factor(hhat)
        for _ in range(20):
            z = r.standard_normal(2)
            draw = harp_from_normal(C, hhat, z)
            # mapped = hhat C z must coincide with C^-T z
            alt = np.linalg.solve(C.T, z)
            assert np.allclose(draw.mapped, alt, atol=1e-10)


class TestOddMap:
    def test_spsa(self):
        signs = np.array([1.0, -1.0])
        pos, neg = spsa_from_signs(signs), spsa_from_signs(-signs)
        assert np.array_equal(neg.delta, -pos.delta)
        assert np.array_equal(neg.mapped, -pos.mapped)

    @pytest.mark.parametrize("factory", [rdsa_from_normal, sfsa_from_normal])
    def test_unit_gaussian_based(self, factory):
        r = rng()
        for _ in range(25):
            z = r.standard_normal(6)
            pos, neg = factory(z), factory(-z)
            assert np.array_equal(neg.delta, -pos.delta)
            assert np.array_equal(neg.mapped, -pos.mapped)

    def test_harp(self):
        hhat = np.diag([4.0, 1.0])
        C = np.diag([0.5, 1.0])
        r = rng()
        for _ in range(25):
            z = r.standard_normal(2)
            pos, neg = harp_from_normal(C, hhat, z), harp_from_normal(C, hhat, -z)
            assert np.array_equal(neg.delta, -pos.delta)
            assert np.array_equal(neg.mapped, -pos.mapped)


class TestMonteCarloMoments:
    def test_spsa_mean_and_covariance(self):
        deltas, _ = batch_spsa(N_MC, 2, rng("spsa-mc"))
        assert np.abs(deltas.mean(axis=0)).max() < 0.02
        cov = deltas.T @ deltas / N_MC
        assert np.abs(cov - np.eye(2)).max() < 0.05

    def test_sfsa_covariance(self):
        deltas, _ = batch_sfsa(N_MC, 2, rng("sfsa-mc"))
        cov = deltas.T @ deltas / N_MC
        assert np.abs(cov - np.eye(2)).max() < 0.05

    def test_rdsa_sphere_second_moment(self):
        # uniform on the unit sphere has E[delta delta^T] = I / d
        d = 4
        deltas, _ = batch_rdsa(N_MC, d, rng("rdsa-mc"))
        cov = deltas.T @ deltas / N_MC
        assert np.abs(cov - np.eye(d) / d).max() < 0.05

    @pytest.mark.parametrize("kind", [PerturbationKind.SPSA, PerturbationKind.RDSA, PerturbationKind.SFSA])
    def test_map_moment_identity_unit_schemes(self, kind):
        d = 4
        scheme = PerturbationScheme.unit(kind, d)
        deltas, mapped = scheme.draw_batch(N_MC, rng(f"{kind.value}-ident"))
        moment = mapped.T @ deltas / N_MC
        se = np.std(mapped[:, :, None] * deltas[:, None, :], axis=0) / np.sqrt(N_MC)
        assert np.all(np.abs(moment - np.eye(d)) <= np.maximum(3 * se, 1e-12))

    def test_map_moment_identity_shaped(self):
        hhat = np.array([[4.0, 1.0], [1.0, 2.0]])
        from harp.hessian import shaping_factor

        scheme = PerturbationScheme.shaped(shaping_factor(hhat), hhat)
        deltas, mapped = scheme.draw_batch(N_MC, rng("harp-ident"))
        moment = mapped.T @ deltas / N_MC
        se = np.std(mapped[:, :, None] * deltas[:, None, :], axis=0) / np.sqrt(N_MC)
        assert np.all(np.abs(moment - np.eye(2)) <= 3 * se + 1e-12)

    def test_harp_covariance_chain(self):
        hhat = np.diag([4.0, 1.0])
        C = np.diag([0.5, 1.0])
        deltas, mapped = batch_harp(C, hhat, N_MC, rng("harp-chain"))
        cov_delta = deltas.T @ deltas / N_MC
        cov_mapped = mapped.T @ mapped / N_MC
        target_delta = np.diag([0.25, 1.0])
        assert np.abs(np.diag(cov_delta) / np.diag(target_delta) - 1).max() < 0.05
        assert np.abs(np.diag(cov_mapped) / np.diag(hhat) - 1).max() < 0.05
        assert abs(cov_delta[0, 1]) < 0.02
        assert abs(cov_mapped[0, 1]) < 0.15  # scale ~ sqrt(4 * 1)


class TestSchemeObject:
    def test_unit_rejects_shaped_kind(self):
        with pytest.raises(ValueError):
            PerturbationScheme.unit(PerturbationKind.HARP, 3)

    def test_scalar_draws_match_batch_distribution(self):
        # same generator state: one scalar draw equals the first batch row
        d = 3
        a = draw_spsa(d, rng("pair", seed=9))
        b, _ = batch_spsa(1, d, rng("pair", seed=9))
        assert np.array_equal(a.delta, b[0])

    def test_scheme_draw_dispatch(self):
        for kind in (PerturbationKind.SPSA, PerturbationKind.RDSA, PerturbationKind.SFSA):
            draw = PerturbationScheme.unit(kind, 4).draw(rng(kind.value))
            assert draw.delta.shape == (4,)
        hhat = np.diag([2.0, 1.0])
        C = np.diag([1 / np.sqrt(2.0), 1.0])
        draw = PerturbationScheme.shaped(C, hhat).draw(rng("shaped"))
        assert draw.mapped.shape == (2,)
        assert np.allclose(draw.mapped, hhat @ draw.delta)
