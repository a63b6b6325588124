import math

import numpy as np
import pytest

from opkern.gram import assemble_gram
from opkern.kernels import make_kernel
from opkern.rkhs import (
    RkhsElement,
    TransformFamily,
    chain_apply,
    covariance,
    element_to_json_dict,
    evaluate_element,
    feature_adjoint,
    feature_embed,
    frame_projection,
    inner_product,
    make_context,
    onb_expansion,
    section,
    transformed_adjoint,
    transformed_embed,
    verify_identities,
    zero_element,
)

GAUSS1 = "gauss(sigma=1,ell=1,dim=1)"


@pytest.fixture
def gauss_ctx():
    return make_context(make_kernel(GAUSS1), [[0], [1]])


@pytest.fixture
def diagexp_ctx():
    return make_context(make_kernel("diagexp3"), [[0], [1]])


@pytest.fixture
def norm_ctx():
    k = make_kernel("normalized(inner=gauss(sigma=2,ell=1,dim=2))")
    return make_context(k, [[0.0], [0.6], [1.3], [2.1], [3.0]])


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class TestContext:
    def test_gaussian_two_site_gram(self, gauss_ctx):
        e = math.exp(-0.5)
        np.testing.assert_allclose(gauss_ctx.gram.data, [[1, e], [e, 1]])

    def test_diagexp_gram(self, diagexp_ctx):
        D = np.diag([1.0, math.exp(-1), math.exp(-1)])
        expected = np.block([[np.eye(3), D], [D, np.eye(3)]])
        np.testing.assert_allclose(diagexp_ctx.gram.data, expected)

    def test_indefinite_raw_rejected(self):
        k = make_kernel(GAUSS1)
        with pytest.raises(ValueError, match="not PSD"):
            make_context(k, [[0], [1]], raw_data=[[0.0, 1.0], [1.0, 0.0]])

    def test_element_equality_mod_null_space(self):
        # rank-deficient Gram: duplicated site makes sections (0,a), (1,a)
        # identical in the RKHS though their coefficients differ
        ctx = make_context(make_kernel(GAUSS1), [[0], [0]])
        assert section(ctx, 0, [1]).is_equal(section(ctx, 1, [1]))
        assert not section(ctx, 0, [1]).is_equal(zero_element(ctx))


class TestInnerProduct:
    def test_section_self_product(self, diagexp_ctx):
        x = section(diagexp_ctx, 0, [0, 1, 0])
        assert inner_product(x, x) == pytest.approx(1.0)

    def test_cross_sections(self, gauss_ctx):
        a = section(gauss_ctx, 0, [1])
        b = section(gauss_ctx, 1, [1])
        assert inner_product(a, b) == pytest.approx(math.exp(-0.5))

    def test_zero_element(self, gauss_ctx):
        z = zero_element(gauss_ctx)
        y = RkhsElement(gauss_ctx, [1.0, -2.0])
        assert inner_product(z, y) == 0.0

    def test_context_mismatch(self, gauss_ctx, diagexp_ctx):
        with pytest.raises(ValueError, match="different contexts"):
            inner_product(section(gauss_ctx, 0, [1]), zero_element(diagexp_ctx))


class TestEvaluateElement:
    def test_section_off_grid(self, gauss_ctx):
        x = section(gauss_ctx, 0, [1])
        assert evaluate_element(x, [1], [1]) == pytest.approx(math.exp(-0.5))

    def test_zero_everywhere(self, diagexp_ctx):
        z = zero_element(diagexp_ctx)
        assert evaluate_element(z, [0.37], [1, 1, 1]) == 0.0

    def test_reproducing_on_grid(self, diagexp_ctx):
        x = section(diagexp_ctx, 1, [0, 1, 0])
        val = evaluate_element(x, [1], [0, 1, 0])
        assert val == pytest.approx(1.0)  # K(s,s)[1,1]

    def test_matches_gram_action_on_grid(self, norm_ctx):
        rng = np.random.default_rng(1)
        x = RkhsElement(norm_ctx, rng.standard_normal(norm_ctx.size))
        gc = norm_ctx.gram.data @ x.coeffs
        for i in range(norm_ctx.n):
            for axis in range(norm_ctx.d):
                e = np.eye(norm_ctx.d)[axis]
                assert evaluate_element(x, norm_ctx.sites[i], e) == pytest.approx(
                    gc[i * norm_ctx.d + axis], rel=1e-12, abs=1e-12
                )


class TestFeatureOperators:
    def test_embed_norm_is_covariance_form(self, diagexp_ctx):
        x = feature_embed(diagexp_ctx, 0, [0, 1, 0])
        assert inner_product(x, x) == pytest.approx(1.0)

    def test_embed_zero(self, diagexp_ctx):
        assert feature_embed(diagexp_ctx, 1, [0, 0, 0]).g_norm() == 0.0

    def test_isometry_under_normalization(self, norm_ctx):
        a = np.array([0.6, -0.8])
        x = feature_embed(norm_ctx, 2, a)
        assert x.g_norm() == pytest.approx(1.0, abs=1e-10)

    def test_adjoint_on_section(self, diagexp_ctx):
        x = section(diagexp_ctx, 1, [0, 1, 0])
        np.testing.assert_allclose(
            feature_adjoint(diagexp_ctx, 0, x), [0, math.exp(-1), 0]
        )

    def test_adjoint_zero(self, diagexp_ctx):
        np.testing.assert_array_equal(
            feature_adjoint(diagexp_ctx, 0, zero_element(diagexp_ctx)), np.zeros(3)
        )

    def test_adjoint_same_site(self, gauss_ctx):
        x = section(gauss_ctx, 0, [1])
        assert feature_adjoint(gauss_ctx, 0, x) == pytest.approx([1.0])

    def test_covariance_values(self):
        ctx = make_context(make_kernel("gauss(sigma=2,ell=1,dim=1)"), [[0]])
        np.testing.assert_allclose(covariance(ctx, 0), [[4.0]])

    def test_covariance_diagexp(self, diagexp_ctx):
        np.testing.assert_allclose(covariance(diagexp_ctx, 0), np.eye(3))

    def test_covariance_rational2(self):
        ctx = make_context(make_kernel("rational2"), [[0], [1]])
        np.testing.assert_allclose(covariance(ctx, 0), np.ones((2, 2)))

    def test_covariance_equals_adjoint_embed_composition(self, norm_ctx):
        d = norm_ctx.d
        for i in range(norm_ctx.n):
            comp = np.column_stack(
                [
                    feature_adjoint(norm_ctx, i, feature_embed(norm_ctx, i, e))
                    for e in np.eye(d)
                ]
            )
            assert np.abs(comp - covariance(norm_ctx, i)).max() <= 1e-12

    def test_index_out_of_range(self, gauss_ctx):
        with pytest.raises(IndexError):
            covariance(gauss_ctx, 5)


class TestFrameProjection:
    def test_fixes_own_range_under_normalization(self, norm_ctx):
        x = section(norm_ctx, 1, [1, 0])
        assert frame_projection(norm_ctx, 1, x).g_distance(x) <= 1e-10

    def test_zero(self, diagexp_ctx):
        z = zero_element(diagexp_ctx)
        assert frame_projection(diagexp_ctx, 0, z).g_norm() == 0.0

    def test_section_mapping_oracle(self, diagexp_ctx):
        # dense oracle: coefficients e_0 (x) (G c)_0
        x = section(diagexp_ctx, 1, [0, 1, 0])
        out = frame_projection(diagexp_ctx, 0, x)
        expected = section(diagexp_ctx, 0, [0, math.exp(-1), 0])
        np.testing.assert_allclose(out.coeffs, expected.coeffs)


class TestTransformedFamily:
    def test_identity_transforms_match_feature_embed(self, diagexp_ctx):
        fam = TransformFamily(diagexp_ctx, [np.eye(3)] * 2)
        a = [0.3, -1.0, 0.7]
        np.testing.assert_array_equal(
            transformed_embed(fam, 1, a).coeffs, feature_embed(diagexp_ctx, 1, a).coeffs
        )
        x = RkhsElement(diagexp_ctx, np.arange(6.0))
        np.testing.assert_allclose(
            transformed_adjoint(fam, 0, x), feature_adjoint(diagexp_ctx, 0, x)
        )

    def test_zero_transform(self, diagexp_ctx):
        fam = TransformFamily(diagexp_ctx, [np.zeros((3, 3))] * 2)
        assert transformed_embed(fam, 0, [1, 1, 1]).g_norm() == 0.0

    def test_rotation_preserves_norm_scalar_kernel(self):
        ctx = make_context(make_kernel("gauss(sigma=2,ell=1,dim=2)"), [[0], [1]])
        fam = TransformFamily(ctx, [rotation(0.3), rotation(-1.1)])
        a = np.array([0.6, 0.8])  # unit
        w = transformed_embed(fam, 0, a)
        assert inner_product(w, w) == pytest.approx(4.0)  # sigma^2

    def test_adjoint_oracle(self, diagexp_ctx):
        # dense oracle: B^T (G c)_i
        B1 = np.diag([0.0, 1.0, 0.0])
        fam = TransformFamily(diagexp_ctx, [B1, np.eye(3)])
        x = section(diagexp_ctx, 1, [1, 1, 1])
        expected = B1.T @ (diagexp_ctx.gram.data @ x.coeffs)[:3]
        np.testing.assert_allclose(transformed_adjoint(fam, 0, x), expected)
        np.testing.assert_allclose(expected, [0, math.exp(-1), 0])

    def test_w_adjoint_composition_identity(self, norm_ctx):
        rng = np.random.default_rng(11)
        mats = [rng.standard_normal((2, 2)) for _ in range(norm_ctx.n)]
        fam = TransformFamily(norm_ctx, mats)
        b = rng.standard_normal(2)
        i, j = 1, 3
        lhs = transformed_adjoint(fam, i, transformed_embed(fam, j, b))
        rhs = mats[i].T @ norm_ctx.gram.block(i, j) @ mats[j] @ b
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_unitary_flag(self, norm_ctx):
        fam = TransformFamily(norm_ctx, [rotation(i * 0.4) for i in range(5)])
        assert fam.is_unitary()
        fam2 = TransformFamily(norm_ctx, [2 * np.eye(2)] * 5)
        assert not fam2.is_unitary()


class TestChainApply:
    def test_identity_transform_projection_fixes_section(self, norm_ctx):
        fam = TransformFamily(norm_ctx, [np.eye(2)] * norm_ctx.n)
        x = section(norm_ctx, 2, [0.0, 1.0])
        out = chain_apply(fam, [2], x)
        assert out.g_distance(x) <= 1e-10

    def test_idempotent_with_unitary_transforms(self, norm_ctx):
        fam = TransformFamily(norm_ctx, [rotation(i * 0.7) for i in range(5)])
        rng = np.random.default_rng(2)
        x = RkhsElement(norm_ctx, rng.standard_normal(norm_ctx.size))
        once = chain_apply(fam, [3], x)
        twice = chain_apply(fam, [3, 3], x)
        assert twice.g_distance(once) <= 1e-10 * max(x.g_norm(), 1.0)

    def test_matches_dense_matrix_oracle(self):
        # explicit nd x nd factors for each W_i W_i^*
        ctx = make_context(
            make_kernel("gauss(sigma=1,ell=1,dim=2)"), [[0], [0.5], [1.2], [2.0]]
        )
        rng = np.random.default_rng(9)
        mats = [rng.standard_normal((2, 2)) for _ in range(4)]
        fam = TransformFamily(ctx, mats)
        x = RkhsElement(ctx, rng.standard_normal(ctx.size))
        G = ctx.gram.data
        n, d = ctx.n, ctx.d

        def dense(i):
            S = np.zeros((d, n * d))
            S[:, i * d : (i + 1) * d] = np.eye(d)
            return S.T @ mats[i] @ mats[i].T @ S @ G

        out = chain_apply(fam, [0, 2, 1], x)
        expected = dense(0) @ dense(2) @ dense(1) @ x.coeffs
        assert np.abs(out.coeffs - expected).max() <= 1e-10

    def test_empty_indices(self, norm_ctx):
        fam = TransformFamily(norm_ctx, [np.eye(2)] * 5)
        with pytest.raises(ValueError, match="nonempty"):
            chain_apply(fam, [], zero_element(norm_ctx))


class TestOnbExpansion:
    def test_rank_one_constant_kernel(self):
        ctx = make_context(make_kernel("gauss(sigma=1,ell=1000000,dim=1)"), [[0], [0.5], [1]])
        basis = onb_expansion(ctx, 1e-8)
        assert len(basis) == 1
        G = ctx.gram.data
        vals = G @ basis[0].coeffs
        np.testing.assert_allclose(np.outer(vals, vals), G, atol=1e-8)

    def test_gaussian_two_sites(self, gauss_ctx):
        # oracle: 2x2 eigendecomposition reconstructs G exactly
        basis = onb_expansion(gauss_ctx, 1e-12)
        assert len(basis) == 2
        G = gauss_ctx.gram.data
        recon = sum(np.outer(G @ b.coeffs, G @ b.coeffs) for b in basis)
        assert np.abs(recon - G).max() <= 1e-10

    def test_g_orthonormal(self, norm_ctx):
        basis = onb_expansion(norm_ctx, 1e-12)
        G = norm_ctx.gram.data
        U = np.column_stack([b.coeffs for b in basis])
        gram_of_basis = U.T @ G @ U
        assert np.abs(gram_of_basis - np.eye(len(basis))).max() <= 1e-10

    def test_all_truncated(self, gauss_ctx):
        with pytest.raises(ValueError, match="truncated"):
            onb_expansion(gauss_ctx, 2.0)


class TestVerifyIdentities:
    def test_normalized_gaussian_all_pass(self, norm_ctx):
        report = verify_identities(norm_ctx, trials=100, seed=1)
        assert report.all_pass
        assert max(r["max_residual"] for r in report.results.values()) <= 1e-8

    def test_with_transform_family(self, norm_ctx):
        rng = np.random.default_rng(4)
        fam = TransformFamily(
            norm_ctx, [rng.standard_normal((2, 2)) for _ in range(5)]
        )
        report = verify_identities(norm_ctx, fam=fam, trials=60, seed=2)
        assert report.all_pass
        assert "w_chain" in report.results

    def test_unitary_family_projection_identities(self, norm_ctx):
        fam = TransformFamily(norm_ctx, [rotation(i * 0.5) for i in range(5)])
        report = verify_identities(norm_ctx, fam=fam, trials=60, seed=3)
        assert report.all_pass
        assert "w_isometry" in report.results
        assert "w_projection_idempotent" in report.results

    def test_corrupted_gram_caught(self):
        k = make_kernel(GAUSS1)
        g = assemble_gram(k, [[0], [1]])
        corrupted = g.data.copy()
        corrupted[0, 1] += 0.1
        ctx = make_context(k, [[0], [1]], raw_data=corrupted)
        report = verify_identities(ctx, trials=20, seed=0)
        assert not report.results["factorization_consistency"]["pass"]

    def test_single_site_degenerate(self):
        ctx = make_context(make_kernel(GAUSS1), [[0]])
        report = verify_identities(ctx, trials=10, seed=0)
        assert report.all_pass

    def test_trials_validation(self, gauss_ctx):
        with pytest.raises(ValueError):
            verify_identities(gauss_ctx, trials=0)

    def test_report_serializable(self, norm_ctx):
        import json

        report = verify_identities(norm_ctx, trials=5, seed=0)
        payload = report.to_json_dict()
        json.dumps(payload)
        assert all({"max_residual", "tolerance", "pass"} == set(v) for v in payload.values())

    def test_deterministic_given_seed(self, norm_ctx):
        r1 = verify_identities(norm_ctx, trials=30, seed=77)
        r2 = verify_identities(norm_ctx, trials=30, seed=77)
        assert r1.to_json_dict() == r2.to_json_dict()


class TestSerialization:
    def test_element_json(self, gauss_ctx):
        x = section(gauss_ctx, 0, [1])
        payload = element_to_json_dict(x)
        assert payload["coeffs"] == [1.0, 0.0]
        assert isinstance(payload["context_hash"], str)
