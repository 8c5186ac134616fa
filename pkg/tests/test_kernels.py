"""Tangent/connectivity kernels, sharpness, Hutchinson, Lanczos."""

import numpy as np
import pytest

from ctklab import kernels as K
from ctklab import nets, transforms as tr
from ctklab.nets import Batch, NetworkSpec, ParamVector

from oracles import random_normalized_relu_net


def one_param_jacobian():
    # f(x) = theta * x at x in {1, 2}: J rows [x, 1] restricted to the weight
    spec = NetworkSpec((1, 1), activation="identity")
    p = ParamVector(np.array([2.0, 0.0]), spec)
    X = np.array([[1.0], [2.0]])
    J = nets.jacobian_params(spec, p, None, X)
    return spec, p, X, J


class TestGramAssembly:
    def test_identity_jacobian_gives_identity_ntk(self):
        ntk = K.empirical_ntk(np.eye(4))
        np.testing.assert_array_equal(ntk.values, np.eye(4))

    def test_one_param_ntk_by_hand(self):
        # weight column [1, 2], bias column [1, 1]
        _, _, _, J = one_param_jacobian()
        ntk = K.empirical_ntk(J)
        np.testing.assert_allclose(ntk.values, [[2.0, 3.0], [3.0, 5.0]])

    def test_one_param_ctk_by_hand(self):
        # theta = (2, 0): connectivity columns [2x, 0] -> [[4,8],[8,16]]
        _, p, _, J = one_param_jacobian()
        ctk = K.empirical_ctk(J, p)
        np.testing.assert_allclose(ctk.values, [[4.0, 8.0], [8.0, 16.0]])

    def test_unit_parameters_make_kernels_identical(self):
        spec = NetworkSpec((2, 5, 2), activation="tanh")
        p = ParamVector(np.ones(spec.n_params), spec)
        X = np.random.default_rng(0).standard_normal((4, 2))
        J = nets.jacobian_params(spec, p, None, X)
        np.testing.assert_array_equal(K.empirical_ctk(J, p).values,
                                      K.empirical_ntk(J).values)

    def test_kernel_validation(self):
        spec, p, norm = random_normalized_relu_net()
        X = np.random.default_rng(1).standard_normal((10, 4))
        J = nets.jacobian_params(spec, p, norm, X)
        K.empirical_ctk(J, p).validate()
        bad = K.KernelMatrix("ntk", np.array([[1.0, 2.0], [0.0, 1.0]]))
        with pytest.raises(ValueError, match="symmetric"):
            bad.validate()


class TestMaskedKernels:
    def test_all_true_mask_equals_unmasked(self):
        spec, p, norm = random_normalized_relu_net()
        X = np.random.default_rng(2).standard_normal((6, 4))
        J = nets.jacobian_params(spec, p, norm, X)
        mask = np.ones(p.n_params, dtype=bool)
        np.testing.assert_allclose(K.masked_kernel(J, p, mask, "ctk").values,
                                   K.empirical_ctk(J, p).values)

    def test_all_false_mask_is_zero(self):
        spec, p, norm = random_normalized_relu_net()
        X = np.random.default_rng(2).standard_normal((6, 4))
        J = nets.jacobian_params(spec, p, norm, X)
        mask = np.zeros(p.n_params, dtype=bool)
        assert np.all(K.masked_kernel(J, p, mask, "ntk").values == 0.0)

    def test_decay_scaling_law(self):
        # masked tangent kernel scales by 1/gamma^2 under the decay map,
        # the masked connectivity kernel stays fixed
        spec, p, norm = random_normalized_relu_net()
        mask = tr.scale_invariant_mask(spec)
        X = np.random.default_rng(3).standard_normal((8, 4))
        gamma = 0.5
        t = tr.TransformSpec("weight_decay_scale", gamma=gamma)
        p2, n2 = tr.apply_transform(spec, p, norm, t)
        J1 = nets.jacobian_params(spec, p, norm, X)
        J2 = nets.jacobian_params(spec, p2, n2, X)
        ntk1 = K.masked_kernel(J1, p, mask, "ntk").values
        ntk2 = K.masked_kernel(J2, p2, mask, "ntk").values
        np.testing.assert_allclose(ntk2, ntk1 / gamma**2, rtol=1e-10)
        ctk1 = K.masked_kernel(J1, p, mask, "ctk").values
        ctk2 = K.masked_kernel(J2, p2, mask, "ctk").values
        np.testing.assert_allclose(ctk2, ctk1, rtol=1e-10)


class TestConnectivityInvariance:
    def test_ctk_invariant_under_catalog(self):
        spec, p, norm = random_normalized_relu_net(widths=(4, 24, 16, 3),
                                                   normalize=(1,))
        X = np.random.default_rng(4).standard_normal((12, 4))
        J = nets.jacobian_params(spec, p, norm, X)
        C0 = K.empirical_ctk(J, p).values
        ref = np.linalg.norm(C0)
        for t in tr.sample_transforms(spec, 20, seed=5):
            p2, n2 = tr.apply_transform(spec, p, norm, t)
            C1 = K.empirical_ctk(nets.jacobian_params(spec, p2, n2, X), p2).values
            assert np.linalg.norm(C1 - C0) / ref <= 1e-8, t

    def test_sharpness_invariant_under_catalog(self):
        spec, p, norm = random_normalized_relu_net()
        X = np.random.default_rng(6).standard_normal((10, 4))
        cs0 = K.connectivity_sharpness_exact(
            K.empirical_ctk(nets.jacobian_params(spec, p, norm, X), p))
        for t in tr.sample_transforms(spec, 10, seed=7):
            p2, n2 = tr.apply_transform(spec, p, norm, t)
            cs1 = K.connectivity_sharpness_exact(
                K.empirical_ctk(nets.jacobian_params(spec, p2, n2, X), p2))
            assert abs(cs1 - cs0) / cs0 <= 1e-8


class TestSharpnessTrace:
    def test_identity_trace(self):
        assert K.connectivity_sharpness_exact(np.eye(3)) == 3.0

    def test_trace_equals_eigenvalue_sum(self):
        spec, p, norm = random_normalized_relu_net()
        X = np.random.default_rng(8).standard_normal((10, 4))
        C = K.empirical_ctk(nets.jacobian_params(spec, p, norm, X), p)
        tr_direct = K.connectivity_sharpness_exact(C)
        tr_eigs = K.dense_spectrum(C).eigenvalues.sum()
        assert abs(tr_direct - tr_eigs) <= 1e-8 * max(1.0, abs(tr_direct))

    def test_one_param_example(self):
        _, p, _, J = one_param_jacobian()
        assert K.connectivity_sharpness_exact(K.empirical_ctk(J, p)) == 20.0


class TestHutchinson:
    def test_unbiased_against_exact_trace(self):
        spec, p, norm = random_normalized_relu_net(widths=(3, 10, 2))
        X = np.random.default_rng(9).standard_normal((20, 3))
        C = K.empirical_ctk(nets.jacobian_params(spec, p, norm, X), p)
        exact = K.connectivity_sharpness_exact(C)
        est = K.connectivity_sharpness_hutchinson(spec, p, norm, X,
                                                  probes=256, seed=0)
        assert abs(est.value - exact) <= 3.0 * est.standard_error

    def test_identity_kernel_probe_values_exact(self):
        # bias-only net on one input: the connectivity kernel is I_K, so
        # every probe value is ||z||^2 = NK exactly
        spec = NetworkSpec((2, 4), activation="identity")
        theta = np.zeros(spec.n_params)
        p = ParamVector(theta, spec)
        p.bias(1)[:] = 1.0
        X = np.array([[0.3, -0.8]])
        C = K.empirical_ctk(nets.jacobian_params(spec, p, None, X), p)
        np.testing.assert_allclose(C.values, np.eye(4))
        est = K.connectivity_sharpness_hutchinson(spec, p, None, X, probes=16,
                                                  seed=1)
        np.testing.assert_array_equal(est.per_probe_values, [4.0] * 16)

    def test_batched_probing_matches_exact_trace(self):
        spec, p, norm = random_normalized_relu_net(widths=(3, 8, 2))
        X = np.random.default_rng(10).standard_normal((30, 3))
        C = K.empirical_ctk(nets.jacobian_params(spec, p, norm, X), p)
        exact = K.connectivity_sharpness_exact(C)
        est = K.connectivity_sharpness_hutchinson(spec, p, norm, X, probes=512,
                                                  batch_size=7, seed=3)
        assert abs(est.value - exact) <= 3.0 * est.standard_error

    def test_standard_error_scaling(self):
        # 4x the probes should halve the standard error (within 20%,
        # averaged over repetitions)
        spec, p, norm = random_normalized_relu_net(widths=(3, 8, 2))
        X = np.random.default_rng(11).standard_normal((16, 3))
        ratios = []
        for rep in range(10):
            lo = K.connectivity_sharpness_hutchinson(spec, p, norm, X,
                                                     probes=64, seed=100 + rep)
            hi = K.connectivity_sharpness_hutchinson(spec, p, norm, X,
                                                     probes=256, seed=900 + rep)
            ratios.append(hi.standard_error / lo.standard_error)
        assert abs(np.mean(ratios) - 0.5) <= 0.1

    def test_probe_guard(self):
        spec, p, norm = random_normalized_relu_net()
        with pytest.raises(ValueError):
            K.connectivity_sharpness_hutchinson(spec, p, norm,
                                                np.zeros((2, 4)), probes=0)


class TestFisherTrace:
    def test_zero_at_interpolating_minimum(self):
        spec = NetworkSpec((1, 1), activation="identity")
        p = ParamVector(np.array([2.0, 0.0]), spec)
        x = np.array([[1.0], [2.0]])
        batch = Batch(x, 2.0 * x, "S_P")
        assert K.fisher_trace(spec, p, None, batch) == 0.0

    def test_one_param_analytic(self):
        # f(x) = w x + b with w=1, b=0 on (x, y) = (1, 2), (2, 1):
        # residuals r = (-1, 1); per-sample grads r_n * (x_n, 1)
        spec = NetworkSpec((1, 1), activation="identity")
        p = ParamVector(np.array([1.0, 0.0]), spec)
        batch = Batch(np.array([[1.0], [2.0]]), np.array([[2.0], [1.0]]), "S_P")
        expect = 1.0 * (1 + 1) + 1.0 * (4 + 1)
        assert abs(K.fisher_trace(spec, p, None, batch) - expect) < 1e-12


class TestLanczos:
    def test_diag_exact_after_dim_iterations(self):
        A = np.diag([1.0, 2.0, 3.0])
        spec = K.lanczos_spectrum(lambda v: A @ v, dim=3, iters=3, seed=0)
        np.testing.assert_allclose(spec.eigenvalues, [3.0, 2.0, 1.0],
                                   atol=1e-10)

    def test_top_ritz_values_match_dense(self):
        rng = np.random.default_rng(12)
        B = rng.standard_normal((100, 140))
        A = B @ B.T
        dense = np.linalg.eigvalsh(A)[::-1]
        spec = K.lanczos_spectrum(lambda v: A @ v, dim=100, iters=100, seed=0)
        np.testing.assert_allclose(spec.eigenvalues[:10], dense[:10],
                                   rtol=1e-6)

    def test_zero_matrix_breaks_down_to_zero(self):
        spec = K.lanczos_spectrum(lambda v: np.zeros_like(v), dim=5, iters=5,
                                  seed=0)
        assert np.all(spec.eigenvalues == 0.0)
        assert spec.iterations < 5

    def test_iters_bounds(self):
        with pytest.raises(ValueError):
            K.lanczos_spectrum(lambda v: v, dim=3, iters=4, seed=0)


class TestKernelSpectrumDispatch:
    def test_dense_below_limit(self):
        k = K.KernelMatrix("ntk", np.eye(5))
        spec, truncated = K.kernel_spectrum(k, dense_limit=10)
        assert spec.method == "dense" and not truncated

    def test_lanczos_above_limit(self):
        rng = np.random.default_rng(0)
        B = rng.standard_normal((30, 40))
        k = K.KernelMatrix("ctk", B @ B.T)
        spec, truncated = K.kernel_spectrum(k, dense_limit=10, lanczos_iters=8)
        assert spec.method == "lanczos" and truncated
        assert len(spec.eigenvalues) <= 8


class TestCsvExport:
    def test_roundtrip(self, tmp_path):
        k = K.KernelMatrix("ntk", np.array([[2.0, 1.0], [1.0, 3.0]]))
        path = tmp_path / "kernel.csv"
        K.kernel_to_csv(k, path)
        back = np.loadtxt(path, delimiter=",")
        np.testing.assert_allclose(back, k.values)
