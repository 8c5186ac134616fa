"""Scaling-transform catalog: preservation, composition, diagonality."""

import numpy as np
import pytest

from ctklab import nets, transforms as tr
from ctklab.nets import NetworkSpec

from oracles import random_normalized_relu_net


def probe_inputs(spec, n=100, seed=42):
    return np.random.default_rng(seed).standard_normal((n, spec.input_dim))


class TestApplyTransform:
    def test_gamma_one_is_identity(self):
        spec, p, norm = random_normalized_relu_net()
        for t in [tr.TransformSpec("activation_rescale", layer=2, unit=0, gamma=1.0),
                  tr.TransformSpec("norm_scale", layer=1, gamma=1.0),
                  tr.TransformSpec("weight_decay_scale", gamma=1.0)]:
            p2, n2 = tr.apply_transform(spec, p, norm, t)
            np.testing.assert_array_equal(p2.values, p.values)
            np.testing.assert_array_equal(n2.running_var[1], norm.running_var[1])

    def test_rescale_edge_pattern(self):
        # input edges of the unit x2, output edges x0.5, rest untouched
        spec = NetworkSpec((3, 4, 2), activation="relu")
        p = nets.init_params(spec, 0)
        k = 1
        t = tr.TransformSpec("activation_rescale", layer=1, unit=k, gamma=2.0)
        p2, _ = tr.apply_transform(spec, p, nets.NormState.fresh(spec), t)
        np.testing.assert_allclose(p2.weight(1)[k], 2.0 * p.weight(1)[k])
        assert p2.bias(1)[k] == 2.0 * p.bias(1)[k]
        np.testing.assert_allclose(p2.weight(2)[:, k], 0.5 * p.weight(2)[:, k])
        others = np.ones(4, dtype=bool)
        others[k] = False
        np.testing.assert_array_equal(p2.weight(1)[others], p.weight(1)[others])
        np.testing.assert_array_equal(p2.weight(2)[:, others], p.weight(2)[:, others])

    def test_norm_scale_updates_statistics(self):
        spec, p, norm = random_normalized_relu_net()
        g = np.linspace(0.5, 2.0, 16)
        t = tr.TransformSpec("norm_scale", layer=1, gamma=tuple(g))
        _, n2 = tr.apply_transform(spec, p, norm, t)
        np.testing.assert_allclose(n2.running_mean[1], norm.running_mean[1] * g)
        # variance co-transforms by gamma^2 (through the eps-shifted
        # denominator, so the normalized output is reproduced exactly)
        np.testing.assert_allclose(n2.running_var[1],
                                   norm.running_var[1] * g * g,
                                   rtol=1e-9)
        np.testing.assert_allclose(n2.running_var[1] + norm.epsilon,
                                   (norm.running_var[1] + norm.epsilon) * g * g)

    def test_rejects_rescale_on_tanh(self):
        spec = NetworkSpec((2, 3, 1), activation="tanh")
        p = nets.init_params(spec, 0)
        t = tr.TransformSpec("activation_rescale", layer=1, unit=0, gamma=2.0)
        with pytest.raises(ValueError, match="homogeneous"):
            tr.apply_transform(spec, p, nets.NormState.fresh(spec), t)

    def test_rejects_rescale_on_normalized_layer(self):
        spec, p, norm = random_normalized_relu_net()
        t = tr.TransformSpec("activation_rescale", layer=1, unit=0, gamma=2.0)
        with pytest.raises(ValueError, match="normalized"):
            tr.apply_transform(spec, p, norm, t)

    def test_rejects_norm_scale_off_normalized_layer(self):
        spec, p, norm = random_normalized_relu_net()
        t = tr.TransformSpec("norm_scale", layer=2, gamma=0.5)
        with pytest.raises(ValueError):
            tr.apply_transform(spec, p, norm, t)

    def test_rejects_nonpositive_gamma(self):
        spec, p, norm = random_normalized_relu_net()
        with pytest.raises(ValueError):
            tr.apply_transform(spec, p, norm,
                               tr.TransformSpec("norm_scale", layer=1, gamma=-1.0))


class TestFunctionPreservation:
    def test_identity_transform_zero_gap(self):
        spec, p, norm = random_normalized_relu_net()
        t = tr.TransformSpec("norm_scale", layer=1, gamma=1.0)
        chk = tr.verify_function_preserving(spec, p, norm, t, probe_inputs(spec))
        assert chk.max_abs_gap == 0.0 and chk.passed

    def test_relu_rescale_gamma_three(self):
        spec, p, norm = random_normalized_relu_net()
        t = tr.TransformSpec("activation_rescale", layer=2, unit=5, gamma=3.0)
        chk = tr.verify_function_preserving(spec, p, norm, t, probe_inputs(spec),
                                            tol=1e-9)
        assert chk.passed

    def test_norm_scale_half_preserves_forward(self):
        spec, p, norm = random_normalized_relu_net()
        t = tr.TransformSpec("norm_scale", layer=1, gamma=0.5)
        chk = tr.verify_function_preserving(spec, p, norm, t,
                                            probe_inputs(spec, n=100), tol=1e-10)
        assert chk.passed

    def test_whole_catalog_on_probes(self):
        spec, p, norm = random_normalized_relu_net(widths=(4, 16, 12, 3),
                                                   normalize=(1,))
        X = probe_inputs(spec)
        for t in tr.sample_transforms(spec, 20, seed=0):
            chk = tr.verify_function_preserving(spec, p, norm, t, X, tol=1e-9)
            assert chk.passed, (t, chk.max_abs_gap)

    def test_empty_probe_rejected(self):
        spec, p, norm = random_normalized_relu_net()
        t = tr.TransformSpec("weight_decay_scale", gamma=0.5)
        with pytest.raises(ValueError):
            tr.verify_function_preserving(spec, p, norm, t, np.zeros((0, 4)))


class TestCompositionAndDiagonality:
    def test_rescale_roundtrip(self):
        spec, p, norm = random_normalized_relu_net()
        g = 1.73
        t1 = tr.TransformSpec("activation_rescale", layer=2, unit=2, gamma=g)
        t2 = tr.TransformSpec("activation_rescale", layer=2, unit=2, gamma=1 / g)
        p1, n1 = tr.apply_transform(spec, p, norm, t1)
        p2, _ = tr.apply_transform(spec, p1, n1, t2)
        assert np.abs(p2.values - p.values).max() <= 1e-12

    def test_every_transform_is_diagonal(self):
        # coordinate j changes only by a multiplicative factor
        spec, p, norm = random_normalized_relu_net()
        for t in tr.sample_transforms(spec, 10, seed=1):
            scale = tr.transform_scale_vector(spec, t)
            p2, _ = tr.apply_transform(spec, p, norm, t)
            np.testing.assert_array_equal(p2.values, p.values * scale)
            assert np.all(scale > 0)


class TestScaleInvariantMask:
    def test_no_normalization_all_false(self):
        spec = NetworkSpec((3, 4, 2), activation="relu")
        assert not tr.scale_invariant_mask(spec).any()

    def test_counts_weights_and_biases_of_normalized_layer(self):
        spec = NetworkSpec((2, 3, 1), normalize_after=frozenset({1}))
        mask = tr.scale_invariant_mask(spec)
        assert mask.sum() == 2 * 3 + 3
        entries = nets.index_map(spec)
        for j, e in enumerate(entries):
            expect = e["layer"] == 1 and e["role"] in ("weight", "bias")
            assert mask[j] == expect
