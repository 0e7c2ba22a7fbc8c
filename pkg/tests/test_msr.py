"""Zero-mean projection, initialization, gradient transform, and anchoring."""

import math

import numpy as np
import pytest

from msrkit.errors import ConfigError, DegenerateFilterError
from msrkit.layers import ConvFilterParams
from msrkit.msr import (
    DEFLATED_NORM,
    MsrConfig,
    czm_project,
    czmg_transform,
    czmi_init,
    effective_lr,
    export_inference_weights,
    luma_all_filters,
    luma_loss_and_grad,
    shift_diagnostics,
    slice_means,
    unit_uniform_init,
)
from msrkit.tensor import Prng


class StubRng:
    """Hands out a preset tensor so init outputs can be derived by hand."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def uniform(self, lo=0.0, hi=1.0, shape=None):
        assert tuple(shape) == self.values.shape
        return self.values.copy()


class TestCzmProject:
    def test_hand_value(self):
        out = czm_project(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out, [[-1.5, -0.5], [0.5, 1.5]])

    def test_idempotent(self):
        x = Prng(0).uniform(-1.0, 1.0, shape=(3, 2, 3, 3))
        once = czm_project(x)
        np.testing.assert_allclose(czm_project(once), once, atol=1e-15)

    def test_linear(self):
        rng = Prng(1)
        a = rng.uniform(-1.0, 1.0, shape=(2, 2, 3, 3))
        b = rng.uniform(-1.0, 1.0, shape=(2, 2, 3, 3))
        np.testing.assert_allclose(
            czm_project(2.0 * a + 3.0 * b),
            2.0 * czm_project(a) + 3.0 * czm_project(b), atol=1e-14)

    def test_output_slice_means_vanish(self):
        x = Prng(2).uniform(-1.0, 1.0, shape=(4, 3, 5, 5))
        np.testing.assert_allclose(slice_means(czm_project(x)), 0.0, atol=1e-16)

    def test_rank_check(self):
        with pytest.raises(ValueError, match="rank"):
            czm_project(np.zeros(5))


class TestCzmiInit:
    def test_hand_value_from_stub_draws(self):
        # draws [[1,2],[3,4]]: spatial mean 2.5, centered [-1.5,-.5,.5,1.5],
        # magnitude sqrt(5)
        v = czmi_init((1, 1, 2, 2), StubRng([[[[1.0, 2.0], [3.0, 4.0]]]]))
        s5 = math.sqrt(5.0)
        np.testing.assert_allclose(
            v[0, 0], [[-1.5 / s5, -0.5 / s5], [0.5 / s5, 1.5 / s5]], atol=1e-15)

    def test_contract_over_many_shapes(self):
        rng = Prng(3)
        shape_rng = Prng(4)
        for _ in range(60):
            f = int(shape_rng.integers(6)) + 1
            c = int(shape_rng.integers(6)) + 1
            k = int(shape_rng.integers(3)) * 2 + 3   # 3, 5, 7
            v = czmi_init((f, c, k, k), rng)
            assert np.abs(slice_means(v)).max() <= 1e-9
            norms = np.sqrt(np.sum(v * v, axis=(1, 2, 3)))
            np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_pointwise_shape_rejected(self):
        with pytest.raises(ValueError, match="no mean to remove"):
            czmi_init((4, 4, 1, 1), Prng(0))

    def test_rank_check(self):
        with pytest.raises(ValueError, match="F, C, Kh, Kw"):
            czmi_init((3, 3, 3), Prng(0))

    def test_deterministic_given_seed(self):
        np.testing.assert_array_equal(czmi_init((2, 3, 3, 3), Prng(7)),
                                      czmi_init((2, 3, 3, 3), Prng(7)))


class TestUnitUniformInit:
    def test_unit_norms_without_mean_removal(self):
        v = unit_uniform_init((5, 4, 1, 1), Prng(5))
        norms = np.sqrt(np.sum(v * v, axis=(1, 2, 3)))
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_spatial_kernels_keep_their_mean(self):
        v = unit_uniform_init((4, 3, 3, 3), Prng(6))
        assert np.abs(slice_means(v)).max() > 1e-3

    def test_hand_value(self):
        v = unit_uniform_init((1, 1, 1, 2), StubRng([[[[3.0, 4.0]]]]))
        np.testing.assert_allclose(v.reshape(-1), [0.6, 0.8], atol=1e-15)


class TestCzmgTransform:
    Z_GRID = [0.0, 0.5, 0.85, 0.98, 1.0]

    @pytest.mark.parametrize("z", Z_GRID)
    def test_slice_mean_scales_by_one_minus_z(self, z):
        rng = Prng(int(z * 100))
        for _ in range(20):
            g = rng.uniform(-2.0, 2.0, shape=(3, 2, 3, 3))
            before = slice_means(g)
            after = slice_means(czmg_transform(g, z))
            assert np.abs(after - (1.0 - z) * before).max() <= 1e-12

    def test_z_zero_is_identity(self):
        g = Prng(8).uniform(-1.0, 1.0, shape=(2, 2, 3, 3))
        np.testing.assert_array_equal(czmg_transform(g, 0.0), g)

    def test_z_one_removes_mean_completely(self):
        g = Prng(9).uniform(-1.0, 1.0, shape=(4, 3, 5, 5))
        assert np.abs(slice_means(czmg_transform(g, 1.0))).max() <= 1e-12

    def test_does_not_mutate_input(self):
        g = Prng(10).uniform(-1.0, 1.0, shape=(2, 2, 3, 3))
        keep = g.copy()
        czmg_transform(g, 0.85)
        np.testing.assert_array_equal(g, keep)

    def test_off_diagonal_components_untouched(self):
        # the transform only moves the mean: centered part is preserved
        g = Prng(11).uniform(-1.0, 1.0, shape=(3, 2, 3, 3))
        out = czmg_transform(g, 0.7)
        np.testing.assert_allclose(czm_project(out), czm_project(g), atol=1e-14)

    @pytest.mark.parametrize("z", [-0.1, 1.1])
    def test_z_range_check(self, z):
        with pytest.raises(ValueError, match="z must be"):
            czmg_transform(np.zeros((1, 1, 3, 3)), z)


class TestUnityAnchor:
    def test_hand_value_norm_two(self):
        v = np.zeros((2, 2))
        v[0, 0] = 2.0
        lam = 5e-4
        loss, grad = luma_loss_and_grad(v, lam)
        assert loss == pytest.approx(lam, rel=1e-15)       # (2-1)^2 * lam
        np.testing.assert_allclose(grad, lam * v, atol=1e-18)

    def test_unit_norm_is_a_fixed_point(self):
        v = np.array([0.6, 0.8])
        loss, grad = luma_loss_and_grad(v, 5e-4)
        assert loss == 0.0
        np.testing.assert_allclose(grad, 0.0, atol=1e-18)

    def test_gradient_is_purely_radial(self):
        v = Prng(12).uniform(-1.0, 1.0, shape=(2, 3, 3))
        _, grad = luma_loss_and_grad(v, 5e-4)
        # grad = c * v for scalar c: cross terms vanish
        c = np.sum(grad * v) / np.sum(v * v)
        np.testing.assert_allclose(grad, c * v, atol=1e-15)

    def test_anchor_preserves_zero_mean(self):
        v = czm_project(Prng(13).uniform(-1.0, 1.0, shape=(2, 3, 3)))
        _, grad = luma_loss_and_grad(v, 5e-4)
        assert np.abs(slice_means(grad)).max() <= 1e-15

    def test_degenerate_filter_raises(self):
        with pytest.raises(DegenerateFilterError, match="magnitude"):
            luma_loss_and_grad(np.zeros((1, 3, 3)), 5e-4)

    def test_stack_matches_per_filter_sum(self):
        rng = Prng(14)
        v = rng.uniform(-1.0, 1.0, shape=(4, 2, 3, 3))
        lam = 5e-4
        total, grad = luma_all_filters(v, lam)
        losses = []
        for f in range(4):
            lf, gf = luma_loss_and_grad(v[f], lam)
            losses.append(lf)
            np.testing.assert_allclose(grad[f], gf, atol=1e-16)
        assert total == pytest.approx(sum(losses), rel=1e-12)

    def test_stack_reports_degenerate_indices(self):
        v = Prng(15).uniform(-1.0, 1.0, shape=(3, 1, 3, 3))
        v[1] = 0.0
        with pytest.raises(DegenerateFilterError, match=r"\[1\]"):
            luma_all_filters(v, 5e-4)


class TestEffectiveLr:
    def test_reference_value_exact(self):
        assert effective_lr(0.1, 0.5) == 0.4

    def test_unit_magnitude_identity(self):
        assert effective_lr(0.25, 1.0) == 0.25

    def test_quadratic_in_magnitude(self):
        assert effective_lr(0.1, 0.25) == pytest.approx(1.6, rel=1e-15)

    def test_nonpositive_magnitude_rejected(self):
        with pytest.raises(ValueError, match="magnitude"):
            effective_lr(0.1, 0.0)


class TestConfigAndExport:
    def test_defaults_validate(self):
        cfg = MsrConfig().validate()
        assert cfg.zmg == 0.85 and cfg.luma_weight == 5e-4
        assert cfg.init_scale == 0.8 and cfg.noise_amplitude == 0.1
        assert cfg.first_layer_czm is False

    @pytest.mark.parametrize("kw", [
        {"zmg": -0.1}, {"zmg": 1.5}, {"luma_weight": -1e-6},
        {"init_scale": 0.0}, {"noise_amplitude": 1.0}, {"noise_amplitude": -0.2},
    ])
    def test_bad_values_rejected(self, kw):
        with pytest.raises(ConfigError):
            MsrConfig(**kw).validate()

    def test_export_folds_scale(self):
        rng = Prng(16)
        p = ConvFilterParams(v=rng.uniform(-1.0, 1.0, shape=(2, 2, 3, 3)),
                             g=np.array([math.log(0.8), 0.5]))
        w = export_inference_weights(p)
        np.testing.assert_allclose(w[0], 0.8 * p.v[0], atol=1e-15)
        np.testing.assert_allclose(w[1], math.exp(0.5) * p.v[1], atol=1e-15)


class TestDiagnostics:
    def _model(self):
        from msrkit.models import build_model
        return build_model("tinycnn", "msr", MsrConfig(), Prng(17))

    def test_fresh_model_snapshot(self):
        diag = shift_diagnostics(self._model(), lr=0.1)
        assert diag.max_abs_slice_mean <= 1e-12     # eligible layers start centered
        np.testing.assert_allclose(diag.all_v_norms(), 1.0, atol=1e-12)
        np.testing.assert_allclose(diag.all_w_norms(), 0.8, atol=1e-12)
        assert diag.deflated_count == 0
        assert diag.mean_effective_lr == pytest.approx(0.1 / 0.64, rel=1e-12)

    def test_layer_records_cover_every_conv(self):
        diag = shift_diagnostics(self._model(), lr=0.1)
        assert len(diag.layers) == 3            # tinycnn carries three convs
        assert not diag.layers[0].czm_eligible  # input layer is exempt
        assert diag.layers[1].czm_eligible and diag.layers[2].czm_eligible

    def test_deflated_filters_counted(self):
        model = self._model()
        name, p = model.named_conv_params()[1]
        p.v[0] *= DEFLATED_NORM / 2.0
        diag = shift_diagnostics(model, lr=0.1)
        assert diag.deflated_count >= 1
