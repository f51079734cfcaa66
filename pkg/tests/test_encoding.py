import numpy as np
import pytest

from ldekit.encoding import (
    AGG_MEAN,
    AGG_NORMALIZED,
    SMOOTHING_PER_COMPONENT,
    SMOOTHING_SHARED,
    Dictionary,
    EmptySequenceError,
    LdeConfig,
    hard_assign,
    inv_softplus,
    lde_backward,
    lde_forward,
    length_normalize,
    softplus,
    tap_forward,
)
from ldekit.ndcore import DimensionError

from fdcheck import assert_grad_close, central_diff


def make_dictionary(rng, cfg, scale=1.0):
    centers = rng.normal(size=(cfg.num_components, cfg.feature_dim)) * scale
    raw = rng.normal(size=(cfg.num_components, 1)) * 0.5
    return Dictionary(centers, raw)


ALL_MODE_COMBOS = [
    (smoothing, aggregation, lennorm)
    for smoothing in (SMOOTHING_SHARED, SMOOTHING_PER_COMPONENT)
    for aggregation in (AGG_MEAN, AGG_NORMALIZED)
    for lennorm in (False, True)
]


class TestSoftplus:
    def test_roundtrip(self):
        vals = np.array([1e-4, 0.3, 1.0, 7.0])
        assert np.max(np.abs(softplus(inv_softplus(vals)) - vals)) <= 1e-12

    def test_large_input_no_overflow(self):
        assert np.isfinite(softplus(np.array([800.0]))).all()


class TestLdeForward:
    def test_tap_reduction_single_zero_center(self):
        # C=1 with the center pinned at zero and mean aggregation is the
        # plain temporal mean
        cfg = LdeConfig(1, 2, aggregation_mode=AGG_MEAN, length_normalize=False)
        d = Dictionary.zeros(cfg)
        x = np.array([[1.0, 3.0], [2.0, 4.0]])
        enc, _ = lde_forward(x, d, cfg)
        assert np.max(np.abs(enc.flat - np.array([2.0, 3.0]))) <= 1e-15

    def test_zero_residual_dominant_center(self):
        cfg = LdeConfig(2, 3, smoothing_mode=SMOOTHING_SHARED, beta=1.0,
                        aggregation_mode=AGG_MEAN, length_normalize=False)
        centers = np.array([[1.0, -2.0, 0.5], [50.0, 50.0, 50.0]])
        d = Dictionary(centers, np.zeros((2, 1)))
        x = np.tile(centers[0][:, None], (1, 6))  # every frame equals mu_0
        enc, saved = lde_forward(x, d, cfg)
        assert saved.weights[:, 0].min() > 1 - 1e-12
        assert np.max(np.abs(enc.e[0])) == 0.0

    def test_scalar_hand_evaluation(self):
        # C=2, D=1, mu=[0,1], shared beta=1, mean mode, x=[0.25, 0.75];
        # expected values computed by direct scalar evaluation of the
        # softmax weights and mean aggregation at 60-digit precision
        cfg = LdeConfig(2, 1, smoothing_mode=SMOOTHING_SHARED, beta=1.0,
                        aggregation_mode=AGG_MEAN, length_normalize=False)
        d = Dictionary(np.array([[0.0], [1.0]]), np.zeros((2, 1)))
        x = np.array([[0.25, 0.75]])
        enc, saved = lde_forward(x, d, cfg)
        w_expected = np.array([
            [0.62245933120185456464, 0.37754066879814543536],
            [0.37754066879814543536, 0.62245933120185456464],
        ])
        e_expected = np.array([0.21938516719953635884, -0.21938516719953635884])
        assert np.max(np.abs(saved.weights - w_expected)) <= 1e-15
        assert np.max(np.abs(enc.flat - e_expected)) <= 1e-15

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        cfg = LdeConfig(5, 3, aggregation_mode=AGG_MEAN)
        d = make_dictionary(rng, cfg)
        x = rng.normal(size=(3, 40)) * 10
        _, saved = lde_forward(x, d, cfg)
        assert np.max(np.abs(saved.weights.sum(axis=1) - 1.0)) <= 1e-12
        assert np.all(saved.weights >= 0)

    def test_output_dim_independent_of_length(self):
        rng = np.random.default_rng(1)
        cfg = LdeConfig(4, 3)
        d = make_dictionary(rng, cfg)
        dims = set()
        for length in (1, 2, 17, 400):
            enc, _ = lde_forward(rng.normal(size=(3, length)), d, cfg)
            dims.add(enc.flat.shape[0])
        assert dims == {12}

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        for smoothing, aggregation, lennorm in ALL_MODE_COMBOS:
            cfg = LdeConfig(3, 4, smoothing_mode=smoothing, beta=0.7,
                            aggregation_mode=aggregation,
                            length_normalize=lennorm)
            d = make_dictionary(rng, cfg)
            x = rng.normal(size=(4, 25))
            perm = rng.permutation(25)
            a, _ = lde_forward(x, d, cfg)
            b, _ = lde_forward(x[:, perm], d, cfg)
            assert np.max(np.abs(a.flat - b.flat)) <= 1e-12

    def test_translation_covariance_mean_mode(self):
        rng = np.random.default_rng(3)
        cfg = LdeConfig(3, 5, aggregation_mode=AGG_MEAN, length_normalize=False)
        d = make_dictionary(rng, cfg)
        x = rng.normal(size=(5, 30))
        shift = rng.normal(size=(5,))
        a, sa = lde_forward(x, d, cfg)
        d_shifted = Dictionary(d.centers.value + shift[None, :],
                               d.smoothing.value.copy())
        b, sb = lde_forward(x + shift[:, None], d_shifted, cfg)
        assert np.max(np.abs(sa.weights - sb.weights)) <= 1e-10
        assert np.max(np.abs(a.flat - b.flat)) <= 1e-10

    def test_normalized_mode_flags_empty_soft_cluster(self):
        # second center is so far away that its total soft mass underflows
        cfg = LdeConfig(2, 1, smoothing_mode=SMOOTHING_SHARED, beta=2.0,
                        aggregation_mode=AGG_NORMALIZED, length_normalize=False)
        d = Dictionary(np.array([[0.0], [100.0]]), np.zeros((2, 1)))
        x = np.zeros((1, 3))
        enc, _ = lde_forward(x, d, cfg)
        assert enc.floored_components == [1]
        assert np.isfinite(enc.flat).all()

    def test_empty_sequence_rejected(self):
        cfg = LdeConfig(2, 3)
        d = Dictionary.zeros(cfg)
        with pytest.raises(EmptySequenceError):
            lde_forward(np.zeros((3, 0)), d, cfg)

    def test_dictionary_config_mismatch_rejected(self):
        cfg = LdeConfig(2, 3)
        d = Dictionary.zeros(LdeConfig(4, 3))
        with pytest.raises(DimensionError):
            lde_forward(np.zeros((3, 5)), d, cfg)

    def test_length_normalized_output_has_unit_norm(self):
        rng = np.random.default_rng(4)
        cfg = LdeConfig(3, 2, length_normalize=True)
        d = make_dictionary(rng, cfg)
        enc, _ = lde_forward(rng.normal(size=(2, 12)), d, cfg)
        assert abs(np.linalg.norm(enc.flat) - 1.0) <= 1e-12


class TestLdeBackward:
    def test_zero_upstream_grad_gives_zero_grads(self):
        rng = np.random.default_rng(5)
        cfg = LdeConfig(3, 2)
        d = make_dictionary(rng, cfg)
        x = rng.normal(size=(2, 7))
        _, saved = lde_forward(x, d, cfg)
        gx = lde_backward(saved, np.zeros((3, 2)), d, cfg)
        assert np.all(gx == 0)
        assert np.all(d.centers.grad == 0)
        assert np.all(d.smoothing.grad == 0)

    def test_tap_gradient_replicates_upstream_over_frames(self):
        cfg = LdeConfig(1, 2, aggregation_mode=AGG_MEAN, length_normalize=False)
        d = Dictionary.zeros(cfg)
        x = np.random.default_rng(6).normal(size=(2, 5))
        _, saved = lde_forward(x, d, cfg)
        g = np.array([[0.3, -1.2]])
        gx = lde_backward(saved, g, d, cfg)
        assert np.max(np.abs(gx - g.reshape(2, 1) / 5.0)) <= 1e-15

    def test_grad_shape_mismatch_rejected(self):
        cfg = LdeConfig(2, 2)
        d = Dictionary.zeros(cfg)
        _, saved = lde_forward(np.ones((2, 3)), d, cfg)
        with pytest.raises(Exception):
            lde_backward(saved, np.zeros((3, 3)), d, cfg)

    @pytest.mark.parametrize("smoothing,aggregation,lennorm", ALL_MODE_COMBOS)
    def test_matches_central_differences(self, smoothing, aggregation, lennorm):
        # C=3, D=2, L=5 random instance; every partial (input, centers,
        # raw smoothing) against central differences of the full forward
        rng = np.random.default_rng(42)
        cfg = LdeConfig(3, 2, smoothing_mode=smoothing, beta=0.8,
                        aggregation_mode=aggregation, length_normalize=lennorm)
        d = make_dictionary(rng, cfg)
        x = rng.normal(size=(2, 5))
        probe = rng.normal(size=6)

        def phi():
            enc, _ = lde_forward(x, d, cfg)
            return float(np.dot(probe, enc.flat))

        _, saved = lde_forward(x, d, cfg)
        d.centers.zero_grad()
        d.smoothing.zero_grad()
        gx = lde_backward(saved, probe.reshape(3, 2), d, cfg)

        assert_grad_close(gx, central_diff(phi, x), 1e-5, "input")
        assert_grad_close(d.centers.grad, central_diff(phi, d.centers.value),
                          1e-5, "centers")
        if smoothing == SMOOTHING_PER_COMPONENT:
            assert_grad_close(d.smoothing.grad,
                              central_diff(phi, d.smoothing.value),
                              1e-5, "smoothing")

    def test_grads_accumulate_across_calls(self):
        rng = np.random.default_rng(8)
        cfg = LdeConfig(2, 2)
        d = make_dictionary(rng, cfg)
        x = rng.normal(size=(2, 4))
        g = rng.normal(size=(2, 2))
        _, saved = lde_forward(x, d, cfg)
        lde_backward(saved, g, d, cfg)
        once = d.centers.grad.copy()
        _, saved = lde_forward(x, d, cfg)
        lde_backward(saved, g, d, cfg)
        assert np.max(np.abs(d.centers.grad - 2 * once)) <= 1e-12


class TestTapForward:
    def test_constant_sequence(self):
        v = np.array([1.5, -2.0, 0.25])
        x = np.tile(v[:, None], (1, 9))
        assert np.array_equal(tap_forward(x), v)

    def test_hand_case(self):
        assert np.array_equal(tap_forward(np.array([[1.0, 3.0], [2.0, 4.0]])),
                              np.array([2.0, 3.0]))

    def test_equals_degenerate_lde_on_random_inputs(self):
        rng = np.random.default_rng(9)
        cfg = LdeConfig(1, 3, aggregation_mode=AGG_MEAN, length_normalize=False)
        d = Dictionary.zeros(cfg)
        for _ in range(100):
            x = rng.normal(size=(3, int(rng.integers(1, 40))))
            enc, _ = lde_forward(x, d, cfg)
            assert np.max(np.abs(enc.flat - tap_forward(x))) <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(EmptySequenceError):
            tap_forward(np.zeros((3, 0)))


class TestLengthNormalize:
    def test_hand_case(self):
        out, flag = length_normalize(np.array([3.0, 4.0]))
        assert not flag
        assert np.max(np.abs(out - np.array([0.6, 0.8]))) <= 1e-15

    def test_zero_vector_flagged(self):
        out, flag = length_normalize(np.zeros(4))
        assert flag
        assert np.array_equal(out, np.zeros(4))

    def test_random_outputs_unit_norm(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            v = rng.normal(size=int(rng.integers(1, 30))) * 10.0 ** rng.integers(-3, 4)
            out, flag = length_normalize(v)
            assert not flag
            assert abs(np.linalg.norm(out) - 1.0) <= 1e-12


class TestHardAssign:
    def test_frame_at_center(self):
        d = Dictionary(np.array([[0.0, 0.0], [5.0, 5.0], [-3.0, 1.0]]),
                       np.zeros((3, 1)))
        x = np.array([[5.0], [5.0]])
        assert hard_assign(x, d).tolist() == [1]

    def test_tie_goes_to_lowest_index(self):
        d = Dictionary(np.array([[0.0], [10.0], [1.0]]), np.zeros((3, 1)))
        x = np.array([[0.5]])  # exactly between centers 0 and 2
        assert hard_assign(x, d).tolist() == [0]

    def test_large_beta_soft_weights_match_hard_assignment(self):
        rng = np.random.default_rng(11)
        cfg = LdeConfig(4, 3, smoothing_mode=SMOOTHING_SHARED, beta=1e6,
                        aggregation_mode=AGG_MEAN, length_normalize=False)
        d = make_dictionary(rng, cfg)
        x = rng.normal(size=(3, 50))
        _, saved = lde_forward(x, d, cfg)
        assert np.array_equal(np.argmax(saved.weights, axis=1),
                              hard_assign(x, d))

    def test_kmeans_limit_monotone_in_beta(self):
        rng = np.random.default_rng(12)
        d = Dictionary(rng.normal(size=(3, 2)), np.zeros((3, 1)))
        x = rng.normal(size=(2, 40))
        hard = hard_assign(x, d)
        onehot = np.zeros((40, 3))
        onehot[np.arange(40), hard] = 1.0
        deviations = []
        for beta in (1e2, 1e4, 1e6):
            cfg = LdeConfig(3, 2, smoothing_mode=SMOOTHING_SHARED, beta=beta,
                            aggregation_mode=AGG_MEAN, length_normalize=False)
            _, saved = lde_forward(x, d, cfg)
            deviations.append(np.max(np.abs(saved.weights - onehot)))
        assert deviations[0] > deviations[1] >= deviations[2]
