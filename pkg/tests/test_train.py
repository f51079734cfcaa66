import numpy as np
import pytest

from fdcheck import assert_grad_close, central_diff
from ldekit.data import CropPolicy, Utterance
from ldekit.encoding import AGG_MEAN, LdeConfig
from ldekit.frontend import ConvSpec, StageSpec
from ldekit.gmm import GmmModel
from ldekit.ndcore import Param, Rng
from ldekit.train import (
    CheckpointError,
    LinearClassifier,
    Model,
    ModelConfig,
    NumericalError,
    Sgd,
    SgdConfig,
    batch_loss,
    cross_entropy,
    infer,
    learning_rate,
    load_checkpoint,
    load_gmm_bank,
    load_model,
    model_config_from_dict,
    model_config_to_dict,
    save_checkpoint,
    save_gmm_bank,
    save_model,
    train_model,
)


def toy_utts(count, dim, rng, lmin=10, lmax=30, num_classes=2):
    """Random-feature utterances with a small class-dependent mean shift."""
    utts = []
    for i in range(count):
        label = i % num_classes
        length = rng.integers(lmin, lmax)
        feats = rng.normal((dim, length)) + 0.5 * label
        utts.append(Utterance(f"u{i:03d}", label, feats))
    return utts


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros(4), 2)
        assert abs(loss - np.log(4.0)) <= 1e-15

    def test_confident_correct_is_tiny(self):
        logits = np.zeros(4)
        logits[1] = 50.0
        loss, _ = cross_entropy(logits, 1)
        assert 0.0 <= loss < 1e-20

    def test_loss_nonnegative(self):
        rng = Rng(3)
        for _ in range(50):
            logits = rng.normal((5,)) * 10
            loss, _ = cross_entropy(logits, 0)
            assert loss >= 0.0

    def test_gradient_sums_to_zero(self):
        _, grad = cross_entropy(np.array([1.0, -2.0, 0.3]), 1)
        assert abs(grad.sum()) <= 1e-15

    def test_gradient_matches_finite_differences(self):
        rng = Rng(5)
        logits = rng.normal((6,))
        _, grad = cross_entropy(logits, 4)
        numeric = central_diff(lambda: cross_entropy(logits, 4)[0], logits)
        assert_grad_close(grad, numeric, 1e-6, "cross entropy")

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(np.zeros(3), 3)


class TestLinearClassifier:
    def test_forward_hand(self):
        cls = LinearClassifier(2, 3, rng=None)
        cls.weights.value[...] = [[1.0, 0.0, 2.0], [0.0, -1.0, 0.0]]
        cls.bias.value[...] = [[0.5], [1.0]]
        out = cls.forward_batch(np.array([[1.0, 2.0, 3.0]]))
        assert np.allclose(out, [[7.5, -1.0]], atol=1e-15)

    def test_backward_matches_finite_differences(self):
        rng = Rng(2)
        cls = LinearClassifier(3, 4, rng)
        embeds = rng.normal((2, 4))
        labels = [0, 2]

        def loss():
            logits = cls.forward_batch(embeds)
            return sum(cross_entropy(logits[b], labels[b])[0]
                       for b in range(2))

        logits = cls.forward_batch(embeds)
        dlogits = np.stack([cross_entropy(logits[b], labels[b])[1]
                            for b in range(2)])
        dembeds = cls.backward_batch(embeds, dlogits)
        for param in cls.params():
            numeric = central_diff(loss, param.value)
            assert_grad_close(param.grad, numeric, 1e-6, param.name)
        numeric = central_diff(loss, embeds)
        assert_grad_close(dembeds, numeric, 1e-6, "embeddings")


class TestSchedule:
    def test_default_drop_points(self):
        cfg = SgdConfig()
        assert learning_rate(cfg, 0) == 0.1
        assert learning_rate(cfg, 59) == 0.1
        assert learning_rate(cfg, 60) == 0.1 / 10
        assert learning_rate(cfg, 79) == 0.1 / 10
        assert learning_rate(cfg, 80) == 0.1 / 100
        assert learning_rate(cfg, 89) == 0.1 / 100

    def test_scaled_preserves_fractions(self):
        cfg = SgdConfig().scaled(30)
        assert (cfg.epochs, cfg.drop1, cfg.drop2) == (30, 20, 26)
        assert learning_rate(cfg, 19) == 0.1
        assert learning_rate(cfg, 20) == 0.1 / 10
        assert learning_rate(cfg, 26) == 0.1 / 100

    def test_scaled_identity_at_full_budget(self):
        cfg = SgdConfig().scaled(90)
        assert (cfg.drop1, cfg.drop2) == (60, 80)


class TestSgd:
    def test_zero_lr_keeps_params(self):
        p = Param("p", np.array([[1.0, -2.0]]))
        p.grad[...] = 5.0
        opt = Sgd([p], SgdConfig(weight_decay=0.0))
        opt.step(0.0)
        assert np.array_equal(p.value, [[1.0, -2.0]])
        assert np.array_equal(p.grad, [[0.0, 0.0]])

    def test_hand_update_two_steps(self):
        p = Param("p", np.array([[1.0]]))
        cfg = SgdConfig(lr0=0.2, momentum=0.5, weight_decay=0.1)
        opt = Sgd([p], cfg)

        p.grad[...] = 0.5
        opt.step(0.2)
        v1 = 0.5 + 0.1 * 1.0
        p1 = 1.0 - 0.2 * v1
        assert p.value[0, 0] == p1

        p.grad[...] = -0.2
        opt.step(0.2)
        v2 = 0.5 * v1 + (-0.2 + 0.1 * p1)
        assert p.value[0, 0] == p1 - 0.2 * v2

    def test_momentum_carries_without_gradient(self):
        p = Param("p", np.array([[0.0]]))
        opt = Sgd([p], SgdConfig(lr0=1.0, momentum=0.9, weight_decay=0.0))
        p.grad[...] = 1.0
        opt.step(1.0)
        opt.step(1.0)  # zero grad, velocity decays by 0.9
        assert abs(p.value[0, 0] - (-1.9)) <= 1e-15

    def test_duplicate_names_rejected(self):
        a = Param("same", np.zeros((1, 1)))
        b = Param("same", np.zeros((1, 1)))
        with pytest.raises(ValueError):
            Sgd([a, b], SgdConfig())


def lde_model_config(in_dim=5, num_classes=3, components=3, frontend=None,
                     **lde_kw):
    embed = frontend.out_dim if frontend is not None else in_dim
    lde = LdeConfig(num_components=components, feature_dim=embed, **lde_kw)
    return ModelConfig(in_dim=in_dim, num_classes=num_classes, encoder="lde",
                       lde=lde, frontend=frontend)


class TestModel:
    def test_param_names_unique(self):
        fe = ConvSpec(in_dim=5, stages=[StageSpec(6, 1, True),
                                        StageSpec(8, 1, True)])
        model = Model(lde_model_config(frontend=fe), Rng(0))
        names = [p.name for p in model.params()]
        assert len(names) == len(set(names))

    def test_tap_and_lde_share_other_inits(self):
        fe = ConvSpec(in_dim=4, stages=[StageSpec(5, 1, True)])
        tap = Model(ModelConfig(in_dim=4, num_classes=2, encoder="tap",
                                frontend=fe), Rng(11))
        lde = Model(lde_model_config(in_dim=4, num_classes=2, components=1,
                                     frontend=fe), Rng(11))
        for a, b in zip(tap.frontend.params(), lde.frontend.params()):
            assert np.array_equal(a.value, b.value)
        # same classifier fan-in (C=1) means identical draws
        assert np.array_equal(tap.classifier.weights.value,
                              lde.classifier.weights.value)

    def test_dim_mismatch_rejected(self):
        fe = ConvSpec(in_dim=4, stages=[StageSpec(5, 1, True)])
        with pytest.raises(Exception):
            ModelConfig(in_dim=4, num_classes=2, encoder="lde",
                        lde=LdeConfig(num_components=2, feature_dim=4),
                        frontend=fe)  # frontend emits 5 dims, not 4

    def test_config_dict_roundtrip(self):
        fe = ConvSpec(in_dim=7, stages=[StageSpec(8, 2, True),
                                        StageSpec(12, 1, False)],
                      kernel=5, activation="tanh")
        cfg = lde_model_config(in_dim=7, num_classes=4, components=2,
                               frontend=fe, aggregation_mode=AGG_MEAN,
                               length_normalize=False)
        back = model_config_from_dict(model_config_to_dict(cfg))
        assert back == cfg

    def test_config_from_bad_dict(self):
        with pytest.raises(CheckpointError):
            model_config_from_dict({"encoder": "lde"})


class TestPooledScoring:
    def test_permutation_invariance(self):
        rng = Rng(21)
        model = Model(lde_model_config(), rng)
        x = rng.normal((5, 30))
        base = infer(model, x)
        perm = rng.permutation(30)
        assert np.max(np.abs(infer(model, x[:, perm]) - base)) <= 1e-12

    def test_tiling_invariance(self):
        rng = Rng(22)
        for encoder in ("tap", "lde"):
            if encoder == "tap":
                model = Model(ModelConfig(in_dim=5, num_classes=3), Rng(1))
            else:
                model = Model(lde_model_config(), Rng(1))
            x = rng.normal((5, 17))
            base = infer(model, x)
            tiled = infer(model, np.tile(x, (1, 3)))
            assert np.max(np.abs(tiled - base)) <= 1e-10, encoder

    def test_infer_uses_whole_sequence(self):
        model = Model(ModelConfig(in_dim=3, num_classes=2), Rng(0))
        x = np.zeros((3, 40))
        x[:, 35:] = 4.0  # tail changes the pooled mean, so scores move
        assert not np.allclose(infer(model, x), infer(model, x[:, :35]))


class TestAveragePoolingEquivalence:
    def test_tap_equals_frozen_centerless_lde(self):
        # one-component dictionary pinned at the origin with mean
        # aggregation reduces to average pooling, so training trajectories
        # must coincide step for step
        fe = ConvSpec(in_dim=5, stages=[StageSpec(6, 1, True)])
        tap_cfg = ModelConfig(in_dim=5, num_classes=2, encoder="tap",
                              frontend=fe)
        lde_cfg = ModelConfig(
            in_dim=5, num_classes=2, encoder="lde", frontend=fe,
            lde=LdeConfig(num_components=1, feature_dim=6,
                          aggregation_mode=AGG_MEAN, length_normalize=False),
            freeze_dictionary=True, zero_dictionary=True)
        utts = toy_utts(24, 5, Rng(33))
        sgd = SgdConfig(epochs=2)
        policy = CropPolicy(8, 16)

        losses = {}
        for key, cfg in (("tap", tap_cfg), ("lde", lde_cfg)):
            model = Model(cfg, Rng(7))
            hist = train_model(model, utts, sgd, Rng(99), batch_size=8,
                               policy=policy)
            losses[key] = [h.loss for h in hist]
        assert len(losses["tap"]) == len(losses["lde"]) > 0
        for a, b in zip(losses["tap"], losses["lde"]):
            assert abs(a - b) <= 1e-10

    def test_frozen_dictionary_does_not_move(self):
        cfg = lde_model_config(in_dim=4, num_classes=2, components=2)
        cfg = ModelConfig(in_dim=4, num_classes=2, encoder="lde",
                          lde=cfg.lde, freeze_dictionary=True)
        model = Model(cfg, Rng(3))
        before = [p.value.copy() for p in model.dictionary.params()]
        train_model(model, toy_utts(12, 4, Rng(1)), SgdConfig(epochs=1),
                    Rng(2), batch_size=4, policy=CropPolicy(6, 10))
        for p, b in zip(model.dictionary.params(), before):
            assert np.array_equal(p.value, b)


class TestTrainModel:
    def small_setup(self):
        fe = ConvSpec(in_dim=4, stages=[StageSpec(5, 1, True)])
        cfg = lde_model_config(in_dim=4, num_classes=2, components=2,
                               frontend=fe)
        utts = toy_utts(16, 4, Rng(8))
        return cfg, utts

    def test_deterministic_end_state(self):
        cfg, utts = self.small_setup()
        finals = []
        for _ in range(2):
            model = Model(cfg, Rng(5))
            train_model(model, utts, SgdConfig(epochs=2), Rng(6),
                        batch_size=4, policy=CropPolicy(8, 12))
            finals.append([p.value.copy() for p in model.params()])
        for a, b in zip(*finals):
            assert np.array_equal(a, b)

    def test_loss_log_format_and_smoothing(self, tmp_path):
        cfg, utts = self.small_setup()
        model = Model(cfg, Rng(5))
        log = tmp_path / "loss.log"
        hist = train_model(model, utts, SgdConfig(epochs=1), Rng(6),
                           batch_size=4, policy=CropPolicy(8, 12),
                           smooth_window=3, log_path=log)
        lines = log.read_text().strip().split("\n")
        assert len(lines) == len(hist) == 4
        losses = []
        for i, line in enumerate(lines):
            step, loss, smoothed = line.split("\t")
            assert int(step) == i
            losses.append(float(loss))
            want = np.mean(losses[-3:])
            assert abs(float(smoothed) - want) <= 1e-12

    def test_training_reduces_loss(self):
        cfg, utts = self.small_setup()
        model = Model(cfg, Rng(5))
        hist = train_model(model, utts, SgdConfig(lr0=0.05, epochs=10),
                           Rng(6), batch_size=8, policy=CropPolicy(8, 12))
        first = np.mean([h.loss for h in hist[:4]])
        last = np.mean([h.loss for h in hist[-4:]])
        assert last < first

    def test_nan_input_aborts(self):
        cfg, utts = self.small_setup()
        utts[3].features[:] = np.nan
        model = Model(cfg, Rng(5))
        with pytest.raises(NumericalError, match="step"):
            train_model(model, utts, SgdConfig(epochs=1), Rng(6),
                        batch_size=16, policy=CropPolicy(12, 12))

    def test_empty_corpus_rejected(self):
        cfg, _ = self.small_setup()
        with pytest.raises(ValueError):
            train_model(Model(cfg, Rng(0)), [], SgdConfig(epochs=1), Rng(1))


class TestEndToEndGradient:
    def test_all_parameter_gradients(self):
        fe = ConvSpec(in_dim=3, stages=[StageSpec(4, 1, True)],
                      activation="tanh")
        cfg = lde_model_config(in_dim=3, num_classes=2, components=2,
                               frontend=fe)
        model = Model(cfg, Rng(14))
        rng = Rng(15)
        feats = rng.normal((2, 3, 8))
        labels = np.array([0, 1])

        model.zero_grads()
        batch_loss(model, feats, labels)
        analytic = {p.name: p.grad.copy() for p in model.params()}
        model.zero_grads()

        def loss():
            return batch_loss(model, feats, labels, accumulate=False)

        for p in model.params():
            numeric = central_diff(loss, p.value)
            assert_grad_close(analytic[p.name], numeric, 1e-4, p.name)


class TestCheckpoints:
    def build_model(self):
        fe = ConvSpec(in_dim=4, stages=[StageSpec(5, 1, True)])
        cfg = lde_model_config(in_dim=4, num_classes=3, components=2,
                               frontend=fe)
        return Model(cfg, Rng(42))

    def test_model_roundtrip_bit_exact(self, tmp_path):
        model = self.build_model()
        path = tmp_path / "model.ckpt"
        save_model(path, model, epoch=7, rng_state={"note": "x"})
        back, meta = load_model(path)
        assert meta["epoch"] == 7
        assert meta["config"] == model_config_to_dict(model.cfg)
        assert back.cfg == model.cfg
        for a, b in zip(model.params(), back.params()):
            assert a.name == b.name
            assert np.array_equal(a.value, b.value)

    def test_scores_survive_roundtrip(self, tmp_path):
        model = self.build_model()
        x = Rng(1).normal((4, 20))
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        back, _ = load_model(path)
        assert np.array_equal(infer(model, x), infer(back, x))

    def test_same_model_same_bytes(self, tmp_path):
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_model(pa, self.build_model(), epoch=1)
        save_model(pb, self.build_model(), epoch=1)
        assert pa.read_bytes() == pb.read_bytes()

    def test_gmm_bank_roundtrip(self, tmp_path):
        gmms = [GmmModel(weights=np.array([0.25, 0.75]),
                         means=np.array([[0.0, 1.0], [2.0, -1.0]]),
                         variances=np.array([[1.0, 2.0], [0.5, 1.5]])),
                GmmModel(weights=np.array([1.0]),
                         means=np.array([[3.0, 3.0]]),
                         variances=np.array([[1.0, 1.0]]))]
        path = tmp_path / "gmm.ckpt"
        save_gmm_bank(path, gmms, meta={"num_classes": 2})
        back, meta = load_gmm_bank(path)
        assert meta["num_classes"] == 2
        assert len(back) == 2
        for a, b in zip(gmms, back):
            assert np.array_equal(a.weights, b.weights)
            assert np.array_equal(a.means, b.means)
            assert np.array_equal(a.variances, b.variances)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        model = self.build_model()
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "gmm.ckpt"
        save_gmm_bank(path, [GmmModel(weights=np.array([1.0]),
                                      means=np.zeros((1, 2)),
                                      variances=np.ones((1, 2)))])
        with pytest.raises(CheckpointError, match="model"):
            load_model(path)

    def test_missing_param_rejected(self, tmp_path):
        model = self.build_model()
        params = model.params()[:-1]  # drop one
        path = tmp_path / "partial.ckpt"
        save_checkpoint(path, {"kind": "model",
                               "config": model_config_to_dict(model.cfg)},
                        params=params)
        with pytest.raises(CheckpointError, match="missing"):
            load_model(path)
