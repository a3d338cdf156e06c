import numpy as np
import pytest

from uwgen.errors import CheckpointError, ValidationError
from uwgen.models import (
    ClassifierModel,
    CycleGanState,
    DiscriminatorConfig,
    GeneratorConfig,
    build_classifier,
    build_discriminator,
    build_generator,
    classifier_forward,
    classifier_module,
    config_hash,
    discriminator_forward,
    discriminator_output_size,
    generator_forward,
    generator_module,
    init_cyclegan_state,
    load_classifier,
    load_cyclegan_state,
    save_classifier,
    save_cyclegan_state,
)
from uwgen.nn.layers import tree_flatten, param_count

TOY_GEN = GeneratorConfig(input_size=32, base_channels=4, residual_blocks=1)
TOY_DISC = DiscriminatorConfig(input_size=32, base_channels=4)


def batch(n, size, seed=0):
    return (np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32) * 2 - 1)


class TestGenerator:
    def test_indivisible_input_rejected(self):
        with pytest.raises(ValidationError, match="divisible"):
            GeneratorConfig(input_size=250, downsample_steps=2)

    def test_same_seed_identical_bytes(self):
        a = tree_flatten(build_generator(TOY_GEN, seed=3))
        b = tree_flatten(build_generator(TOY_GEN, seed=3))
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_zero_residual_blocks_valid(self):
        cfg = GeneratorConfig(input_size=16, base_channels=4, residual_blocks=0)
        params = build_generator(cfg, seed=0)
        y = generator_forward(cfg, params, batch(1, 16))
        assert y.shape == (1, 3, 16, 16)

    def test_param_count_pure_function_of_config(self):
        n1 = param_count(build_generator(TOY_GEN, seed=0))
        n2 = param_count(build_generator(TOY_GEN, seed=99))
        assert n1 == n2

    @pytest.mark.parametrize("n,size", [(2, 32), (1, 64)])
    def test_shape_preserving(self, n, size, kernel_backend):
        cfg = GeneratorConfig(input_size=size, base_channels=4, residual_blocks=1)
        y = generator_forward(cfg, build_generator(cfg, seed=1), batch(n, size))
        assert y.shape == (n, 3, size, size)

    def test_output_bounded(self):
        y = generator_forward(TOY_GEN, build_generator(TOY_GEN, seed=2), batch(4, 32, seed=5))
        assert y.min() >= -1.0 and y.max() <= 1.0

    def test_near_identity_at_init(self):
        x = batch(2, 32, seed=7)
        y = generator_forward(TOY_GEN, build_generator(TOY_GEN, seed=0), x)
        assert np.abs(y - x).max() <= 0.5

    def test_size_mismatch_rejected(self):
        params = build_generator(TOY_GEN, seed=0)
        with pytest.raises(ValidationError, match="32x32"):
            generator_forward(TOY_GEN, params, batch(1, 16))


def expected_patch_map(size, stride2_layers):
    """Shape oracle: symbolic conv arithmetic, independent of the network code."""
    s = size
    for _ in range(stride2_layers):
        s = (s - 4 + 2) // 2 + 1  # k=4, pad=1, stride=2
    for _ in range(2):
        s = (s - 4 + 2) // 1 + 1  # k=4, pad=1, stride=1
    return s


class TestDiscriminator:
    def test_256_input_gives_30x30_map(self):
        cfg = DiscriminatorConfig(input_size=256, base_channels=4)
        assert expected_patch_map(256, 3) == 30
        assert discriminator_output_size(cfg) == 30
        y = discriminator_forward(cfg, build_discriminator(cfg, seed=0), batch(1, 256))
        assert y.shape == (1, 1, 30, 30)

    def test_128_input_map_size(self):
        cfg = DiscriminatorConfig(input_size=128, base_channels=4)
        n = expected_patch_map(128, 3)
        y = discriminator_forward(cfg, build_discriminator(cfg, seed=0), batch(1, 128))
        assert y.shape == (1, 1, n, n)

    def test_batch_of_one(self):
        y = discriminator_forward(TOY_DISC, build_discriminator(TOY_DISC, seed=1), batch(1, 32))
        assert y.shape[0] == 1 and y.shape[1] == 1

    def test_forward_deterministic(self):
        params = build_discriminator(TOY_DISC, seed=2)
        x = batch(2, 32, seed=3)
        np.testing.assert_array_equal(
            discriminator_forward(TOY_DISC, params, x),
            discriminator_forward(TOY_DISC, params, x),
        )

    def test_scores_unbounded_dtype_real(self):
        y = discriminator_forward(TOY_DISC, build_discriminator(TOY_DISC, seed=0), batch(4, 32))
        assert np.issubdtype(y.dtype, np.floating)


class TestClassifier:
    def test_shape_suite_row_for_row(self):
        import uwgen.nn as nn

        m = classifier_module(0.0)
        params = m.init_params(np.random.default_rng(0))
        h = np.random.default_rng(0).random((1, 3, 150, 150)).astype(np.float32)
        sizes, flat_width = [], None
        for i, layer in enumerate(m.layers):
            key = f"{i:02d}_{layer.__class__.__name__.lower()}"
            h, _ = layer.forward(params.get(key, {}), h)
            if isinstance(layer, nn.MaxPool2d):
                sizes.append(h.shape[2])
            if isinstance(layer, nn.Flatten):
                flat_width = h.shape[1]
        assert sizes == [75, 37, 18]
        assert flat_width == 20736
        assert h.shape == (1, 5)

    def test_zero_final_layer_gives_uniform_fifth(self):
        model = build_classifier(0.0, seed=0, input_size=16)
        # zero the final dense layer -> equal logits -> softmax 0.2 each
        last = sorted(model.params)[-1]
        model.params[last] = {k: np.zeros_like(v) for k, v in model.params[last].items()}
        x = np.random.default_rng(1).random((3, 16, 16, 3))
        probs = classifier_forward(model, x)
        np.testing.assert_allclose(probs, 0.2, atol=1e-12)

    def test_rows_sum_to_one(self):
        model = build_classifier(0.2, seed=1, input_size=16)
        probs = classifier_forward(model, np.random.default_rng(2).random((8, 16, 16, 3)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert (probs >= 0).all()

    def test_eval_mode_deterministic_with_dropout(self):
        model = build_classifier(0.2, seed=3, input_size=16)
        x = np.random.default_rng(4).random((4, 16, 16, 3))
        np.testing.assert_array_equal(classifier_forward(model, x), classifier_forward(model, x))

    def test_train_mode_dropout_varies(self):
        model = build_classifier(0.2, seed=5, input_size=16)
        x = np.random.default_rng(6).random((4, 16, 16, 3))
        a = classifier_forward(model, x, train=True, rng=np.random.default_rng(1))
        b = classifier_forward(model, x, train=True, rng=np.random.default_rng(2))
        assert not np.array_equal(a, b)

    def test_dropout_rate_restricted(self):
        with pytest.raises(ValidationError):
            ClassifierModel(dropout_rate=0.5)

    def test_shape_error(self):
        model = build_classifier(0.0, seed=0, input_size=16)
        with pytest.raises(ValidationError, match="classifier expects"):
            classifier_forward(model, np.zeros((2, 3, 8, 8)))


class TestCheckpoints:
    def test_cyclegan_roundtrip_bit_exact(self, tmp_path):
        state = init_cyclegan_state(TOY_GEN, TOY_DISC, seed=0)
        state.opt = {
            "g_uw": {
                "m": {k: np.zeros_like(v) for k, v in tree_flatten(state.g_uw).items()},
                "v": {k: np.ones_like(v) for k, v in tree_flatten(state.g_uw).items()},
                "t": 7,
            }
        }
        state.step = 42
        p = tmp_path / "ck.npz"
        ckpt_id = save_cyclegan_state(state, p)
        loaded = load_cyclegan_state(p)
        assert loaded.step == 42 and loaded.checkpoint_id == ckpt_id
        assert loaded.gen_cfg == TOY_GEN and loaded.disc_cfg == TOY_DISC
        assert loaded.opt["g_uw"]["t"] == 7
        x = batch(2, 32, seed=9)
        np.testing.assert_array_equal(
            generator_forward(TOY_GEN, state.g_uw, x),
            generator_forward(TOY_GEN, loaded.g_uw, x),
        )
        np.testing.assert_array_equal(
            discriminator_forward(TOY_DISC, state.d_lab, x),
            discriminator_forward(TOY_DISC, loaded.d_lab, x),
        )

    def test_classifier_roundtrip_bit_exact(self, tmp_path):
        model = build_classifier(0.2, seed=4, input_size=16)
        p = tmp_path / "cls.npz"
        save_classifier(model, p, step=10, extra={"note": "probe"})
        loaded = load_classifier(p)
        assert loaded.dropout_rate == 0.2 and loaded.input_size == 16
        x = np.random.default_rng(0).random((2, 16, 16, 3))
        np.testing.assert_array_equal(classifier_forward(model, x), classifier_forward(loaded, x))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_cyclegan_state(tmp_path / "nope.npz")

    def test_kind_mismatch(self, tmp_path):
        model = build_classifier(0.0, seed=0, input_size=16)
        p = tmp_path / "cls.npz"
        save_classifier(model, p)
        with pytest.raises(CheckpointError, match="classifier"):
            load_cyclegan_state(p)

    def test_corrupt_file(self, tmp_path):
        p = tmp_path / "junk.npz"
        p.write_bytes(b"not a zip archive")
        with pytest.raises(CheckpointError, match="unreadable"):
            load_cyclegan_state(p)

    def test_config_hash_stable_and_sensitive(self):
        assert config_hash(TOY_GEN) == config_hash(GeneratorConfig(32, 4, 1))
        assert config_hash(TOY_GEN) != config_hash(GeneratorConfig(32, 8, 1))

    def test_mismatched_input_sizes_rejected(self):
        with pytest.raises(ValidationError, match="share input_size"):
            CycleGanState(
                gen_cfg=GeneratorConfig(32, 4, 1),
                disc_cfg=DiscriminatorConfig(input_size=64, base_channels=4),
                g_uw={}, g_lab={}, d_uw={}, d_lab={},
            )
