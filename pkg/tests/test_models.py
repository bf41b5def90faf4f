"""
Tests for the autoencoder / classifier architecture
"""
import numpy as np
import pytest

from config import AutoencoderSpec, ClassifierSpec, ConfigError
from models import (
    ModelStructureError,
    ae_forward,
    build_autoencoder,
    build_classifier_from_encoder,
    classifier_forward,
    encode,
    encode_windows,
    encoder_names,
    head_names,
    reconstruction_loss,
)
from utils.autodiff import ShapeError, Tensor, backward, mse_loss
from utils.optim import ADAM, SGD, init_optimizer_state, optimizer_step


@pytest.fixture(scope="module")
def ae():
    return build_autoencoder(seed=0)


class TestArchitecture:

    def test_parameter_count(self, ae):
        assert ae.total_params == 98_790
        assert ae.byte_size == 395_160
        assert 0.36 <= ae.byte_size / 1024 ** 2 <= 0.40

    def test_encoder_and_head_sizes(self, ae):
        encoder = ae.subset("encoder.")
        assert encoder.total_params == 49_344
        clf = build_classifier_from_encoder(ae, seed=1)
        assert clf.total_params == 49_344 + 4_128 + 429
        assert clf.names() == encoder_names() + head_names()

    def test_parameter_shapes(self, ae):
        assert ae["encoder.conv0.weight"].shape == (32, 6, 5)
        assert ae["encoder.dense.weight"].shape == (128, 256)
        assert ae["decoder.dense.weight"].shape == (256, 128)
        assert ae["decoder.deconv3.weight"].shape == (32, 6, 5)
        assert ae["decoder.deconv3.bias"].shape == (6,)

    def test_initialization(self, ae):
        slack = 1 + 1e-6

        def within(name, limit):
            return np.all(np.abs(ae[name].data) <= limit * slack)

        w = ae["encoder.conv0.weight"].data
        assert w.dtype == np.float32
        assert within("encoder.conv0.weight", np.sqrt(6.0 / (6 * 5)))
        assert np.abs(w).max() > 0.9 * np.sqrt(6.0 / (6 * 5))
        assert within("decoder.deconv0.weight", np.sqrt(6.0 / (32 * 5 / 2)))
        assert within("encoder.dense.weight", np.sqrt(6.0 / (256 + 128)))
        assert within("decoder.deconv3.weight", np.sqrt(6.0 / (32 * 5 + 6 * 5)))
        assert np.all(ae["encoder.conv0.bias"].data == 0)

    def test_initial_reconstruction_keeps_scale(self, ae):
        batch = Tensor(np.random.default_rng(5).standard_normal((8, 6, 128)))
        recon, latent = ae_forward(ae, batch)
        assert recon.data.std() > 0.1
        assert latent.data.std() > 0.1

    def test_seeded(self, ae):
        assert build_autoencoder(seed=0).bitwise_equal(ae)
        assert not build_autoencoder(seed=1).bitwise_equal(ae)

    def test_spec_lengths(self):
        spec = AutoencoderSpec()
        assert spec.encoder_lengths() == [64, 32, 16, 8]
        assert spec.decoder_lengths() == [16, 32, 64, 128]
        assert spec.flat_dim == 256

    def test_invalid_spec(self):
        with pytest.raises(ConfigError, match="window length"):
            AutoencoderSpec(output_padding=0).validate()


class TestForward:

    def test_shapes(self, ae):
        batch = Tensor(np.random.default_rng(0).standard_normal((3, 6, 128)))
        recon, latent = ae_forward(ae, batch)
        assert recon.shape == (3, 6, 128)
        assert latent.shape == (3, 128)

    def test_wrong_input_shape(self, ae):
        with pytest.raises(ShapeError, match="expected batch"):
            encode(ae, Tensor(np.zeros((2, 6, 100))))

    def test_classifier_logits(self, ae):
        clf = build_classifier_from_encoder(ae, seed=2, head=ClassifierSpec())
        logits = classifier_forward(clf, Tensor(np.zeros((4, 6, 128))))
        assert logits.shape == (4, 13)

    def test_backward_reaches_every_parameter(self, ae):
        params = ae.copy(requires_grad=True)
        batch = Tensor(np.random.default_rng(1).standard_normal((2, 6, 128)))
        recon, _ = ae_forward(params, batch)
        backward(mse_loss(recon, batch))
        assert all(t.grad is not None for t in params.tensors())

    def test_identical_windows_identical_latents(self, ae):
        window = np.random.default_rng(2).standard_normal((1, 6, 128)).astype(np.float32)
        latents = encode_windows(ae, np.repeat(window, 3, axis=0))
        np.testing.assert_array_equal(latents[0], latents[1])
        np.testing.assert_array_equal(latents[0], latents[2])

    def test_zero_parameters_reconstruct_zeros(self, ae):
        zeros = ae.copy()
        for tensor in zeros.tensors():
            tensor.data[...] = 0
        batch = Tensor(np.random.default_rng(3).standard_normal((2, 6, 128)))
        recon, _ = ae_forward(zeros, batch)
        assert np.all(recon.data == 0)

    def test_batch_permutation_permutes_outputs(self, ae):
        rng = np.random.default_rng(4)
        batch = rng.standard_normal((5, 6, 128)).astype(np.float32)
        order = rng.permutation(5)
        recon, latent = ae_forward(ae, Tensor(batch))
        recon_p, latent_p = ae_forward(ae, Tensor(batch[order]))
        np.testing.assert_allclose(recon_p.data, recon.data[order], rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(latent_p.data, latent.data[order], rtol=1e-5, atol=1e-6)

    def test_reconstruction_loss_empty(self, ae):
        assert np.isnan(reconstruction_loss(ae, np.zeros((0, 6, 128), dtype=np.float32)))


class TestClassifierFromEncoder:

    def test_encoder_copied_verbatim(self, ae):
        clf = build_classifier_from_encoder(ae, seed=3)
        assert clf.bitwise_equal(ae, encoder_names())
        clf["encoder.dense.bias"].data[0] = 1.0
        assert ae["encoder.dense.bias"].data[0] == 0.0

    def test_head_depends_on_seed_only(self, ae):
        first = build_classifier_from_encoder(ae, seed=4)
        second = build_classifier_from_encoder(ae, seed=5)
        assert first.bitwise_equal(second, encoder_names())
        assert not first.bitwise_equal(second, head_names())
        assert build_classifier_from_encoder(ae, seed=4).bitwise_equal(first)

    def test_missing_encoder_entry(self, ae):
        decoder_only = ae.subset("decoder.")
        with pytest.raises(ModelStructureError, match="missing encoder entry"):
            build_classifier_from_encoder(decoder_only)

    def test_wrong_encoder_shape(self):
        other = build_autoencoder(AutoencoderSpec(conv_filters=16), seed=0)
        with pytest.raises(ModelStructureError, match="expected shape"):
            build_classifier_from_encoder(other)


def smooth_window(seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(128) / 50.0
    freqs = rng.uniform(0.5, 3.0, size=(6, 1))
    phases = rng.uniform(0, 2 * np.pi, size=(6, 1))
    window = np.sin(2 * np.pi * freqs * t + phases) + 0.1 * rng.standard_normal((6, 128))
    window = (window - window.mean(axis=1, keepdims=True)) / window.std(axis=1, keepdims=True)
    return window.astype(np.float32)


def test_autoencoder_overfits_one_window():
    params = build_autoencoder(seed=0)
    batch = np.repeat(smooth_window()[None], 16, axis=0)
    initial = reconstruction_loss(params, batch)
    state = init_optimizer_state(ADAM, 1e-3, params)
    for _ in range(300):
        params.zero_grad()
        recon, _ = ae_forward(params, Tensor(batch))
        backward(mse_loss(recon, Tensor(batch)))
        optimizer_step(params, state)
    assert reconstruction_loss(params, batch) < 0.01 * initial


def test_sgd_lowers_reconstruction_loss():
    params = build_autoencoder(seed=0)
    batch = np.stack([smooth_window(seed) for seed in range(8)])
    initial = reconstruction_loss(params, batch)
    state = init_optimizer_state(SGD, 0.01, params)
    for _ in range(100):
        params.zero_grad()
        recon, _ = ae_forward(params, Tensor(batch))
        backward(mse_loss(recon, Tensor(batch)))
        optimizer_step(params, state)
    assert reconstruction_loss(params, batch) < 0.8 * initial
