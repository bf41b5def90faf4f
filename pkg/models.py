"""
Convolutional autoencoder and the classifier built on its encoder.

Models are pure functions of a ParamSet and an input batch. Parameter names and order are
fixed by layer index, so every ParamSet built from the same spec has the same structure.
"""
import logging

import numpy as np

from config import AutoencoderSpec, ClassifierSpec
from utils.autodiff import (
    ShapeError,
    Tensor,
    as_tensor,
    conv1d,
    conv_transpose1d,
    linear,
    relu,
    reshape,
)
from utils.params import ParamSet

logger = logging.getLogger(__name__)

DEFAULT_AE_SPEC = AutoencoderSpec()
DEFAULT_CLASSIFIER_SPEC = ClassifierSpec()

ENCODER_PREFIX = "encoder."
DECODER_PREFIX = "decoder."
HEAD_PREFIX = "head."


class ModelStructureError(ValueError):
    """ParamSet does not match the expected architecture"""


def _uniform(rng, shape, limit):
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _init_weight(rng, shape, fans, init):
    """
    "he": uniform in +-sqrt(6 / fan_in), for layers followed by ReLU.
    "glorot": uniform in +-sqrt(6 / (fan_in + fan_out)), for linear outputs.
    """
    fan_in, fan_out = fans
    if init == "he":
        return _uniform(rng, shape, np.sqrt(6.0 / fan_in))
    if init == "glorot":
        return _uniform(rng, shape, np.sqrt(6.0 / (fan_in + fan_out)))
    raise ValueError(f"unknown init {init!r}")


def encoder_layout(spec=DEFAULT_AE_SPEC):
    """[(name, shape, (fan_in, fan_out), init)] for the encoder half"""
    layout = []
    ch_in = spec.in_channels
    for i in range(spec.n_conv_layers):
        shape = (spec.conv_filters, ch_in, spec.kernel)
        layout.append((f"encoder.conv{i}.weight", shape, (ch_in * spec.kernel, spec.conv_filters * spec.kernel), "he"))
        layout.append((f"encoder.conv{i}.bias", (spec.conv_filters,), None, "zeros"))
        ch_in = spec.conv_filters
    layout.append(("encoder.dense.weight", (spec.latent_dim, spec.flat_dim), (spec.flat_dim, spec.latent_dim), "glorot"))
    layout.append(("encoder.dense.bias", (spec.latent_dim,), None, "zeros"))
    return layout


def decoder_layout(spec=DEFAULT_AE_SPEC):
    layout = [
        ("decoder.dense.weight", (spec.flat_dim, spec.latent_dim), (spec.latent_dim, spec.flat_dim), "he"),
        ("decoder.dense.bias", (spec.flat_dim,), None, "zeros"),
    ]
    last = spec.n_conv_layers - 1
    for i in range(spec.n_conv_layers):
        ch_out = spec.in_channels if i == last else spec.conv_filters
        shape = (spec.conv_filters, ch_out, spec.kernel)
        if i == last:
            fans, init = (spec.conv_filters * spec.kernel, ch_out * spec.kernel), "glorot"
        else:
            # each output position of a strided scatter sums kernel / stride taps per input channel
            fans, init = (spec.conv_filters * spec.kernel / spec.stride, ch_out * spec.kernel), "he"
        layout.append((f"decoder.deconv{i}.weight", shape, fans, init))
        layout.append((f"decoder.deconv{i}.bias", (ch_out,), None, "zeros"))
    return layout


def head_layout(spec=DEFAULT_AE_SPEC, head=DEFAULT_CLASSIFIER_SPEC):
    return [
        ("head.hidden.weight", (head.hidden_dim, spec.latent_dim), (spec.latent_dim, head.hidden_dim), "he"),
        ("head.hidden.bias", (head.hidden_dim,), None, "zeros"),
        ("head.output.weight", (head.n_classes, head.hidden_dim), (head.hidden_dim, head.n_classes), "glorot"),
        ("head.output.bias", (head.n_classes,), None, "zeros"),
    ]


def _init_entries(layout, rng):
    entries = []
    for name, shape, fans, init in layout:
        if init == "zeros":
            values = np.zeros(shape, dtype=np.float32)
        else:
            values = _init_weight(rng, shape, fans, init)
        entries.append((name, Tensor(values, requires_grad=True, dtype=np.float32)))
    return entries


def build_autoencoder(spec=DEFAULT_AE_SPEC, seed=0):
    """
    Initialize autoencoder parameters.

    Weights feeding a ReLU are He-uniform, the latent and reconstruction layers Glorot-uniform;
    biases start at zero.

    Returns:
        ParamSet: encoder entries followed by decoder entries
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    params = ParamSet(_init_entries(encoder_layout(spec) + decoder_layout(spec), rng))
    logger.debug(f"Built autoencoder: {params.total_params:,} params, {params.byte_size:,} bytes")
    return params


def build_classifier_from_encoder(ae_params, seed=0, spec=DEFAULT_AE_SPEC, head=DEFAULT_CLASSIFIER_SPEC):
    """
    Copy the encoder of `ae_params` verbatim and attach a freshly initialized dense head.

    Raises:
        ModelStructureError: an encoder entry is missing or has the wrong shape
    """
    entries = []
    for name, shape, _, _ in encoder_layout(spec):
        if name not in ae_params:
            raise ModelStructureError(f"autoencoder params missing encoder entry {name!r}")
        source = ae_params[name]
        if tuple(source.shape) != shape:
            raise ModelStructureError(f"{name}: expected shape {list(shape)}, got {list(source.shape)}")
        entries.append((name, Tensor(source.data.copy(), requires_grad=True, dtype=source.dtype)))
    rng = np.random.default_rng(seed)
    entries.extend(_init_entries(head_layout(spec, head), rng))
    return ParamSet(entries)


def _check_batch(batch, spec):
    batch = as_tensor(batch)
    if batch.data.ndim != 3 or batch.shape[1] != spec.in_channels or batch.shape[2] != spec.window_len:
        raise ShapeError(
            f"expected batch [b, {spec.in_channels}, {spec.window_len}], got {list(batch.shape)}"
        )
    return batch


def encode(params, batch, spec=DEFAULT_AE_SPEC):
    """Encoder half: Tensor[b, ch, len] -> latent Tensor[b, latent_dim]"""
    batch = _check_batch(batch, spec)
    h = batch
    for i in range(spec.n_conv_layers):
        h = relu(conv1d(h, params[f"encoder.conv{i}.weight"], params[f"encoder.conv{i}.bias"],
                        stride=spec.stride, padding=spec.padding))
    h = reshape(h, (h.shape[0], spec.flat_dim))
    return linear(h, params["encoder.dense.weight"], params["encoder.dense.bias"])


def decode(params, latent, spec=DEFAULT_AE_SPEC):
    h = relu(linear(latent, params["decoder.dense.weight"], params["decoder.dense.bias"]))
    h = reshape(h, (h.shape[0], spec.conv_filters, spec.encoder_lengths()[-1]))
    last = spec.n_conv_layers - 1
    for i in range(spec.n_conv_layers):
        h = conv_transpose1d(h, params[f"decoder.deconv{i}.weight"], params[f"decoder.deconv{i}.bias"],
                             stride=spec.stride, padding=spec.padding, output_padding=spec.output_padding)
        if i != last:
            h = relu(h)
    return h


def ae_forward(params, batch, spec=DEFAULT_AE_SPEC):
    """
    Autoencoder forward pass.

    Returns:
        tuple: (reconstruction Tensor[b, ch, len], latent Tensor[b, latent_dim])
    """
    latent = encode(params, batch, spec)
    return decode(params, latent, spec), latent


def head_forward(params, latent):
    """Dense head on precomputed latents: latent -> relu(dense 32) -> logits"""
    h = relu(linear(as_tensor(latent), params["head.hidden.weight"], params["head.hidden.bias"]))
    return linear(h, params["head.output.weight"], params["head.output.bias"])


def classifier_forward(params, batch, spec=DEFAULT_AE_SPEC):
    """Classifier logits Tensor[b, n_classes]; softmax lives in the loss"""
    return head_forward(params, encode(params, batch, spec))


def encoder_names(spec=DEFAULT_AE_SPEC):
    return [name for name, _, _, _ in encoder_layout(spec)]


def head_names(spec=DEFAULT_AE_SPEC, head=DEFAULT_CLASSIFIER_SPEC):
    return [name for name, _, _, _ in head_layout(spec, head)]


def frozen_copy(params):
    """Copy whose tensors do not request gradients (inference only)"""
    return params.copy(requires_grad=False)


def predict_in_batches(fn, params, windows, batch_size=256):
    """Run `fn(params, batch)` over a window array without building a graph"""
    inference = frozen_copy(params)
    outputs = []
    for start in range(0, len(windows), batch_size):
        outputs.append(fn(inference, Tensor(windows[start:start + batch_size], dtype=np.float32)).data)
    if not outputs:
        return np.zeros((0,), dtype=np.float32)
    return np.concatenate(outputs, axis=0)


def encode_windows(params, windows, spec=DEFAULT_AE_SPEC, batch_size=256):
    """Latent vectors for a window array, shape [n, latent_dim]"""
    if len(windows) == 0:
        return np.zeros((0, spec.latent_dim), dtype=np.float32)
    return predict_in_batches(lambda p, b: encode(p, b, spec), params, windows, batch_size)


def predict_logits(params, windows, spec=DEFAULT_AE_SPEC, batch_size=256):
    if len(windows) == 0:
        return np.zeros((0, DEFAULT_CLASSIFIER_SPEC.n_classes), dtype=np.float32)
    return predict_in_batches(lambda p, b: classifier_forward(p, b, spec), params, windows, batch_size)


def reconstruction_loss(params, windows, spec=DEFAULT_AE_SPEC, batch_size=256):
    """Mean squared reconstruction error over all elements of `windows`"""
    if len(windows) == 0:
        return float("nan")
    inference = frozen_copy(params)
    total = 0.0
    count = 0
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        recon, _ = ae_forward(inference, Tensor(chunk, dtype=np.float32), spec)
        diff = recon.data.astype(np.float64) - chunk
        total += float((diff * diff).sum())
        count += diff.size
    return total / count
