"""The 1-D convolutional encoder-decoder and its weight file format.

Default architecture for 288-sample (9.6 s at 30 Hz) windows:

    encoder  conv 1->8 k=150 p=20 relu    288 -> 179
             conv 8->8 k=75  p=10 relu    179 -> 125
             conv 8->8 k=50  p=0  sigmoid 125 -> 76   (latent, 8 x 76)
    decoder  tconv 8->8 k=50  p=0  sigmoid 76  -> 125
             tconv 8->8 k=75  p=10 relu    125 -> 179
             tconv 8->1 k=150 p=20 sigmoid 179 -> 288

Dropout (keep 0.5) follows each encoder activation during training.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import nncore
from .errors import (
    BadMagicError,
    BuildError,
    ShapeError,
    TruncatedFileError,
    WeightFileError,
)

WEIGHT_MAGIC = b"RSPCDC01"
_ACT_CODES = {"relu": 1, "sigmoid": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class ModelConfig:
    window_len: int = 288
    hidden_channels: int = 8
    encoder_kernels: tuple = (150, 75, 50)
    encoder_paddings: tuple = (20, 10, 0)
    encoder_activations: tuple = ("relu", "relu", "sigmoid")
    decoder_activations: tuple = ("sigmoid", "relu", "sigmoid")
    dropout_keep: float = 0.5


@dataclass
class Layer:
    params: nncore.ConvLayerParams
    transposed: bool
    activation: str
    dropout: bool

    def copy(self):
        return Layer(self.params.copy(), self.transposed, self.activation, self.dropout)


@dataclass
class EncoderDecoderModel:
    layers: list
    config: ModelConfig
    shape_plan: list
    adam: list = None

    @property
    def n_parameters(self):
        return sum(l.params.weights.size + l.params.bias.size for l in self.layers)

    def parameter_tensors(self):
        """Flat list of (label, array) pairs in layer order, weights then bias."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layer{i}.weights", layer.params.weights))
            out.append((f"layer{i}.bias", layer.params.bias))
        return out

    def copy(self):
        m = EncoderDecoderModel(
            [l.copy() for l in self.layers],
            replace(self.config),
            list(self.shape_plan),
            None,
        )
        if self.adam is not None:
            m.adam = [s.copy() for s in self.adam]
        return m


def shape_plan_for(config):
    """Per-stage lengths; raises BuildError naming the first broken stage."""
    plan = [config.window_len]
    length = config.window_len
    for i, (k, p) in enumerate(zip(config.encoder_kernels, config.encoder_paddings)):
        length = length + 2 * p - k + 1
        if length < 1:
            raise BuildError(
                f"encoder stage {i + 1}: output length {length} < 1 "
                f"(kernel {k}, padding {p})"
            )
        plan.append(length)
    for i, (k, p) in enumerate(
        zip(config.encoder_kernels[::-1], config.encoder_paddings[::-1])
    ):
        length = length - 1 + k - 2 * p
        if length < 1:
            raise BuildError(
                f"decoder stage {i + 1}: output length {length} < 1 "
                f"(kernel {k}, padding {p})"
            )
        plan.append(length)
    if length != config.window_len:
        raise BuildError(
            f"decoder output length {length} != window length {config.window_len}"
        )
    return plan


def build_model(config=None, rng_seed=0):
    """Initialize a model; deterministic for a given seed."""
    config = config or ModelConfig()
    n_enc = len(config.encoder_kernels)
    if not (
        n_enc == len(config.encoder_paddings) == len(config.encoder_activations)
        and n_enc == len(config.decoder_activations)
    ):
        raise BuildError("encoder/decoder stage lists must have equal lengths")
    plan = shape_plan_for(config)
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    h = config.hidden_channels
    layers = []
    enc_channels = [(1, h)] + [(h, h)] * (n_enc - 1)
    for (cin, cout), k, p, act in zip(
        enc_channels,
        config.encoder_kernels,
        config.encoder_paddings,
        config.encoder_activations,
    ):
        params = nncore.init_conv_params(cin, cout, k, p, act, rng)
        layers.append(Layer(params, transposed=False, activation=act, dropout=True))
    dec_channels = [(h, h)] * (n_enc - 1) + [(h, 1)]
    for (cin, cout), k, p, act in zip(
        dec_channels,
        config.encoder_kernels[::-1],
        config.encoder_paddings[::-1],
        config.decoder_activations,
    ):
        params = nncore.init_conv_params(cin, cout, k, p, act, rng)
        layers.append(Layer(params, transposed=True, activation=act, dropout=False))
    return EncoderDecoderModel(layers, config, plan)


def _check_window(x, window_len):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape != (1, window_len):
        raise ShapeError(f"input window must be 1 x {window_len}, got {x.shape}")
    if not np.isfinite(x).all():
        raise ShapeError("input window contains non-finite values")
    return x


def forward_batch(model, x, training=False, rng=None, keep_cache=False):
    """Run a batch ``(B, 1, L)`` through the network.

    Returns ``(output, latent, cache)``; ``cache`` is None unless requested.
    The latent map is the activation after the last encoder layer (before
    dropout). Dropout masks are drawn from ``rng`` only when training.
    """
    n_enc = len(model.config.encoder_kernels)
    keep = model.config.dropout_keep
    cache = [] if keep_cache else None
    latent = None
    act = x
    for i, layer in enumerate(model.layers):
        conv_in = act
        cols = None
        if layer.transposed:
            z = nncore.conv_transpose1d_forward_batch(conv_in, layer.params)
        elif keep_cache:
            z, cols = nncore.conv1d_forward_batch(
                conv_in, layer.params, return_cols=True
            )
        else:
            z = nncore.conv1d_forward_batch(conv_in, layer.params)
        if layer.activation == "relu":
            act = nncore.relu(z)
            act_info = z
        else:
            act = nncore.sigmoid(z)
            act_info = act
        if i == n_enc - 1:
            latent = act
        mask = None
        if layer.dropout and training:
            mask = nncore.make_dropout_mask(act.shape, keep, rng)
            act = act * mask / keep
        if keep_cache:
            cache.append(
                {"conv_in": conv_in, "act_info": act_info, "mask": mask,
                 "cols": cols}
            )
    return act, latent, cache


def backward_batch(model, cache, grad_out):
    """Gradients of every layer's weights and bias, output order == layer order."""
    keep = model.config.dropout_keep
    grads = [None] * len(model.layers)
    g = grad_out
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        entry = cache[i]
        if entry["mask"] is not None:
            g = g * entry["mask"] / keep
        if layer.activation == "relu":
            g = nncore.relu_backward(entry["act_info"], g)
        else:
            g = nncore.sigmoid_backward(entry["act_info"], g)
        need_input = i > 0
        if layer.transposed:
            g, gw, gb = nncore.conv_transpose1d_backward_batch(
                entry["conv_in"], layer.params, g, need_input_grad=need_input
            )
        else:
            g, gw, gb = nncore.conv1d_backward_batch(
                entry["conv_in"], layer.params, g,
                need_input_grad=need_input, cols=entry["cols"],
            )
        grads[i] = (gw, gb)
    return grads


def forward(model, ppg_window, training=False, rng_seed=0):
    """Map one PPG window to (respiratory estimate, latent map).

    Inference (``training=False``) is deterministic; training mode draws
    dropout masks from ``rng_seed``.
    """
    x = _check_window(ppg_window, model.config.window_len)
    rng = np.random.default_rng(rng_seed) if training else None
    y, latent, _ = forward_batch(model, x[None], training=training, rng=rng)
    return y[0], latent[0]


def encoder_activations(model, ppg_window):
    """Post-activation encoder maps in inference mode (used for attribution)."""
    x = _check_window(ppg_window, model.config.window_len)
    n_enc = len(model.config.encoder_kernels)
    acts = []
    act = x[None]
    for layer in model.layers[:n_enc]:
        z = nncore.conv1d_forward_batch(act, layer.params)
        act = nncore.relu(z) if layer.activation == "relu" else nncore.sigmoid(z)
        acts.append(act[0])
    return acts


def save_weights(model, path, include_adam=False):
    """Binary weight file: magic, layer headers, float32 tensors, optional Adam block."""
    parts = [
        WEIGHT_MAGIC,
        struct.pack("<II", len(model.layers), model.config.window_len),
    ]
    for layer in model.layers:
        p = layer.params
        parts.append(
            struct.pack(
                "<IIIIBBBB",
                p.in_channels,
                p.out_channels,
                p.kernel_size,
                p.padding,
                1 if layer.transposed else 0,
                _ACT_CODES[layer.activation],
                1 if layer.dropout else 0,
                0,
            )
        )
    for layer in model.layers:
        parts.append(layer.params.weights.astype("<f4").tobytes())
        parts.append(layer.params.bias.astype("<f4").tobytes())
    has_adam = include_adam and model.adam is not None
    parts.append(struct.pack("<B", 1 if has_adam else 0))
    if has_adam:
        s0 = model.adam[0]
        parts.append(struct.pack("<Qddd", s0.step_count, s0.beta1, s0.beta2, s0.epsilon))
        for state in model.adam:
            parts.append(state.first_moment.astype("<f8").tobytes())
            parts.append(state.second_moment.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def load_weights(path):
    """Rebuild a model from :func:`save_weights` output."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(len(WEIGHT_MAGIC), "magic") != WEIGHT_MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    n_layers, window_len = struct.unpack("<II", r.take(8, "layer count"))
    if n_layers < 2 or n_layers % 2 != 0:
        raise WeightFileError(f"implausible layer count {n_layers}")
    if window_len < 1:
        raise WeightFileError(f"implausible window length {window_len}")
    headers = []
    for i in range(n_layers):
        cin, cout, k, pad, transposed, act, drop, _ = struct.unpack(
            "<IIIIBBBB", r.take(20, f"layer {i} header")
        )
        if act not in _ACT_NAMES:
            raise WeightFileError(f"layer {i}: unknown activation code {act}")
        headers.append((cin, cout, k, pad, bool(transposed), _ACT_NAMES[act], bool(drop)))
    layers = []
    for i, (cin, cout, k, pad, transposed, act, drop) in enumerate(headers):
        nw = cout * cin * k
        w = np.frombuffer(r.take(4 * nw, f"layer {i} weights"), dtype="<f4")
        b = np.frombuffer(r.take(4 * cout, f"layer {i} bias"), dtype="<f4")
        params = nncore.ConvLayerParams(
            cin, cout, k, pad, w.astype(np.float64).reshape(cout, cin, k),
            b.astype(np.float64),
        )
        layers.append(Layer(params, transposed, act, drop))
    n_enc = n_layers // 2
    enc = layers[:n_enc]
    config = ModelConfig(
        window_len=window_len,
        hidden_channels=enc[0].params.out_channels,
        encoder_kernels=tuple(l.params.kernel_size for l in enc),
        encoder_paddings=tuple(l.params.padding for l in enc),
        encoder_activations=tuple(l.activation for l in enc),
        decoder_activations=tuple(l.activation for l in layers[n_enc:]),
        dropout_keep=0.5,
    )
    model = EncoderDecoderModel(layers, config, shape_plan_for(config))
    (has_adam,) = struct.unpack("<B", r.take(1, "adam flag"))
    if has_adam:
        step, b1, b2, eps = struct.unpack("<Qddd", r.take(32, "adam header"))
        states = []
        for label, tensor in model.parameter_tensors():
            m = np.frombuffer(r.take(8 * tensor.size, f"adam m of {label}"), dtype="<f8")
            v = np.frombuffer(r.take(8 * tensor.size, f"adam v of {label}"), dtype="<f8")
            states.append(
                nncore.AdamState(
                    m.reshape(tensor.shape).copy(),
                    v.reshape(tensor.shape).copy(),
                    step,
                    b1,
                    b2,
                    eps,
                )
            )
        model.adam = states
    if r.pos != len(data):
        raise WeightFileError(f"{len(data) - r.pos} trailing bytes in {path}")
    return model


def check_same_shapes(a, b):
    """Raise ShapeError unless two models have congruent parameter tensors."""
    if len(a.layers) != len(b.layers):
        raise ShapeError(
            f"layer count mismatch: {len(a.layers)} vs {len(b.layers)}"
        )
    for i, (la, lb) in enumerate(zip(a.layers, b.layers)):
        if la.params.weights.shape != lb.params.weights.shape:
            raise ShapeError(
                f"layer {i}: weight shape {la.params.weights.shape} != "
                f"{lb.params.weights.shape}"
            )
