"""Shared-backbone classifier/autoencoder with per-task heads.

The backbone encoder is shared by two projection heads: one feeds the
task classifiers, the other feeds the decoder. Task heads are created
lazily when their task starts and are never trained again after it ends.
"""

import numpy as np

from .exceptions import ConfigurationError
from .nn import (
    ConcatCondition,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    Network,
    Relu,
)
from .rng import Rng


def one_hot(labels, width: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= width):
        raise ConfigurationError(f"labels out of range for one-hot width {width}")
    out = np.zeros((len(labels), width))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class ContinualModel:
    """Backbone encoder E, projection heads, per-task classifiers and a
    decoder. ``encode_classify`` and ``encode_reconstruct`` share E and
    nothing else."""

    def __init__(self, encoder: Network, proj_classify: Network, proj_reconstruct: Network,
                 decoder: Network, *, input_shape, embedding_dim: int, num_classes: int,
                 head_hidden=(64, 32), head_dropout=0.2,
                 decoder_conditioned=False, flow_conditioned=False):
        self.encoder = encoder
        self.proj_classify = proj_classify
        self.proj_reconstruct = proj_reconstruct
        self.decoder = decoder
        self.heads: dict[int, Network] = {}
        self.head_classes: dict[int, int] = {}
        self.input_shape = tuple(input_shape)
        self.embedding_dim = int(embedding_dim)
        self.num_classes = int(num_classes)
        self.head_hidden = tuple(head_hidden)
        self.head_dropout = float(head_dropout)
        self.decoder_conditioned = bool(decoder_conditioned)
        self.flow_conditioned = bool(flow_conditioned)

    # -- heads --------------------------------------------------------

    def ensure_head(self, task_id: int, n_classes: int, rng: Rng) -> Network:
        if task_id in self.heads:
            return self.heads[task_id]
        layers = []
        prev = self.embedding_dim
        for width in self.head_hidden:
            layers += [Dense(prev, width, rng), Relu(), Dropout(self.head_dropout)]
            prev = width
        layers.append(Dense(prev, n_classes, rng))
        head = Network(layers, name=f"head-{task_id}")
        self.heads[task_id] = head
        self.head_classes[task_id] = int(n_classes)
        return head

    def head(self, task_id: int) -> Network:
        try:
            return self.heads[task_id]
        except KeyError:
            raise ConfigurationError(f"no classifier head exists for task {task_id}") from None

    # -- forward paths --------------------------------------------------

    def encode_classify(self, x, train=False, rng=None) -> np.ndarray:
        h = self.encoder.forward(x, train=train, rng=rng)
        return self.proj_classify.forward(h, train=train, rng=rng)

    def encode_reconstruct(self, x, train=False, rng=None) -> np.ndarray:
        h = self.encoder.forward(x, train=train, rng=rng)
        return self.proj_reconstruct.forward(h, train=train, rng=rng)

    def decode(self, z, y_onehot=None, train=False, rng=None) -> np.ndarray:
        if self.decoder_conditioned and y_onehot is None:
            raise ConfigurationError("decoder is conditioned: a class one-hot is required")
        if not self.decoder_conditioned and y_onehot is not None:
            raise ConfigurationError("decoder is not conditioned: got an unexpected condition")
        flat = self.decoder.forward(z, train=train, rng=rng, cond=y_onehot)
        if flat.ndim == 1:
            return flat.reshape(self.input_shape)
        return flat.reshape((len(flat),) + self.input_shape)

    def classify(self, x, task_id: int, train=False, rng=None) -> np.ndarray:
        z = self.encode_classify(x, train=train, rng=rng)
        return self.head(task_id).forward(z, train=train, rng=rng)

    def reconstruct(self, x, y_onehot=None, train=False, rng=None) -> np.ndarray:
        z = self.encode_reconstruct(x, train=train, rng=rng)
        return self.decode(z, y_onehot=y_onehot, train=train, rng=rng)

    # -- bookkeeping ----------------------------------------------------

    def classifier_parameters(self, task_id: int):
        return (self.encoder.parameters() + self.proj_classify.parameters()
                + self.head(task_id).parameters())

    def autoencoder_parameters(self):
        return self.proj_reconstruct.parameters() + self.decoder.parameters()

    def all_networks(self):
        nets = {
            "encoder": self.encoder,
            "proj_classify": self.proj_classify,
            "proj_reconstruct": self.proj_reconstruct,
            "decoder": self.decoder,
        }
        for task_id, head in self.heads.items():
            nets[f"head_{task_id}"] = head
        return nets

    def zero_all_grads(self):
        for net in self.all_networks().values():
            net.zero_grads()

    def param_count(self):
        return sum(net.param_count() for net in self.all_networks().values())


def build_mlp_model(input_shape, num_classes, rng: Rng, *, embedding_dim=16,
                    encoder_hidden=(64,), decoder_hidden=None,
                    head_hidden=(64, 32), head_dropout=0.2,
                    decoder_conditioned=False, flow_conditioned=False) -> ContinualModel:
    """Dense encoder/decoder pair for vector or flattened-image inputs."""
    input_shape = tuple(input_shape)
    in_dim = int(np.prod(input_shape))
    init = rng.fork("model-build")

    enc_layers = [Flatten()]
    prev = in_dim
    for width in encoder_hidden:
        enc_layers += [Dense(prev, width, init), Relu()]
        prev = width
    encoder = Network(enc_layers, name="encoder")

    proj_c = Network([Dense(prev, embedding_dim, init)], name="proj-classify")
    proj_r = Network([Dense(prev, embedding_dim, init)], name="proj-reconstruct")

    if decoder_hidden is None:
        decoder_hidden = tuple(reversed(encoder_hidden))
    dec_layers = []
    dprev = embedding_dim
    if decoder_conditioned:
        dec_layers.append(ConcatCondition(num_classes))
        dprev += num_classes
    for width in decoder_hidden:
        dec_layers += [Dense(dprev, width, init), Relu()]
        dprev = width
    dec_layers.append(Dense(dprev, in_dim, init))
    decoder = Network(dec_layers, name="decoder")

    return ContinualModel(
        encoder, proj_c, proj_r, decoder,
        input_shape=input_shape, embedding_dim=embedding_dim, num_classes=num_classes,
        head_hidden=head_hidden, head_dropout=head_dropout,
        decoder_conditioned=decoder_conditioned, flow_conditioned=flow_conditioned,
    )


def build_conv_model(input_shape, num_classes, rng: Rng, *, embedding_dim=100,
                     conv_channels=(8, 16), kernel_size=3, stride=2,
                     decoder_hidden=(256,), head_hidden=(64, 32), head_dropout=0.2,
                     decoder_conditioned=False, flow_conditioned=False) -> ContinualModel:
    """Small convolutional backbone for image inputs (channel-major)."""
    input_shape = tuple(input_shape)
    if len(input_shape) != 3:
        raise ConfigurationError("conv encoder needs (channels, height, width) inputs")
    init = rng.fork("model-build")

    enc_layers = []
    prev_c = input_shape[0]
    for ch in conv_channels:
        enc_layers += [Conv2d(prev_c, ch, kernel_size, init, stride=stride, padding="same"),
                       Relu()]
        prev_c = ch
    enc_layers.append(Flatten())
    encoder = Network(enc_layers, name="encoder")
    backbone_dim = encoder.forward(np.zeros((1,) + input_shape)).shape[1]

    proj_c = Network([Dense(backbone_dim, embedding_dim, init)], name="proj-classify")
    proj_r = Network([Dense(backbone_dim, embedding_dim, init)], name="proj-reconstruct")

    in_dim = int(np.prod(input_shape))
    dec_layers = []
    dprev = embedding_dim
    if decoder_conditioned:
        dec_layers.append(ConcatCondition(num_classes))
        dprev += num_classes
    for width in decoder_hidden:
        dec_layers += [Dense(dprev, width, init), Relu()]
        dprev = width
    dec_layers.append(Dense(dprev, in_dim, init))
    decoder = Network(dec_layers, name="decoder")

    return ContinualModel(
        encoder, proj_c, proj_r, decoder,
        input_shape=input_shape, embedding_dim=embedding_dim, num_classes=num_classes,
        head_hidden=head_hidden, head_dropout=head_dropout,
        decoder_conditioned=decoder_conditioned, flow_conditioned=flow_conditioned,
    )
