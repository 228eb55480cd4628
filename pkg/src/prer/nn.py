"""Dense/conv network substrate with hand-written backpropagation.

Everything runs in float64. Layers cache their most recent forward pass;
``backward`` consumes the cache and accumulates parameter gradients in
place, so several loss terms can be backpropagated before a single
optimizer step. There is no general autodiff: a network is an ordered
list of layers and gradients flow back through that list only.
"""

import logging

import numpy as np

from .exceptions import ConfigurationError, StateError
from .rng import Rng

log = logging.getLogger(__name__)

_zero_cosine_logged = False


def reset_run_warnings():
    """Re-arm warnings that are emitted at most once per run."""
    global _zero_cosine_logged
    _zero_cosine_logged = False


def glorot_uniform(fan_in, fan_out, shape, rng: Rng) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class Layer:
    """Base layer: float64 parameters with matching gradient buffers."""

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []
        self._cache = None

    def _register(self, *arrays):
        for a in arrays:
            self.params.append(a)
            self.grads.append(np.zeros_like(a))

    def forward(self, x, train=False, rng=None, cond=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(
                f"{type(self).__name__}.backward called without a cached forward pass"
            )
        cache, self._cache = self._cache, None
        return cache

    def zero_grads(self):
        for g in self.grads:
            g[...] = 0.0

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def spec(self) -> dict:
        raise NotImplementedError


class Dense(Layer):
    """Affine map y = x W^T + b with weight shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng):
        super().__init__()
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.w = glorot_uniform(in_dim, out_dim, (out_dim, in_dim), rng)
        self.b = np.zeros(out_dim)
        self._register(self.w, self.b)

    def forward(self, x, train=False, rng=None, cond=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(
                f"expected input of width {self.in_dim}, got shape {x.shape}"
            )
        self._cache = x
        return x @ self.w.T + self.b

    def backward(self, grad):
        x = self._take_cache()
        self.grads[0] += grad.T @ x
        self.grads[1] += grad.sum(axis=0)
        return grad @ self.w

    def spec(self):
        return {"kind": "dense", "in_dim": self.in_dim, "out_dim": self.out_dim}

    @classmethod
    def from_spec(cls, spec):
        layer = cls.__new__(cls)
        Layer.__init__(layer)
        layer.in_dim = spec["in_dim"]
        layer.out_dim = spec["out_dim"]
        layer.w = np.zeros((layer.out_dim, layer.in_dim))
        layer.b = np.zeros(layer.out_dim)
        layer._register(layer.w, layer.b)
        return layer


class Relu(Layer):
    def forward(self, x, train=False, rng=None, cond=None):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        mask = self._take_cache()
        return np.where(mask, grad, 0.0)

    def spec(self):
        return {"kind": "relu"}

    @classmethod
    def from_spec(cls, spec):
        return cls()


class Dropout(Layer):
    """Inverted dropout: training scales kept units by 1/keep so that
    evaluation mode is the identity."""

    def __init__(self, drop_prob: float):
        super().__init__()
        if not 0.0 <= drop_prob < 1.0:
            raise ConfigurationError(f"drop probability must be in [0, 1), got {drop_prob}")
        self.drop_prob = float(drop_prob)

    def forward(self, x, train=False, rng=None, cond=None):
        if not train or self.drop_prob == 0.0:
            self._cache = 1.0
            return x
        if rng is None:
            raise ConfigurationError("dropout in train mode needs an rng")
        keep = 1.0 - self.drop_prob
        mask = (rng.random(x.shape) >= self.drop_prob) / keep
        self._cache = mask
        return x * mask

    def backward(self, grad):
        mask = self._take_cache()
        return grad * mask

    def spec(self):
        return {"kind": "dropout", "drop_prob": self.drop_prob}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["drop_prob"])


class Flatten(Layer):
    def forward(self, x, train=False, rng=None, cond=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        shape = self._take_cache()
        return grad.reshape(shape)

    def spec(self):
        return {"kind": "flatten"}

    @classmethod
    def from_spec(cls, spec):
        return cls()


class ConcatCondition(Layer):
    """Appends a per-sample condition vector to the features."""

    def __init__(self, cond_dim: int):
        super().__init__()
        self.cond_dim = int(cond_dim)

    def forward(self, x, train=False, rng=None, cond=None):
        if cond is None:
            raise ConfigurationError("this network requires a condition vector")
        cond = np.asarray(cond, dtype=float)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (x.shape[0], cond.size))
        if cond.shape != (x.shape[0], self.cond_dim):
            raise ConfigurationError(
                f"condition shape {cond.shape} does not match (batch, {self.cond_dim})"
            )
        self._cache = x.shape[1]
        return np.concatenate([x, cond], axis=1)

    def backward(self, grad):
        width = self._take_cache()
        return grad[:, :width]

    def spec(self):
        return {"kind": "concat_condition", "cond_dim": self.cond_dim}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["cond_dim"])


class Conv2d(Layer):
    """2-D convolution over (batch, channels, height, width) inputs,
    implemented via im2col. Padding is "valid" or "same"."""

    def __init__(self, in_channels, out_channels, kernel_size, rng: Rng,
                 stride=1, padding="valid"):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        if padding not in ("valid", "same"):
            raise ConfigurationError(f"unknown padding mode {padding!r}")
        if stride < 1:
            raise ConfigurationError("stride must be >= 1")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kh, self.kw = int(kh), int(kw)
        self.stride = int(stride)
        self.padding = padding
        fan_in = in_channels * kh * kw
        fan_out = out_channels * kh * kw
        self.w = glorot_uniform(fan_in, fan_out, (out_channels, in_channels, kh, kw), rng)
        self.b = np.zeros(out_channels)
        self._register(self.w, self.b)

    def _pads(self, size, k):
        if self.padding == "valid":
            return 0, 0
        out = -(-size // self.stride)
        total = max((out - 1) * self.stride + k - size, 0)
        return total // 2, total - total // 2

    def forward(self, x, train=False, rng=None, cond=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (batch, {self.in_channels}, h, w) input, got shape {x.shape}"
            )
        n, _, h, w = x.shape
        ph0, ph1 = self._pads(h, self.kh)
        pw0, pw1 = self._pads(w, self.kw)
        xp = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
        hp, wp = xp.shape[2], xp.shape[3]
        if hp < self.kh or wp < self.kw:
            raise ValueError(f"input {h}x{w} smaller than kernel {self.kh}x{self.kw}")
        oh = (hp - self.kh) // self.stride + 1
        ow = (wp - self.kw) // self.stride + 1
        cols = np.empty((n, self.in_channels, self.kh, self.kw, oh, ow))
        s = self.stride
        for i in range(self.kh):
            for j in range(self.kw):
                cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
        y = np.tensordot(self.w, cols, axes=([1, 2, 3], [1, 2, 3]))
        y = y.transpose(1, 0, 2, 3) + self.b[None, :, None, None]
        self._cache = (cols, xp.shape, (ph0, ph1, pw0, pw1), x.shape)
        return y

    def backward(self, grad):
        cols, xp_shape, pads, x_shape = self._take_cache()
        self.grads[1] += grad.sum(axis=(0, 2, 3))
        self.grads[0] += np.tensordot(grad, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(grad, self.w, axes=([1], [0]))
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros(xp_shape)
        s = self.stride
        oh, ow = grad.shape[2], grad.shape[3]
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
        ph0, ph1, pw0, pw1 = pads
        h, w = x_shape[2], x_shape[3]
        return dxp[:, :, ph0:ph0 + h, pw0:pw0 + w]

    def spec(self):
        return {
            "kind": "conv2d",
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": [self.kh, self.kw],
            "stride": self.stride,
            "padding": self.padding,
        }

    @classmethod
    def from_spec(cls, spec):
        layer = cls.__new__(cls)
        Layer.__init__(layer)
        layer.in_channels = spec["in_channels"]
        layer.out_channels = spec["out_channels"]
        layer.kh, layer.kw = spec["kernel"]
        layer.stride = spec["stride"]
        layer.padding = spec["padding"]
        layer.w = np.zeros((layer.out_channels, layer.in_channels, layer.kh, layer.kw))
        layer.b = np.zeros(layer.out_channels)
        layer._register(layer.w, layer.b)
        return layer


_LAYER_KINDS = {
    "dense": Dense,
    "relu": Relu,
    "dropout": Dropout,
    "flatten": Flatten,
    "concat_condition": ConcatCondition,
    "conv2d": Conv2d,
}


def layer_from_spec(spec: dict) -> Layer:
    try:
        cls = _LAYER_KINDS[spec["kind"]]
    except KeyError:
        raise ConfigurationError(f"unknown layer kind {spec.get('kind')!r}") from None
    return cls.from_spec(spec)


class Network:
    """An ordered stack of layers sharing one forward/backward pass."""

    def __init__(self, layers, name="net"):
        self.layers = list(layers)
        self.name = name
        self._has_condition = any(isinstance(l, ConcatCondition) for l in self.layers)

    def forward(self, x, train=False, rng=None, cond=None):
        x = np.asarray(x, dtype=float)
        if cond is not None and not self._has_condition:
            raise ConfigurationError(f"{self.name}: condition given but no layer consumes it")
        promoted = False
        if x.ndim == 1 or (x.ndim == 3 and isinstance(self.layers[0], (Conv2d, Flatten))):
            x = x[None]
            promoted = True
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, train=train, rng=rng, cond=cond)
            except ValueError as err:
                raise ConfigurationError(
                    f"{self.name}: layer {i} ({type(layer).__name__}): {err}"
                ) from err
        return x[0] if promoted else x

    def backward(self, grad):
        grad = np.asarray(grad, dtype=float)
        if grad.ndim == 1:
            grad = grad[None]
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self):
        pairs = []
        for layer in self.layers:
            pairs.extend(zip(layer.params, layer.grads))
        return pairs

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers)

    def get_params(self):
        return [p.copy() for p, _ in self.parameters()]

    def set_params(self, values):
        pairs = self.parameters()
        if len(values) != len(pairs):
            raise ConfigurationError(
                f"{self.name}: expected {len(pairs)} parameter arrays, got {len(values)}"
            )
        for (p, _), v in zip(pairs, values):
            if p.shape != v.shape:
                raise ConfigurationError(f"{self.name}: shape mismatch restoring parameters")
            p[...] = v

    def manifest(self):
        return {"name": self.name, "layers": [l.spec() for l in self.layers]}

    @classmethod
    def from_manifest(cls, manifest):
        layers = [layer_from_spec(s) for s in manifest["layers"]]
        return cls(layers, name=manifest.get("name", "net"))


# ---------------------------------------------------------------------------
# losses


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> float:
    """Mean negative log-softmax of the true class."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())

def cross_entropy_grad(logits, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def mse(a, b) -> float:
    """Mean squared elementwise difference."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(((a - b) ** 2).mean())


def mse_grad(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return 2.0 * (a - b) / a.size


def _warn_zero_vector():
    global _zero_cosine_logged
    if not _zero_cosine_logged:
        log.warning("cosine distance saw a zero vector; treating it as orthogonal (distance 1)")
        _zero_cosine_logged = True


def cosine_distance(a, b) -> float:
    """1 - cos(a, b) in [0, 2]. A zero vector is treated as orthogonal."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        _warn_zero_vector()
        return 1.0
    cos = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return float(1.0 - cos)


def row_cosine_similarity(a, b) -> np.ndarray:
    """Per-row cosine similarity of two (n, d) arrays; zero rows give 0."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0.0) | (nb == 0.0)
    if zero.any():
        _warn_zero_vector()
    denom = np.where(zero, 1.0, na * nb)
    sims = np.clip((a * b).sum(axis=1) / denom, -1.0, 1.0)
    return np.where(zero, 0.0, sims)


def mean_cosine_distance(a, b) -> float:
    """Mean over rows of (1 - cosine similarity)."""
    return float((1.0 - row_cosine_similarity(a, b)).mean())


def mean_cosine_distance_grad(a, b) -> np.ndarray:
    """Gradient of mean_cosine_distance w.r.t. its first argument."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    zero = (na == 0.0) | (nb == 0.0)
    na_safe = np.where(zero, 1.0, na)
    nb_safe = np.where(zero, 1.0, nb)
    a_hat = a / na_safe
    b_hat = b / nb_safe
    cos = (a_hat * b_hat).sum(axis=1, keepdims=True)
    grad = (cos * a_hat - b_hat) / na_safe
    grad = np.where(zero, 0.0, grad)
    return grad / len(a)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a fixed list of (param, grad) pairs."""

    def __init__(self, param_grad_pairs, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.pairs = list(param_grad_pairs)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p, _ in self.pairs]
        self.v = [np.zeros_like(p) for p, _ in self.pairs]

    def step(self, grads=None):
        if grads is None:
            grads = [g for _, g in self.pairs]
        if len(grads) != len(self.pairs):
            raise ConfigurationError(
                f"expected {len(self.pairs)} gradient arrays, got {len(grads)}"
            )
        for (p, _), g in zip(self.pairs, grads):
            if g.shape != p.shape:
                raise ConfigurationError(
                    f"gradient shape {g.shape} does not match parameter shape {p.shape}"
                )
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for (p, _), g, m, v in zip(self.pairs, grads, self.m, self.v):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def reset(self):
        """Zero the moments and the step counter; the learning rate is kept."""
        self.t = 0
        for m, v in zip(self.m, self.v):
            m[...] = 0.0
            v[...] = 0.0
