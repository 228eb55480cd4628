"""Invertible multi-scale stack of permutation / batch-norm / coupling blocks.

Two directions are exposed: "normalizing" maps data (embeddings) to the
isotropic normal prior and is the direction used for density evaluation
and training; "generating" maps prior draws back to data space and is
used for sampling. Per-sample log-determinants are accumulated exactly,
which keeps the log-likelihood tractable.

Backpropagation exists only for the normalizing direction (the one that
is trained). Batch statistics inside the batch-norm layers are treated
as constants in the gradient.

Layer cache slots serve the single training thread: a backward pass must
follow its own forward pass. Concurrent sampling or density evaluation
on a frozen stack returns correct values regardless (results never read
the caches), training concurrently with anything is not supported.
"""

import numpy as np

from .exceptions import ConfigurationError, DivergenceError, StateError
from .nn import Dense, Network, Relu
from .rng import Rng

NORMALIZING = "normalizing"
GENERATING = "generating"

LOG_2PI = float(np.log(2.0 * np.pi))

# tanh bound on log-scales; keeps exp(log s) in a sane range so a badly
# initialized or diverging net cannot blow up the whole stack
LOG_SCALE_BOUND = 2.0


def _check_direction(direction):
    if direction not in (NORMALIZING, GENERATING):
        raise ConfigurationError(f"unknown direction {direction!r}")


class Permutation:
    """Fixed random reordering of the dimensions. Volume preserving.

    The draw is rejected while it maps the pass-through half of the
    following coupling onto itself: a permutation that shuffles within
    the halves would leave the next block transforming the same
    coordinates again, which for small widths happens often enough to
    cripple the stack (at width 2 a uniform draw is the identity half
    the time).
    """

    def __init__(self, dim: int, rng: Rng):
        self.dim = int(dim)
        half = set(range((dim + 1) // 2))
        self.perm = rng.permutation(dim)
        if dim > 1:
            for _ in range(100):
                if set(int(p) for p in self.perm[:len(half)]) != half:
                    break
                self.perm = rng.permutation(dim)
        self.inv = np.argsort(self.perm)

    def apply(self, x, direction, cond=None, train=False):
        _check_direction(direction)
        idx = self.perm if direction == NORMALIZING else self.inv
        return x[:, idx], np.zeros(len(x))

    def backward_normalizing(self, grad, grad_logdet):
        return grad[:, self.inv]

    def param_count(self):
        return 0

    def parameters(self):
        return []


class BatchNorm:
    """Per-dimension normalization with running statistics, no trainable
    affine part. Invertible with a closed-form log-determinant.

    Train mode normalizes with the current batch statistics and then
    folds them into the running estimates (the very first batch simply
    initializes them). Eval mode and the generating direction always use
    the running statistics.
    """

    def __init__(self, dim: int, momentum=0.1, eps=1e-5):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1], got {momentum}")
        if eps <= 0.0:
            raise ConfigurationError("eps must be positive")
        self.dim = int(dim)
        self.momentum = float(momentum)  # weight of the new batch
        self.eps = float(eps)
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.initialized = False
        self._cache = None

    def _require_init(self):
        if not self.initialized:
            raise StateError("batch norm used in eval/generating mode before any statistics exist")

    def apply(self, x, direction, cond=None, train=False):
        _check_direction(direction)
        if direction == NORMALIZING:
            if train:
                if len(x) < 2:
                    raise ConfigurationError("batch norm needs batch size >= 2 in train mode")
                mean_b = x.mean(axis=0)
                var_b = x.var(axis=0)
                if not self.initialized:
                    self.mean[...] = mean_b
                    self.var[...] = var_b
                    self.initialized = True
                else:
                    m = self.momentum
                    self.mean[...] = (1.0 - m) * self.mean + m * mean_b
                    self.var[...] = (1.0 - m) * self.var + m * var_b
                mean, var = mean_b, var_b
            else:
                self._require_init()
                mean, var = self.mean, self.var
            denom = np.sqrt(var + self.eps)
            self._cache = denom
            logdet = -0.5 * float(np.log(var + self.eps).sum())
            return (x - mean) / denom, np.full(len(x), logdet)
        self._require_init()
        scale = np.sqrt(self.var + self.eps)
        logdet = 0.5 * float(np.log(self.var + self.eps).sum())
        return x * scale + self.mean, np.full(len(x), logdet)

    def backward_normalizing(self, grad, grad_logdet):
        # batch statistics are constants for the gradient, so the logdet
        # term contributes nothing and the map is a fixed rescaling
        if self._cache is None:
            raise StateError("BatchNorm.backward called without a cached forward pass")
        denom, self._cache = self._cache, None
        return grad / denom

    def param_count(self):
        return 0

    def parameters(self):
        return []


class Coupling:
    """Affine coupling: the first chunk passes through untouched and
    parameterizes an elementwise scale/shift of the second chunk.

    The scale/translation nets are two-layer MLPs; the raw scale output
    is squashed through tanh into [-LOG_SCALE_BOUND, LOG_SCALE_BOUND].
    Their final layers start at zero so a fresh coupling is the identity.
    On widths < 2 the second chunk is empty and the layer degenerates to
    the identity, which keeps deep multi-scale stacks on small inputs
    well defined.
    """

    def __init__(self, dim: int, hidden: int, rng: Rng, cond_width: int = 0):
        self.dim = int(dim)
        self.hidden = int(hidden)
        self.cond_width = int(cond_width)
        self.a_dim = (dim + 1) // 2
        self.b_dim = dim // 2
        if self.b_dim > 0:
            in_dim = self.a_dim + self.cond_width
            self.scale_net = Network(
                [Dense(in_dim, hidden, rng), Relu(), Dense(hidden, self.b_dim, rng)],
                name="coupling-scale",
            )
            self.translate_net = Network(
                [Dense(in_dim, hidden, rng), Relu(), Dense(hidden, self.b_dim, rng)],
                name="coupling-translate",
            )
            for net in (self.scale_net, self.translate_net):
                last = net.layers[-1]
                last.w[...] = 0.0
                last.b[...] = 0.0
        else:
            self.scale_net = None
            self.translate_net = None
        self._cache = None

    @property
    def conditioned(self):
        return self.cond_width > 0

    def _net_input(self, a, cond):
        if self.conditioned:
            if cond is None:
                raise ConfigurationError("conditioned coupling layer called without a condition")
            cond = np.asarray(cond, dtype=float)
            if cond.ndim == 1:
                cond = np.broadcast_to(cond, (len(a), cond.size))
            if cond.shape != (len(a), self.cond_width):
                raise ConfigurationError(
                    f"condition shape {cond.shape} does not match (batch, {self.cond_width})"
                )
            return np.concatenate([a, cond], axis=1)
        if cond is not None:
            raise ConfigurationError("condition passed to an unconditioned coupling layer")
        return a

    def apply(self, x, direction, cond=None, train=False):
        _check_direction(direction)
        if x.shape[1] != self.dim:
            raise ConfigurationError(
                f"coupling expects width {self.dim}, got {x.shape[1]}"
            )
        if self.b_dim == 0:
            return x, np.zeros(len(x))
        a = x[:, :self.a_dim]
        b = x[:, self.a_dim:]
        net_in = self._net_input(a, cond)
        raw = self.scale_net.forward(net_in)
        log_s = LOG_SCALE_BOUND * np.tanh(raw)
        if not np.isfinite(log_s).all():
            raise DivergenceError("coupling produced non-finite log-scales")
        t = self.translate_net.forward(net_in)
        if direction == GENERATING:
            out_b = np.exp(log_s) * b + t
            logdet = log_s.sum(axis=1)
            self._cache = None
        else:
            out_b = (b - t) * np.exp(-log_s)
            logdet = -log_s.sum(axis=1)
            self._cache = (raw, log_s, out_b)
        return np.concatenate([a, out_b], axis=1), logdet

    def backward_normalizing(self, grad, grad_logdet):
        if self.b_dim == 0:
            return grad
        if self._cache is None:
            raise StateError("Coupling.backward called without a cached normalizing pass")
        raw, log_s, y_b = self._cache
        self._cache = None
        da = grad[:, :self.a_dim].copy()
        db_out = grad[:, self.a_dim:]
        d_in_b = db_out * np.exp(-log_s)
        dt = -d_in_b
        dlog_s = -db_out * y_b - grad_logdet[:, None]
        draw = dlog_s * LOG_SCALE_BOUND * (1.0 - np.tanh(raw) ** 2)
        d_net_in = self.scale_net.backward(draw) + self.translate_net.backward(dt)
        da += d_net_in[:, :self.a_dim]
        return np.concatenate([da, d_in_b], axis=1)

    def param_count(self):
        if self.b_dim == 0:
            return 0
        return self.scale_net.param_count() + self.translate_net.param_count()

    def parameters(self):
        if self.b_dim == 0:
            return []
        return self.scale_net.parameters() + self.translate_net.parameters()


class FlowStack:
    """Levels of invertible blocks with multi-scale splits and an
    isotropic standard-normal prior over the concatenated outputs.

    At the end of every non-final level the vector is split: the first
    half is emitted straight to the output, the rest continues into the
    next level. The emitted chunks concatenated in level order form the
    prior variable, so the total dimensionality never changes.
    """

    def __init__(self, levels, dim: int, cond_width: int = 0):
        if not levels or any(not lvl for lvl in levels):
            raise ConfigurationError("flow needs at least one non-empty level")
        self.levels = [list(lvl) for lvl in levels]
        self.dim = int(dim)
        self.cond_width = int(cond_width)
        self.level_widths = []
        self.emit_widths = []
        w = self.dim
        for i, _ in enumerate(self.levels):
            if w < 1:
                raise ConfigurationError("too many levels for this dimensionality")
            self.level_widths.append(w)
            if i < len(self.levels) - 1:
                emit = (w + 1) // 2
                self.emit_widths.append(emit)
                w -= emit
            else:
                self.emit_widths.append(w)
        for lvl, width, layers in zip(range(len(self.levels)), self.level_widths, self.levels):
            for layer in layers:
                if getattr(layer, "dim", width) != width:
                    raise ConfigurationError(
                        f"level {lvl} expects width {width}, layer {type(layer).__name__} "
                        f"has width {layer.dim}"
                    )

    def _layer_cond(self, layer, cond):
        return cond if getattr(layer, "cond_width", 0) else None

    def _check_cond(self, cond):
        if self.cond_width and cond is None:
            raise ConfigurationError("this flow is conditioned; a condition vector is required")
        if not self.cond_width and cond is not None:
            raise ConfigurationError("condition passed to an unconditioned flow")

    def normalize(self, z, cond=None, train=False):
        """Data to prior. Returns (u, per-sample log-determinant)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.dim:
            raise ConfigurationError(f"flow expects width {self.dim}, got {z.shape[1]}")
        self._check_cond(cond)
        h = z
        logdet = np.zeros(len(z))
        outs = []
        for lvl, layers in enumerate(self.levels):
            for i, layer in enumerate(layers):
                try:
                    h, ld = layer.apply(h, NORMALIZING, cond=self._layer_cond(layer, cond),
                                        train=train)
                except DivergenceError as err:
                    raise DivergenceError(f"level {lvl}, layer {i}: {err}") from None
                logdet += ld
            if lvl < len(self.levels) - 1:
                emit = self.emit_widths[lvl]
                outs.append(h[:, :emit])
                h = h[:, emit:]
        outs.append(h)
        return np.concatenate(outs, axis=1), logdet

    def generate(self, u, cond=None):
        """Prior to data, using running batch-norm statistics."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[1] != self.dim:
            raise ConfigurationError(f"flow expects width {self.dim}, got {u.shape[1]}")
        self._check_cond(cond)
        chunks = []
        start = 0
        for width in self.emit_widths:
            chunks.append(u[:, start:start + width])
            start += width
        h = chunks[-1]
        for lvl in range(len(self.levels) - 1, -1, -1):
            for layer in reversed(self.levels[lvl]):
                h, _ = layer.apply(h, GENERATING, cond=self._layer_cond(layer, cond))
            if lvl > 0:
                h = np.concatenate([chunks[lvl - 1], h], axis=1)
        return h

    def backward_normalizing(self, grad_u, grad_logdet):
        """Backpropagate through the cached normalizing pass.

        grad_u is the loss gradient w.r.t. the prior variable, grad_logdet
        the per-sample gradient w.r.t. the accumulated log-determinant.
        Parameter gradients accumulate inside the coupling nets; the
        return value is the gradient w.r.t. the flow input.
        """
        grad_u = np.atleast_2d(np.asarray(grad_u, dtype=float))
        chunks = []
        start = 0
        for width in self.emit_widths:
            chunks.append(grad_u[:, start:start + width])
            start += width
        g = chunks[-1]
        for lvl in range(len(self.levels) - 1, -1, -1):
            for layer in reversed(self.levels[lvl]):
                g = layer.backward_normalizing(g, grad_logdet)
            if lvl > 0:
                g = np.concatenate([chunks[lvl - 1], g], axis=1)
        return g

    def log_prob(self, z, cond=None, train=False):
        """Per-sample log-density under the flow."""
        u, logdet = self.normalize(z, cond=cond, train=train)
        log_prior = -0.5 * (u ** 2).sum(axis=1) - 0.5 * self.dim * LOG_2PI
        return log_prior + logdet

    def sample(self, n: int, rng: Rng, cond=None):
        u = rng.normal(size=(n, self.dim))
        return self.generate(u, cond=cond)

    def parameters(self):
        pairs = []
        for layers in self.levels:
            for layer in layers:
                pairs.extend(layer.parameters())
        return pairs

    def zero_grads(self):
        for _, g in self.parameters():
            g[...] = 0.0

    def param_count(self):
        return sum(layer.param_count() for layers in self.levels for layer in layers)

    def level_summary(self):
        return [
            {"level": i, "width": w, "emitted": e, "layers": len(layers)}
            for i, (w, e, layers) in enumerate(
                zip(self.level_widths, self.emit_widths, self.levels)
            )
        ]


def nll_loss(stack: FlowStack, z, cond=None, train=False) -> float:
    """Mean negative log-likelihood of a batch under the flow."""
    return float(-stack.log_prob(z, cond=cond, train=train).mean())


def nll_loss_and_backward(stack: FlowStack, z, cond=None, train=True) -> float:
    """One NLL forward/backward pass; gradients accumulate in the stack."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    u, logdet = stack.normalize(z, cond=cond, train=train)
    n = len(z)
    nll = 0.5 * (u ** 2).sum(axis=1) + 0.5 * stack.dim * LOG_2PI - logdet
    grad_u = u / n
    grad_logdet = np.full(n, -1.0 / n)
    stack.backward_normalizing(grad_u, grad_logdet)
    return float(nll.mean())


def build_flow(dim: int, levels: int, blocks: int, rng: Rng, *,
               hidden_multiplier: int = 2, cond_width: int = 0,
               bn_momentum: float = 0.1, bn_eps: float = 1e-5) -> FlowStack:
    """Standard topology: `levels` levels of `blocks` blocks, each block
    being permutation -> batch norm -> coupling in normalizing order.

    Exactly one coupling receives the condition vector: the first one met
    when walking from the prior towards the data, i.e. the last coupling
    of the first (full-width) level. Placing it at the prior side lets
    every remaining block spread the class information across all
    dimensions during sampling; at the data side the condition would
    only ever steer the transformed half of the coordinates."""
    if dim < 2:
        raise ConfigurationError("flow dimensionality must be >= 2")
    if levels < 1 or blocks < 1:
        raise ConfigurationError("levels and blocks must be >= 1")
    level_layers = []
    w = dim
    for lvl in range(levels):
        if w < 1:
            raise ConfigurationError(f"{levels} levels is too deep for dimension {dim}")
        layers = []
        for blk in range(blocks):
            conditioned = cond_width > 0 and lvl == 0 and blk == blocks - 1
            layers.append(Permutation(w, rng))
            layers.append(BatchNorm(w, momentum=bn_momentum, eps=bn_eps))
            layers.append(Coupling(w, hidden_multiplier * w, rng,
                                   cond_width=cond_width if conditioned else 0))
        level_layers.append(layers)
        if lvl < levels - 1:
            w -= (w + 1) // 2
    return FlowStack(level_layers, dim, cond_width=cond_width)
