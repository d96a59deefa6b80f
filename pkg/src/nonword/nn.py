"""A small numpy neural-network core with exact backpropagation.

Activations use NCHW layout for image-like inputs and ``(batch, units)`` for
dense layers. Every layer implements ``forward(x, training, rng)`` returning
``(y, cache)`` and ``backward(dy, cache)`` returning ``(dx, grads)``.
Parameters are plain numpy arrays addressed as ``"<layer name>.<param>"``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ShapeMismatch, StaleCache

PROB_CLIP = 1e-7
LAYER_KINDS = ("conv3x3", "relu", "batchnorm", "maxpool2x2", "flatten", "dense", "dropout", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    """Serializable description of one layer."""

    kind: str
    name: str
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "name": self.name, "args": dict(self.args)}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], name=d["name"], args=dict(d.get("args", {})))


class Layer:
    kind = ""

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.buffers = {}
        self.frozen = False

    def check_input(self, shape):
        pass

    def forward(self, x, training, rng):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero 'same' padding."""

    kind = "conv3x3"

    def __init__(self, name, in_channels, out_channels, rng=None, dtype=np.float32):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        rng = np.random.default_rng(0) if rng is None else rng
        self.params["weight"] = he_uniform(rng, (out_channels, in_channels, 3, 3), in_channels * 9, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected (N, {self.in_channels}, H, W), got {tuple(shape)}")

    def forward(self, x, training, rng):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
        wmat = self.params["weight"].reshape(self.out_channels, c * 9).T
        out = cols @ wmat + self.params["bias"]
        y = out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, dy, cache):
        cols, (n, c, h, w) = cache
        f = self.out_channels
        d2 = dy.transpose(0, 2, 3, 1).reshape(-1, f)
        wmat = self.params["weight"].reshape(f, c * 9).T
        grads = {
            "weight": (cols.T @ d2).T.reshape(f, c, 3, 3),
            "bias": d2.sum(axis=0),
        }
        dcols = (d2 @ wmat.T).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
        for kh in range(3):
            for kw in range(3):
                dxp[:, :, kh : kh + h, kw : kw + w] += dcols[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, {}


class BatchNorm(Layer):
    """Batch normalization over the channel axis (axis 1).

    Training mode normalizes with biased batch statistics and updates the
    running averages; inference mode, and any frozen layer, uses the
    running statistics.
    """

    kind = "batchnorm"

    def __init__(self, name, channels, momentum=0.9, epsilon=1e-5, dtype=np.float32):
        super().__init__(name)
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def check_input(self, shape):
        if len(shape) not in (2, 4) or shape[1] != self.channels:
            raise ShapeMismatch(f"expected {self.channels} channels on axis 1, got {tuple(shape)}")

    def _bshape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, training, rng):
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bs = self._bshape(x)
        gamma = self.params["gamma"].reshape(bs)
        beta = self.params["beta"].reshape(bs)
        if training and not self.frozen:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = m * rm + (1.0 - m) * mean.astype(rm.dtype)
            rv[...] = m * rv + (1.0 - m) * var.astype(rv.dtype)
            batch_stats = True
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
            batch_stats = False
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        return gamma * xhat + beta, (xhat, inv_std, axes, batch_stats)

    def backward(self, dy, cache):
        xhat, inv_std, axes, batch_stats = cache
        bs = self._bshape(dy)
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dxhat = dy * self.params["gamma"].reshape(bs)
        if not batch_stats:
            return dxhat * inv_std.reshape(bs), grads
        count = dy.size // dy.shape[1]
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = (inv_std.reshape(bs) / count) * (count * dxhat - s1 - xhat * s2)
        return dx, grads


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2x2"

    def check_input(self, shape):
        if len(shape) != 4 or shape[2] < 2 or shape[3] < 2:
            raise ShapeMismatch(f"expected (N, C, H>=2, W>=2), got {tuple(shape)}")

    def forward(self, x, training, rng):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        win = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h2, w2, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, cache):
        idx, (n, c, h, w) = cache
        h2, w2 = h // 2, w // 2
        dwin = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        dx = np.zeros((n, c, h, w), dtype=dy.dtype)
        dx[:, :, : 2 * h2, : 2 * w2] = dwin
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_units, out_units, rng=None, dtype=np.float32):
        super().__init__(name)
        self.in_units = in_units
        self.out_units = out_units
        rng = np.random.default_rng(0) if rng is None else rng
        self.params["weight"] = he_uniform(rng, (in_units, out_units), in_units, dtype)
        self.params["bias"] = np.zeros(out_units, dtype=dtype)

    def check_input(self, shape):
        if len(shape) != 2 or shape[1] != self.in_units:
            raise ShapeMismatch(f"expected (N, {self.in_units}), got {tuple(shape)}")

    def forward(self, x, training, rng):
        return x @ self.params["weight"] + self.params["bias"], x

    def backward(self, dy, cache):
        grads = {"weight": cache.T @ dy, "bias": dy.sum(axis=0)}
        return dy @ self.params["weight"].T, grads


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` during training."""

    kind = "dropout"

    def __init__(self, name, rate=0.5):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training, rng):
        if not training or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError(f"{self.name}: training-mode dropout needs an rng seed")
        keep = rng.random(x.shape) >= self.rate
        scale = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * scale, scale

    def backward(self, dy, cache):
        return (dy if cache is None else dy * cache), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, training, rng):
        y = expit(x)
        return y, y

    def backward(self, dy, cache):
        return dy * cache * (1.0 - cache), {}


def make_layer(spec, rng=None, dtype=np.float32):
    """Instantiate a layer from its :class:`LayerSpec`; ``rng`` seeds initialization."""
    a = spec.args
    if spec.kind == "conv3x3":
        return Conv3x3(spec.name, a["in_channels"], a["out_channels"], rng=rng, dtype=dtype)
    if spec.kind == "dense":
        return Dense(spec.name, a["in_units"], a["out_units"], rng=rng, dtype=dtype)
    if spec.kind == "batchnorm":
        return BatchNorm(spec.name, a["channels"], a.get("momentum", 0.9), a.get("epsilon", 1e-5), dtype=dtype)
    if spec.kind == "dropout":
        return Dropout(spec.name, a.get("rate", 0.5))
    simple = {"relu": ReLU, "maxpool2x2": MaxPool2x2, "flatten": Flatten, "sigmoid": Sigmoid}
    return simple[spec.kind](spec.name)


@dataclass
class ForwardCache:
    layer_ids: tuple
    caches: list
    training: bool


def forward(layers, x, training=False, rng_seed=None):
    """Run ``x`` through ``layers``.

    Returns ``(output, cache)``. When training, ``rng_seed`` seeds the
    dropout masks (layers draw from one generator in order).
    """
    rng = None if rng_seed is None else np.random.default_rng(rng_seed)
    caches = []
    for i, layer in enumerate(layers):
        try:
            layer.check_input(x.shape)
        except ShapeMismatch as exc:
            raise ShapeMismatch(f"layer {i} ({layer.name}): {exc}") from None
        x, c = layer.forward(x, training, rng)
        caches.append(c)
    return x, ForwardCache(tuple(id(l) for l in layers), caches, training)


def backward(layers, cache, loss_grad):
    """Reverse-mode pass from ``d loss / d output``.

    Returns ``(grads, input_grad)`` where ``grads`` maps
    ``"<layer>.<param>"`` to gradient arrays. Frozen layers pass gradients
    through to their inputs but contribute no parameter gradients.
    """
    if not cache.training:
        raise StaleCache("backward needs a cache from a training-mode forward")
    if cache.layer_ids != tuple(id(l) for l in layers) or len(cache.caches) != len(layers):
        raise StaleCache("cache was produced by a different layer list")
    grads = {}
    dy = loss_grad
    for layer, c in zip(reversed(layers), reversed(cache.caches)):
        dy, g = layer.backward(dy, c)
        if not layer.frozen:
            for pname, arr in g.items():
                grads[f"{layer.name}.{pname}"] = arr
    return grads, dy


def parameters(layers, trainable_only=False):
    """``{"<layer>.<param>": array}`` (the live arrays, not copies)."""
    out = {}
    for layer in layers:
        if trainable_only and layer.frozen:
            continue
        for pname, arr in layer.params.items():
            out[f"{layer.name}.{pname}"] = arr
    return out


def buffers(layers):
    return {f"{l.name}.{b}": arr for l in layers for b, arr in l.buffers.items()}


def _per_sample_weights(target, weights, positive_label):
    if weights is None:
        return np.ones_like(target, dtype=np.float64)
    w_pos, w_neg = weights.positive_negative(positive_label)
    return np.where(target > 0.5, w_pos, w_neg)


def weighted_bce(pred, target, weights=None, positive_label="incorrect"):
    """Mean of ``-w(y) * [y log p + (1 - y) log(1 - p)]`` with ``p`` clipped to [1e-7, 1 - 1e-7].

    ``weights`` is a :class:`~nonword.dataset.ClassWeights`; target 1 is the
    positive label.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64).reshape(-1), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    w = _per_sample_weights(y, weights, positive_label)
    return float(np.mean(-w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def weighted_bce_grad(pred, target, weights=None, positive_label="incorrect"):
    """Gradient of :func:`weighted_bce` with respect to ``pred`` (zero where clipped)."""
    shape = np.shape(pred)
    raw = np.asarray(pred, dtype=np.float64).reshape(-1)
    p = np.clip(raw, PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    w = _per_sample_weights(y, weights, positive_label)
    g = -w * (y / p - (1.0 - y) / (1.0 - p)) / len(y)
    g[(raw < PROB_CLIP) | (raw > 1.0 - PROB_CLIP)] = 0.0
    return g.reshape(shape).astype(np.asarray(pred).dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied in place to ``params``.

    Only parameters that have an entry in ``grads`` move. Returns ``state``.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(grads):
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p -= update.astype(p.dtype)
    return state


def numerical_gradient(f, arr, h=1e-5):
    """Central finite differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a, b):
    """``||a - b|| / max(||a|| + ||b||, 1e-12)`` over whole arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def gradient_check(layers, x, rng_seed=0, h=1e-5, upstream=None):
    """Compare :func:`backward` against central differences.

    The scalar objective is ``sum(forward(x) * upstream)`` evaluated in
    training mode with a fixed dropout seed. Running statistics are restored
    around every evaluation so repeated forwards see identical state.
    Returns ``{name: relative error}`` for every parameter and for ``"input"``.
    """
    saved = {k: v.copy() for k, v in buffers(layers).items()}

    def restore():
        for k, v in buffers(layers).items():
            v[...] = saved[k]

    out, cache = forward(layers, x, training=True, rng_seed=rng_seed)
    if upstream is None:
        upstream = np.random.default_rng(12345).standard_normal(out.shape)
    grads, dx = backward(layers, cache, upstream)
    restore()

    def objective():
        y, _ = forward(layers, x, training=True, rng_seed=rng_seed)
        restore()
        return float(np.sum(y * upstream))

    errors = {"input": relative_error(dx, numerical_gradient(objective, x, h))}
    for name, arr in parameters(layers, trainable_only=True).items():
        errors[name] = relative_error(grads[name], numerical_gradient(objective, arr, h))
    return errors
