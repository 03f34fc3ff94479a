"""Small dense-array layer engine with reverse-mode gradients.

Only the layer kinds the vision and transition networks need are provided:
3x3 valid convolutions, 3x3/stride-2 max pooling and dense layers (with or
without bias). Arrays are float64 numpy arrays; convolution inputs use the
``(batch, channels, height, width)`` layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EXP_CLAMP = 20.0
ACTIVATIONS = ("tanh", "linear", "exp")


class ConfigurationError(ValueError):
    """Raised when shapes or layer settings do not fit together."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward or backward pass."""


def check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")


def _activate(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "linear":
        return z
    if kind == "exp":
        return np.exp(np.minimum(z, EXP_CLAMP))
    raise ConfigurationError(f"unknown activation {kind!r}")


def _activation_grad(kind, z, y, dy):
    if kind == "tanh":
        return dy * (1.0 - y * y)
    if kind == "linear":
        return dy
    # clamped region has zero slope
    return dy * np.where(z <= EXP_CLAMP, y, 0.0)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class. ``forward`` is pure and returns ``(output, cache)``."""

    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.activation = "linear"

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        """Return ``(dx, grads)`` where grads is keyed like ``params``."""
        raise NotImplementedError

    def output_shape(self, input_shape):
        raise NotImplementedError

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params.values()))


class Conv3x3(Layer):
    """3x3 convolution, stride 1, no padding."""

    kind = "conv3x3"

    def __init__(self, in_channels, out_channels, activation="tanh", rng=None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.activation = activation
        fan_in = in_channels * 9
        self.params = {
            "W": uniform_init(rng, (out_channels, in_channels, 3, 3), fan_in),
            "b": uniform_init(rng, (out_channels,), fan_in),
        }

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ConfigurationError(f"conv3x3 expects {self.in_channels} channels, got {c}")
        if h < 3 or w < 3:
            raise ConfigurationError(f"conv3x3 input {h}x{w} is smaller than the kernel")
        return (self.out_channels, h - 2, w - 2)

    def forward(self, x):
        if x.ndim != 4:
            raise ConfigurationError(f"conv3x3 expects (N, C, H, W) input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        win = sliding_window_view(x, (3, 3), axis=(2, 3))  # N C H' W' 3 3
        z = np.einsum("nchwij,ocij->nohw", win, self.params["W"], optimize=True)
        z += self.params["b"][None, :, None, None]
        y = _activate(self.activation, z)
        return y, (x, z, y)

    def backward(self, cache, dy):
        x, z, y = cache
        dz = _activation_grad(self.activation, z, y, dy)
        win = sliding_window_view(x, (3, 3), axis=(2, 3))
        dW = np.einsum("nchwij,nohw->ocij", win, dz, optimize=True)
        db = dz.sum(axis=(0, 2, 3))
        # full correlation of dz with the flipped kernel
        padded = np.pad(dz, ((0, 0), (0, 0), (2, 2), (2, 2)))
        pwin = sliding_window_view(padded, (3, 3), axis=(2, 3))
        dx = np.einsum("nohwij,ocij->nchw", pwin, self.params["W"][:, :, ::-1, ::-1], optimize=True)
        return dx, {"W": dW, "b": db}


class MaxPool3x3s2(Layer):
    """3x3 max pooling with stride 2 and no padding."""

    kind = "maxpool3x3s2"

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if h < 3 or w < 3:
            raise ConfigurationError(f"maxpool input {h}x{w} is smaller than the window")
        return (c, (h - 3) // 2 + 1, (w - 3) // 2 + 1)

    def forward(self, x):
        if x.ndim != 4:
            raise ConfigurationError(f"maxpool expects (N, C, H, W) input, got shape {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        win = sliding_window_view(x, (3, 3), axis=(2, 3))[:, :, ::2, ::2][:, :, :ho, :wo]
        flat = win.reshape(win.shape[:4] + (9,))
        # argmax returns the first maximal element in row-major window order
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, dy):
        shape, idx = cache
        n, c, ho, wo = dy.shape
        dx = np.zeros(shape)
        rows = 2 * np.arange(ho)[:, None] + idx // 3
        cols = 2 * np.arange(wo)[None, :] + idx % 3
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (ni, ci, rows, cols), dy)
        return dx, {}


class Dense(Layer):
    """Fully connected layer; flattens any trailing input dimensions."""

    kind = "dense"

    def __init__(self, in_dim, out_dim, activation="linear", bias=True, rng=None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.bias = bias
        self.kind = "dense" if bias else "dense_nobias"
        self.params = {"W": uniform_init(rng, (in_dim, out_dim), in_dim)}
        if bias:
            self.params["b"] = uniform_init(rng, (out_dim,), in_dim)

    def output_shape(self, input_shape):
        n_in = int(np.prod(input_shape))
        if n_in != self.in_dim:
            raise ConfigurationError(f"dense expects {self.in_dim} inputs, got {n_in}")
        return (self.out_dim,)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_dim:
            raise ConfigurationError(f"dense expects {self.in_dim} inputs, got {flat.shape[1]}")
        z = flat @ self.params["W"]
        if self.bias:
            z = z + self.params["b"]
        y = _activate(self.activation, z)
        return y, (x.shape, flat, z, y)

    def backward(self, cache, dy):
        shape, flat, z, y = cache
        dz = _activation_grad(self.activation, z, y, dy)
        grads = {"W": flat.T @ dz}
        if self.bias:
            grads["b"] = dz.sum(axis=0)
        dx = (dz @ self.params["W"].T).reshape(shape)
        return dx, grads


class Sequential:
    """Chain of layers with cached forward state and accumulated gradients."""

    def __init__(self, layers, names=None):
        self.layers = list(layers)
        self.names = list(names) if names is not None else [f"layer{i}" for i in range(len(self.layers))]
        self.grads = [{k: np.zeros_like(v) for k, v in l.params.items()} for l in self.layers]
        self._caches = None

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        check_finite("forward output", x)
        self._caches = caches
        return x

    def backward(self, dy):
        """Backpropagate ``dy``; adds parameter gradients into ``self.grads``."""
        if self._caches is None:
            raise RuntimeError("backward called before forward")
        for layer, cache, acc in zip(reversed(self.layers), reversed(self._caches), reversed(self.grads)):
            dy, grads = layer.backward(cache, dy)
            for k, g in grads.items():
                acc[k] += g
        check_finite("backward", dy, *[g for acc in self.grads for g in acc.values()])
        return dy

    def zero_grad(self):
        for acc in self.grads:
            for g in acc.values():
                g.fill(0.0)

    def parameters(self):
        return [p for l in self.layers for _, p in sorted(l.params.items())]

    def gradients(self):
        return [acc[k] for l, acc in zip(self.layers, self.grads) for k in sorted(l.params)]

    def named_parameters(self):
        for name, layer in zip(self.names, self.layers):
            for k, p in sorted(layer.params.items()):
                yield f"{name}.{k}", p

    @property
    def n_params(self):
        return sum(l.n_params for l in self.layers)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-4
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-4):
        self.params = list(params)
        self.state = AdamState(
            lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps,
            m=[np.zeros_like(p) for p in self.params],
            v=[np.zeros_like(p) for p in self.params],
        )

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ConfigurationError("gradient list does not match parameter list")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {i} (shape {g.shape})")
        s = self.state
        s.step_count += 1
        c1 = 1.0 - s.beta1 ** s.step_count
        c2 = 1.0 - s.beta2 ** s.step_count
        for p, g, m, v in zip(self.params, grads, s.m, s.v):
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.epsilon)

    def state_dict(self):
        s = self.state
        return {
            "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "epsilon": s.epsilon,
            "step_count": s.step_count,
            "m": [a.tolist() for a in s.m],
            "v": [a.tolist() for a in s.v],
        }

    def load_state_dict(self, d):
        s = self.state
        s.lr, s.beta1, s.beta2, s.epsilon = d["lr"], d["beta1"], d["beta2"], d["epsilon"]
        s.step_count = int(d["step_count"])
        for dst, src in zip(s.m + s.v, d["m"] + d["v"]):
            arr = np.asarray(src, dtype=np.float64).reshape(dst.shape)
            dst[...] = arr


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(grads, max_norm):
    """Scale ``grads`` in place so that their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads
