"""Vision and transition networks plus JSON checkpoints.

The vision network turns an 11x11 local view into a context code. The
transition network maps ``(context, last position change, action)`` onto a
diagonal Gaussian over the next position change. Position changes live in a
space scaled up by ``DP_SCALE``; :meth:`AffordanceModel.predict` converts
to and from environment units.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .tensor_nn import (
    ConfigurationError,
    Conv3x3,
    Dense,
    MaxPool3x3s2,
    Sequential,
    check_finite,
)

VIEW_SIZE = 11
DP_SCALE = 4.0
ACTION_DIM = 4
TRANSITION_HIDDEN = 32
CONTEXT_SIZES = (0, 1, 3, 5, 8, 16, 32)
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _check_dim_c(dim_c):
    if dim_c not in CONTEXT_SIZES:
        raise ConfigurationError(f"unsupported context size {dim_c}; expected one of {CONTEXT_SIZES}")


def vision_widths(dim_c):
    """Return ``(conv_channels, hidden_width)`` for a context size."""
    _check_dim_c(dim_c)
    if dim_c == 32:
        return 8, 32
    if dim_c >= 5:
        return 4, 16
    return 4, 8


def vision_param_count(dim_c, dim_i):
    """Parameter count of the vision network as tabulated by the authors."""
    _check_dim_c(dim_c)
    if dim_i < 1:
        raise ConfigurationError("need at least one input channel")
    if dim_c < 5:
        return 564 + dim_i * 36 + dim_c * 9
    if dim_c <= 16:
        return 964 + dim_i * 36 + dim_c * 17
    return 4312 + dim_i * 72


def transition_param_count(dim_c):
    _check_dim_c(dim_c)
    return 324 + dim_c * 32


def build_vision(dim_c, dim_i, rng):
    """conv3x3 -> maxpool -> conv3x3 -> dense hidden -> dense code, tanh throughout."""
    channels, hidden = vision_widths(dim_c)
    if dim_i < 1:
        raise ConfigurationError("need at least one input channel")
    layers = [
        Conv3x3(dim_i, channels, "tanh", rng),
        MaxPool3x3s2(),
        Conv3x3(channels, channels, "tanh", rng),
    ]
    net = Sequential(layers)
    flat = int(np.prod(net.output_shape((dim_i, VIEW_SIZE, VIEW_SIZE))))
    layers += [Dense(flat, hidden, "tanh", rng=rng), Dense(hidden, dim_c, "tanh", rng=rng)]
    return Sequential(layers, ["conv1", "pool", "conv2", "fc", "code"])


class TransitionNet:
    """Bias-free tanh hidden layer feeding a linear mean head and an exp std head."""

    def __init__(self, dim_c, rng):
        _check_dim_c(dim_c)
        self.dim_c = dim_c
        self.in_dim = dim_c + 2 + ACTION_DIM
        self.hidden = Dense(self.in_dim, TRANSITION_HIDDEN, "tanh", bias=False, rng=rng)
        self.mean_head = Dense(TRANSITION_HIDDEN, 2, "linear", rng=rng)
        self.std_head = Dense(TRANSITION_HIDDEN, 2, "exp", rng=rng)
        self.layers = [self.hidden, self.mean_head, self.std_head]
        self.names = ["hidden", "mean", "std"]
        self.grads = [{k: np.zeros_like(v) for k, v in l.params.items()} for l in self.layers]

    def forward(self, x):
        """Scaled-space forward pass; returns ``(mean, std, cache)``."""
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(f"transition input width {x.shape[-1]} != {self.in_dim}")
        h, ch = self.hidden.forward(x)
        mean, cm = self.mean_head.forward(h)
        std, cs = self.std_head.forward(h)
        return mean, std, (ch, cm, cs)

    def backward(self, cache, dmean, dstd, accumulate=True):
        """Return gradient w.r.t. the input; optionally add parameter grads."""
        ch, cm, cs = cache
        dh_m, gm = self.mean_head.backward(cm, dmean)
        dh_s, gs = self.std_head.backward(cs, dstd)
        dx, gh = self.hidden.backward(ch, dh_m + dh_s)
        if accumulate:
            for acc, g in zip(self.grads, (gh, gm, gs)):
                for k, v in g.items():
                    acc[k] += v
        return dx

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
class GaussianPrediction:
    mean: np.ndarray
    std: np.ndarray


class AffordanceModel:
    """Vision network + transition network, trained jointly."""

    def __init__(self, dim_c, dim_i, seed=0):
        _check_dim_c(dim_c)
        self.dim_c = dim_c
        self.dim_i = dim_i
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.vision = build_vision(dim_c, dim_i, rng)
        self.transition = TransitionNet(dim_c, rng)
        self.epoch = 0
        self.meta: dict = {}

    # -- inference -------------------------------------------------------
    def context(self, views):
        """Context codes for a batch of views shaped ``(N, dim_i, 11, 11)``."""
        views = np.asarray(views, dtype=np.float64)
        if views.ndim == 3:
            views = views[None]
        if views.shape[1] != self.dim_i:
            raise ConfigurationError(f"view has {views.shape[1]} channels, model expects {self.dim_i}")
        if self.dim_c == 0:
            return np.zeros((views.shape[0], 0))
        out = views
        for layer in self.vision.layers:
            out, _ = layer.forward(out)
        return out

    def transition_input(self, codes, dp, actions):
        codes = np.asarray(codes, dtype=np.float64).reshape(len(dp), -1)
        if codes.shape[1] != self.dim_c:
            raise ConfigurationError(f"context width {codes.shape[1]} != {self.dim_c}")
        return np.concatenate([codes, DP_SCALE * np.asarray(dp, dtype=np.float64), actions], axis=1)

    def predict_from_codes(self, codes, dp, actions):
        """Gaussian over the next position change, in environment units."""
        dp = np.atleast_2d(np.asarray(dp, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        mean, std, _ = self.transition.forward(self.transition_input(codes, dp, actions))
        check_finite("transition output", mean, std)
        return GaussianPrediction(mean / DP_SCALE, std / DP_SCALE)

    def predict(self, views, dp, actions):
        return self.predict_from_codes(self.context(views), dp, actions)

    # -- bookkeeping -----------------------------------------------------
    @property
    def n_vision_params(self):
        return self.vision.n_params

    @property
    def n_transition_params(self):
        return self.transition.n_params

    def named_parameters(self):
        for name, p in self.vision.named_parameters():
            yield f"vision.{name}", p
        for name, p in self.transition.named_parameters():
            yield f"transition.{name}", p

    def digest(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()[:16]


def save_checkpoint(model, path, optimizer_state=None):
    """Write ``model`` as JSON; floats use repr so reloading is bit-exact."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "dim_c": model.dim_c,
        "dim_i": model.dim_i,
        "epoch": model.epoch,
        "seed": model.seed,
        "meta": model.meta,
        "layers": {
            name: {"shape": list(p.shape), "data": p.ravel().tolist()}
            for name, p in model.named_parameters()
        },
    }
    if optimizer_state is not None:
        doc["optimizer"] = optimizer_state
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_checkpoint(path, dim_c=None, dim_i=None, with_optimizer=False):
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version') if isinstance(doc, dict) else None}")
    for key in ("dim_c", "dim_i", "layers", "epoch", "seed"):
        if key not in doc:
            raise CheckpointError(f"{path}: missing key {key!r}")
    if dim_c is not None and doc["dim_c"] != dim_c:
        raise CheckpointError(f"{path}: checkpoint has dim_c={doc['dim_c']}, expected {dim_c}")
    if dim_i is not None and doc["dim_i"] != dim_i:
        raise CheckpointError(f"{path}: checkpoint has dim_i={doc['dim_i']}, expected {dim_i}")
    try:
        model = AffordanceModel(doc["dim_c"], doc["dim_i"], seed=doc["seed"])
    except ConfigurationError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    layers = doc["layers"]
    params = dict(model.named_parameters())
    if set(layers) != set(params):
        raise CheckpointError(f"{path}: layer names do not match the architecture")
    loaded = {}
    for name, p in params.items():
        entry = layers[name]
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if shape != p.shape or data.size != p.size:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {shape} vs {p.shape}")
        loaded[name] = data.reshape(shape)
    for name, p in params.items():
        p[...] = loaded[name]
    model.epoch = int(doc["epoch"])
    model.meta = doc.get("meta", {})
    if with_optimizer:
        return model, doc.get("optimizer")
    return model
