"""Small CNN/MLP on a flat float64 parameter vector.

Parameters of every layer live in one contiguous slice of a flat array:
the weight tensor (row-major) followed by the bias.  Conv weights are
``(out, in, k, k)``, dense weights ``(out, in)``.  Each hidden layer is
followed by ReLU (and 2x2 max-pooling for conv layers when enabled); the
final layer is the linear classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedobp.rng import RngSeed, as_generator, derive


@dataclass(frozen=True)
class Layer:
    name: str
    start: int
    end: int
    kind: str  # "conv" or "fc"
    is_classifier: bool = False

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class LayerLayout:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("layout needs at least one layer")
        pos = 0
        for layer in self.layers:
            if layer.start != pos or layer.end <= layer.start:
                raise ValueError(f"layer {layer.name!r} range [{layer.start}, {layer.end}) is not contiguous")
            if layer.kind not in ("conv", "fc"):
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            pos = layer.end
        flags = [layer.is_classifier for layer in self.layers]
        if sum(flags) != 1 or not flags[-1]:
            raise ValueError("exactly one classifier layer is required and it must be last")
        if len({layer.name for layer in self.layers}) != len(self.layers):
            raise ValueError("layer names must be unique")

    @property
    def total_params(self) -> int:
        return self.layers[-1].end

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def classifier(self) -> Layer:
        return self.layers[-1]

    def __getitem__(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


class ParamVector:
    """Flat float64 parameters bound to a :class:`LayerLayout`."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: LayerLayout, *, check: bool = True):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != layout.total_params:
            raise ValueError(f"expected {layout.total_params} values, got shape {values.shape}")
        if check and not np.all(np.isfinite(values)):
            raise FloatingPointError("parameter vector contains non-finite entries")
        self.values = values
        self.layout = layout

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"ParamVector(n={len(self)}, layers={self.layout.names})"

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout, check=False)

    def layer(self, name: str) -> np.ndarray:
        layer = self.layout[name]
        return self.values[layer.start:layer.end]


def check_same_layout(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise ValueError("parameter vectors have different layouts")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int] = (1, 28, 28)
    conv_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 5
    pool: str = "max2x2"
    fc_widths: tuple[int, ...] = (64,)
    num_classes: int = 10
    _plan: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ValueError(f"input_shape must be (channels, height, width) > 0, got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.pool not in ("none", "max2x2"):
            raise ValueError(f"pool must be 'none' or 'max2x2', got {self.pool!r}")
        if any(c <= 0 for c in self.conv_channels) or any(w <= 0 for w in self.fc_widths):
            raise ValueError("layer widths must be positive")
        if self.conv_channels and self.kernel_size <= 0:
            raise ValueError("kernel_size must be positive")
        object.__setattr__(self, "_plan", _plan_layers(self))

    @property
    def layout(self) -> LayerLayout:
        return _layout(self)

    @property
    def total_params(self) -> int:
        return self.layout.total_params


def _plan_layers(spec: ModelSpec) -> tuple:
    """Per layer: (name, kind, weight_shape, in_hw, out_hw).  Validates spatial sizes."""
    c, h, w = spec.input_shape
    k = spec.kernel_size
    plan = []
    for i, out_c in enumerate(spec.conv_channels, start=1):
        ho, wo = h - k + 1, w - k + 1
        if ho <= 0 or wo <= 0:
            raise ValueError(f"conv{i}: kernel {k} does not fit input {h}x{w}")
        plan.append((f"conv{i}", "conv", (out_c, c, k, k), (h, w), (ho, wo)))
        c, h, w = out_c, ho, wo
        if spec.pool == "max2x2":
            h, w = h // 2, w // 2
            if h == 0 or w == 0:
                raise ValueError(f"conv{i}: pooling reduces {ho}x{wo} to zero size")
    n_in = c * h * w
    for i, width in enumerate(spec.fc_widths, start=1):
        plan.append((f"fc{i}", "fc", (width, n_in), None, None))
        n_in = width
    plan.append(("classifier", "fc", (spec.num_classes, n_in), None, None))
    return tuple(plan)


@lru_cache(maxsize=64)
def _layout(spec: ModelSpec) -> LayerLayout:
    layers = []
    pos = 0
    for idx, (name, kind, wshape, _, _) in enumerate(spec._plan):
        n = math.prod(wshape) + wshape[0]
        layers.append(Layer(name, pos, pos + n, kind, idx == len(spec._plan) - 1))
        pos += n
    return LayerLayout(tuple(layers))


def _unpack(values: np.ndarray, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for layer, (_, _, wshape, _, _) in zip(spec.layout, spec._plan):
        nw = math.prod(wshape)
        seg = values[layer.start:layer.end]
        out.append((seg[:nw].reshape(wshape), seg[nw:]))
    return out


def init_params(spec: ModelSpec, seed: RngSeed) -> ParamVector:
    """Fan-in scaled uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
    rng = derive(seed, "init")
    values = np.zeros(spec.total_params)
    for layer, (_, _, wshape, _, _) in zip(spec.layout, spec._plan):
        fan_in = math.prod(wshape[1:])
        bound = math.sqrt(6.0 / fan_in)
        nw = math.prod(wshape)
        values[layer.start:layer.start + nw] = rng.uniform(-bound, bound, size=nw)
    return ParamVector(values, spec.layout)


def _as_batch(spec: ModelSpec, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match input shape {spec.input_shape}")
    return x


def _conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    n = x.shape[0]
    o, c, k, _ = W.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    z = cols @ W.reshape(o, -1).T + b
    return z.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def _conv_backward(dz: np.ndarray, cols: np.ndarray, W: np.ndarray, in_shape, need_dx: bool):
    n, o, ho, wo = dz.shape
    _, c, k, _ = W.shape
    dz2 = dz.transpose(0, 2, 3, 1).reshape(-1, o)
    dW = (dz2.T @ cols).reshape(W.shape)
    db = dz2.sum(axis=0)
    if not need_dx:
        return dW, db, None
    dcols = (dz2 @ W.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, c) + tuple(in_shape))
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dW, db, dx


def _pool_forward(a: np.ndarray):
    n, c, h, w = a.shape
    h2, w2 = h // 2, w // 2
    win = a[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)  # first max on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout: np.ndarray, arg: np.ndarray, in_shape):
    n, c, h2, w2 = dout.shape
    dwin = (np.arange(4) == arg[..., None]) * dout[..., None]
    dwin = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    h, w = in_shape
    if (h, w) == (2 * h2, 2 * w2):
        return dwin
    da = np.zeros((n, c, h, w))
    da[:, :, :2 * h2, :2 * w2] = dwin
    return da


def _forward(values: np.ndarray, spec: ModelSpec, x: np.ndarray, keep: bool):
    params = _unpack(values, spec)
    cache = []
    a = x
    for (W, b), (name, kind, _, _, _) in zip(params, spec._plan):
        if kind == "conv":
            z, cols = _conv_forward(a, W, b)
            r = np.maximum(z, 0.0)
            if spec.pool == "max2x2":
                out, arg = _pool_forward(r)
            else:
                out, arg = r, None
            if keep:
                cache.append((a.shape[2:], cols, z, arg))
            a = out
        else:
            if a.ndim > 2:
                if keep:
                    cache.append(("flatten", a.shape))
                a = a.reshape(a.shape[0], -1)
            z = a @ W.T + b
            if name == "classifier":
                if keep:
                    cache.append((a,))
                return z, cache, params
            if keep:
                cache.append((a, z))
            a = np.maximum(z, 0.0)
    raise AssertionError("plan has no classifier")


def forward(params: ParamVector, spec: ModelSpec, batch) -> np.ndarray:
    """Logits of shape (batch_size, num_classes)."""
    if params.layout != spec.layout:
        raise ValueError("parameter layout does not match model spec")
    x = _as_batch(spec, batch)
    logits, _, _ = _forward(params.values, spec, x, keep=False)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(spec: ModelSpec, labels, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if n == 0:
        raise ValueError("empty batch")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return y


def loss_and_grad(params: ParamVector, spec: ModelSpec, batch, labels) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    if params.layout != spec.layout:
        raise ValueError("parameter layout does not match model spec")
    x = _as_batch(spec, batch)
    y = _check_labels(spec, labels, x.shape[0])
    n = x.shape[0]
    logits, cache, weights = _forward(params.values, spec, x, keep=True)

    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), y]))

    dz = softmax(logits)
    dz[np.arange(n), y] -= 1.0
    dz /= n

    grad = np.empty_like(params.values)
    layers = spec.layout.layers
    li = len(layers) - 1
    ci = len(cache) - 1
    da = None
    while li >= 0:
        W, _ = weights[li]
        layer = layers[li]
        entry = cache[ci]
        if spec._plan[li][1] == "fc":
            if layer.is_classifier:
                (a_prev,) = entry
            else:
                a_prev, z = entry
                dz = da * (z > 0)
            dW = dz.T @ a_prev
            db = dz.sum(axis=0)
            da = dz @ W if li > 0 else None
            ci -= 1
            if li > 0 and isinstance(cache[ci][0], str):
                da = da.reshape(cache[ci][1])
                ci -= 1
        else:
            in_hw, cols, z, arg = entry
            if arg is not None:
                dr = _pool_backward(da, arg, z.shape[2:])
            else:
                dr = da
            dz = dr * (z > 0)
            dW, db, da = _conv_backward(dz, cols, W, in_hw, need_dx=li > 0)
            ci -= 1
        nw = dW.size
        grad[layer.start:layer.start + nw] = dW.ravel()
        grad[layer.start + nw:layer.end] = db
        li -= 1
    return loss, ParamVector(grad, params.layout)


def sgd_step(params: ParamVector, grad: ParamVector, eta: float) -> ParamVector:
    check_same_layout(params, grad)
    if not eta > 0:
        raise ValueError("eta must be positive")
    return ParamVector(params.values - eta * grad.values, params.layout)


def train_epochs(params: ParamVector, spec: ModelSpec, x: np.ndarray, y: np.ndarray, eta: float,
                 epochs: int, batch_size: int, rng: RngSeed | np.random.Generator) -> tuple[ParamVector, float]:
    """Mini-batch SGD; returns the trained parameters and the mean mini-batch loss (nan if no steps)."""
    n = len(y)
    if n == 0:
        raise ValueError("empty dataset")
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    if not eta > 0:
        raise ValueError("eta must be positive")
    gen = as_generator(rng, "train")
    current = params
    losses = []
    for _ in range(epochs):
        # a single full batch needs no shuffling; keeps it bitwise equal to one sgd_step
        order = np.arange(n) if batch_size >= n else gen.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = loss_and_grad(current, spec, x[idx], y[idx])
            current = sgd_step(current, grad, eta)
            losses.append(loss)
    return current, float(np.mean(losses)) if losses else float("nan")


def local_train(params: ParamVector, spec: ModelSpec, x: np.ndarray, y: np.ndarray, eta: float,
                epochs: int, batch_size: int, rng: RngSeed | np.random.Generator) -> ParamVector:
    return train_epochs(params, spec, x, y, eta, epochs, batch_size, rng)[0]


def predict(params: ParamVector, spec: ModelSpec, batch) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(forward(params, spec, batch), axis=1)
