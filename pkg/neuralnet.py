"""
A small feed-forward network stack with hand-written backward passes.

Tensors are numpy arrays laid out (batch, height, width, channels) for image
activations and (batch, features) after flattening. Convolutions are
cross-correlations with same padding and stride 1. Parameters live in a flat
dict keyed ``L<layer index>.<role>``; the training code owns updates, the
functions here never modify parameters in place.

Reductions over the batch (bias gradients, batch statistics, losses) are
accumulated in float64 and cast back to the parameter dtype.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import InvalidArgument, InvalidState, ShapeError

logger = logging.getLogger("lawnarea")

MODES = ("train", "infer")
REGULARIZED_ROLES = ("kernel", "depthwise", "pointwise")
STAT_ROLES = ("running_mean", "running_var")
CONV_KINDS = ("conv", "sepconv")


# -------- Layer descriptions --------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    kind = "conv"


@dataclass(frozen=True)
class SepConv:
    out_channels: int
    kernel: int = 3
    kind = "sepconv"


@dataclass(frozen=True)
class BatchNorm:
    epsilon: float = 1e-5
    momentum: float = 0.9
    kind = "batchnorm"


@dataclass(frozen=True)
class Elu:
    alpha: float = 1.0
    kind = "elu"


@dataclass(frozen=True)
class MaxPool:
    kind = "maxpool"


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.3
    kind = "dropout"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Dense:
    out_features: int
    kind = "dense"


LAYER_TYPES = {
    cls.kind: cls
    for cls in (Conv, SepConv, BatchNorm, Elu, MaxPool, Dropout, Flatten, Dense)
}


@dataclass(frozen=True)
class ModelSpec:
    """Input shape (H, W, C), ordered layers and the L2 weight."""

    input_shape: tuple
    layers: tuple
    l2_lambda: float = 1e-4

    def validate(self):
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise InvalidArgument(f"input shape must be (H, W, C) >= 1, got {self.input_shape}")
        if self.l2_lambda < 0:
            raise InvalidArgument(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        for index, layer in enumerate(self.layers):
            _validate_layer(index, layer)
        final = output_shape(self)
        if final != (1,):
            raise ShapeError(f"model must end in one scalar per sample, ends in {final}")
        return self


def _validate_layer(index, layer):
    where = f"layer {index} ({layer.kind})"
    if isinstance(layer, (Conv, SepConv)):
        if layer.kernel < 1 or layer.kernel % 2 == 0:
            raise InvalidArgument(f"{where}: kernel must be odd, got {layer.kernel}")
        if layer.out_channels < 1:
            raise InvalidArgument(f"{where}: out_channels must be >= 1")
    elif isinstance(layer, BatchNorm):
        if not layer.epsilon > 0:
            raise InvalidArgument(f"{where}: epsilon must be > 0")
        if not 0 <= layer.momentum < 1:
            raise InvalidArgument(f"{where}: momentum must be within [0, 1)")
    elif isinstance(layer, Elu):
        if not layer.alpha > 0:
            raise InvalidArgument(f"{where}: alpha must be > 0")
    elif isinstance(layer, Dropout):
        if not 0 <= layer.rate < 1:
            raise InvalidArgument(f"{where}: rate must be within [0, 1), got {layer.rate}")
    elif isinstance(layer, Dense):
        if layer.out_features < 1:
            raise InvalidArgument(f"{where}: out_features must be >= 1")


def default_spec(height=128, width=128, channels=3, base_filters=32,
                 dropout_rate=0.3, l2_lambda=1e-4):
    """Six convolution layers (two plain, four separable) and three dense layers.

    Pooling follows every pair of convolutions; widths scale with
    ``base_filters`` (32 gives 32/64/128 filters and dense 256/64/1).
    """
    f = base_filters
    block = (BatchNorm(), Elu())
    layers = (
        Conv(f), *block, Conv(f), *block, MaxPool(),
        SepConv(2 * f), *block, SepConv(2 * f), *block, MaxPool(),
        SepConv(4 * f), *block, SepConv(4 * f), *block, MaxPool(),
        Flatten(),
        Dense(8 * f), Elu(), Dropout(dropout_rate),
        Dense(2 * f), Elu(),
        Dense(1),
    )
    return ModelSpec((height, width, channels), layers, l2_lambda).validate()


def spec_to_dict(spec):
    return {
        "input_shape": list(spec.input_shape),
        "l2_lambda": spec.l2_lambda,
        "layers": [{"type": layer.kind, **asdict(layer)} for layer in spec.layers],
    }


def spec_from_dict(data):
    try:
        layers = []
        for entry in data["layers"]:
            entry = dict(entry)
            kind = entry.pop("type")
            if kind not in LAYER_TYPES:
                raise InvalidArgument(f"unknown layer type {kind!r}")
            layers.append(LAYER_TYPES[kind](**entry))
        spec = ModelSpec(tuple(data["input_shape"]), tuple(layers), float(data["l2_lambda"]))
    except (KeyError, TypeError) as e:
        raise InvalidArgument(f"malformed model description: {e}") from e
    return spec.validate()


# -------- Shapes and parameters --------

def layer_shapes(spec):
    """Per-sample output shape of every layer, computed analytically."""
    shape = tuple(spec.input_shape)
    shapes = []
    for index, layer in enumerate(spec.layers):
        where = f"layer {index} ({layer.kind})"
        if isinstance(layer, (Conv, SepConv)):
            if len(shape) != 3:
                raise ShapeError(f"{where}: needs (H, W, C) input, got {shape}")
            shape = (shape[0], shape[1], layer.out_channels)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                raise ShapeError(f"{where}: needs even (H, W, C) input, got {shape}")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise ShapeError(f"{where}: needs flat input, got {shape}")
            shape = (layer.out_features,)
        shapes.append(shape)
    return shapes


def output_shape(spec):
    shapes = layer_shapes(spec)
    return shapes[-1] if shapes else tuple(spec.input_shape)


def parameter_shapes(spec):
    """Name -> shape for every tensor the spec owns, in layer order."""
    shapes = {}
    previous = tuple(spec.input_shape)
    for index, (layer, shape) in enumerate(zip(spec.layers, layer_shapes(spec))):
        prefix = f"L{index}."
        if isinstance(layer, Conv):
            shapes[prefix + "kernel"] = (layer.kernel, layer.kernel, previous[-1], layer.out_channels)
            shapes[prefix + "bias"] = (layer.out_channels,)
        elif isinstance(layer, SepConv):
            shapes[prefix + "depthwise"] = (layer.kernel, layer.kernel, previous[-1])
            shapes[prefix + "pointwise"] = (1, 1, previous[-1], layer.out_channels)
            shapes[prefix + "bias"] = (layer.out_channels,)
        elif isinstance(layer, BatchNorm):
            for role in ("gamma", "beta") + STAT_ROLES:
                shapes[prefix + role] = (previous[-1],)
        elif isinstance(layer, Dense):
            shapes[prefix + "kernel"] = (previous[-1], layer.out_features)
            shapes[prefix + "bias"] = (layer.out_features,)
        previous = shape
    return shapes


def role_of(name):
    return name.split(".", 1)[1]


def is_trainable(name):
    return role_of(name) not in STAT_ROLES


def parameter_count(spec, trainable_only=True):
    return sum(
        int(np.prod(shape))
        for name, shape in parameter_shapes(spec).items()
        if not trainable_only or is_trainable(name)
    )


def _fan_in(role, shape):
    if role == "depthwise":
        return shape[0] * shape[1]
    return int(np.prod(shape[:-1]))


def init_parameters(spec, seed):
    """He-uniform kernels, zero biases/beta/running_mean, unit gamma/running_var."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec).items():
        role = role_of(name)
        if role in REGULARIZED_ROLES:
            bound = math.sqrt(6.0 / _fan_in(role, shape))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif role in ("gamma", "running_var"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return params


# -------- Convolutions --------

def _require_rank(x, rank, what):
    if x.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {x.shape}")


def _sum_to(values, axes, dtype):
    return values.sum(axis=axes, dtype=np.float64).astype(dtype)


def _pad_spatial(x, radius):
    return np.pad(x, ((0, 0), (radius, radius), (radius, radius), (0, 0)))


def _windows(x, k):
    # (N, H, W, C, k, k) view over the zero-padded input
    return sliding_window_view(_pad_spatial(x, k // 2), (k, k), axis=(1, 2))


def conv2d_forward(x, kernel, bias):
    """Same-padded cross-correlation: x [N,H,W,Cin], kernel [k,k,Cin,Cout]."""
    _require_rank(x, 4, "conv2d input")
    _require_rank(kernel, 4, "conv2d kernel")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kernel.shape}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d input {x.shape} does not match kernel {kernel.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match kernel {kernel.shape}")
    out = np.tensordot(_windows(x, k), kernel.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    return out + bias


def conv2d_backward(dout, x, kernel, input_grad=True):
    """Returns (dx or None, dkernel, dbias)."""
    k = kernel.shape[0]
    dkernel = np.tensordot(_windows(x, k), dout, axes=([0, 1, 2], [0, 1, 2]))
    dkernel = dkernel.transpose(1, 2, 0, 3).astype(kernel.dtype)
    dbias = _sum_to(dout, (0, 1, 2), kernel.dtype)
    dx = None
    if input_grad:
        flipped = np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2))
        dx = conv2d_forward(dout, flipped, np.zeros(kernel.shape[2], dtype=kernel.dtype))
    return dx, dkernel, dbias


def _depthwise(x, depthwise):
    k = depthwise.shape[0]
    _, height, width, _ = x.shape
    padded = _pad_spatial(x, k // 2)
    out = np.zeros(x.shape, dtype=np.result_type(x, depthwise))
    for i in range(k):
        for j in range(k):
            out += padded[:, i:i + height, j:j + width, :] * depthwise[i, j]
    return out


def _depthwise_backward(dmid, x, depthwise):
    k = depthwise.shape[0]
    _, height, width, _ = x.shape
    padded = _pad_spatial(x, k // 2)
    ddepthwise = np.empty_like(depthwise)
    for i in range(k):
        for j in range(k):
            window = padded[:, i:i + height, j:j + width, :]
            ddepthwise[i, j] = _sum_to(window * dmid, (0, 1, 2), depthwise.dtype)
    dx = _depthwise(dmid, np.ascontiguousarray(depthwise[::-1, ::-1]))
    return dx, ddepthwise


def separable_conv2d_forward(x, depthwise, pointwise, bias):
    """Per-channel k x k correlation followed by 1 x 1 channel mixing."""
    _require_rank(x, 4, "separable conv input")
    _require_rank(depthwise, 3, "depthwise kernel")
    _require_rank(pointwise, 4, "pointwise kernel")
    k, k2, cin = depthwise.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"depthwise kernel must be square and odd, got {depthwise.shape}")
    if x.shape[3] != cin or pointwise.shape[:3] != (1, 1, cin):
        raise ShapeError(
            f"separable conv input {x.shape} does not match depthwise "
            f"{depthwise.shape} / pointwise {pointwise.shape}"
        )
    if bias.shape != (pointwise.shape[3],):
        raise ShapeError(f"separable conv bias {bias.shape} does not match pointwise {pointwise.shape}")
    return _depthwise(x, depthwise) @ pointwise[0, 0] + bias


def separable_conv2d_backward(dout, x, depthwise, pointwise):
    """Returns (dx, ddepthwise, dpointwise, dbias)."""
    mid = _depthwise(x, depthwise)
    mixing = pointwise[0, 0]
    dpointwise = np.tensordot(mid, dout, axes=([0, 1, 2], [0, 1, 2]))[None, None]
    dbias = _sum_to(dout, (0, 1, 2), pointwise.dtype)
    dx, ddepthwise = _depthwise_backward(dout @ mixing.T, x, depthwise)
    return dx, ddepthwise, dpointwise.astype(pointwise.dtype), dbias


# -------- Pointwise layers --------

def elu(x, alpha=1.0):
    if not alpha > 0:
        raise InvalidArgument(f"elu alpha must be > 0, got {alpha}")
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0))).astype(x.dtype, copy=False)


def elu_backward(dout, x, alpha=1.0):
    slope = np.where(x > 0, 1.0, alpha * np.exp(np.minimum(x, 0)))
    return (dout * slope).astype(dout.dtype, copy=False)


def batch_norm_forward(x, gamma, beta, mode, running_mean, running_var,
                       epsilon=1e-5, momentum=0.9):
    """Normalize per channel (last axis) over all other axes.

    Returns (y, cache). In train mode the cache also carries the updated
    ``running_mean`` and ``running_var``; the inputs are left untouched.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown mode {mode!r}")
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"batch norm input {x.shape} does not match gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise InvalidArgument("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = ((x - mean) * inv_std).astype(x.dtype)
    y = (gamma * xhat + beta).astype(x.dtype, copy=False)
    cache = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma}
    if mode == "train":
        cache["running_mean"] = (momentum * running_mean + (1 - momentum) * mean).astype(running_mean.dtype)
        cache["running_var"] = (momentum * running_var + (1 - momentum) * var).astype(running_var.dtype)
    return y, cache


def batch_norm_backward(dout, cache):
    """Train-mode gradient; returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    axes = tuple(range(dout.ndim - 1))
    count = dout.size // dout.shape[-1]
    dgamma = _sum_to(dout * xhat, axes, gamma.dtype)
    dbeta = _sum_to(dout, axes, gamma.dtype)
    dxhat = dout * gamma
    sum_dxhat = dxhat.sum(axis=axes, dtype=np.float64)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, dtype=np.float64)
    dx = (inv_std / count) * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx.astype(dout.dtype), dgamma, dbeta


def max_pool_forward(x):
    """2 x 2 max pooling, stride 2. Returns (y, argmax) with argmax in 0..3."""
    _require_rank(x, 4, "max pool input")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pool needs even height and width, got {x.shape}")
    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    windows = windows.reshape(n, h // 2, w // 2, c, 4)
    # argmax keeps the first maximum in scan order
    argmax = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return y, argmax


def max_pool_backward(dout, argmax):
    n, h2, w2, c = dout.shape
    grad = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(grad, argmax[..., None], dout[..., None], axis=-1)
    grad = grad.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return grad.reshape(n, h2 * 2, w2 * 2, c)


def dropout_forward(x, rate, seed, mode, layer_index=0, step=0):
    """Inverted dropout. Returns (y, mask); mask is None when nothing is dropped."""
    if not 0 <= rate < 1:
        raise InvalidArgument(f"dropout rate must be within [0, 1), got {rate}")
    if mode not in MODES:
        raise InvalidArgument(f"unknown mode {mode!r}")
    if mode == "infer" or rate == 0:
        return x, None
    rng = np.random.default_rng([seed, layer_index, step])
    keep = rng.random(x.shape) >= rate
    mask = (keep / (1.0 - rate)).astype(x.dtype)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def dense_forward(x, w, b):
    _require_rank(x, 2, "dense input")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense input {x.shape} does not match weights {w.shape} / bias {b.shape}")
    return x @ w + b


def dense_backward(dout, x, w):
    """Returns (dx, dw, db)."""
    return dout @ w.T, (x.T @ dout).astype(w.dtype), _sum_to(dout, (0,), w.dtype)


# -------- Loss and regularization --------

def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 * diff / diff.size).astype(pred.dtype)
    return loss, grad


def l2_penalty(params, l2_lambda):
    """lambda * sum of squared kernel weights; biases and batch norm excluded."""
    if l2_lambda < 0:
        raise InvalidArgument(f"l2 lambda must be >= 0, got {l2_lambda}")
    if l2_lambda == 0:
        return 0.0
    total = 0.0
    for name in sorted(params):
        if role_of(name) in REGULARIZED_ROLES:
            w = params[name].astype(np.float64)
            total += float(np.sum(w * w))
    return l2_lambda * total


def l2_gradient(params, l2_lambda):
    return {
        name: (2.0 * l2_lambda * value).astype(value.dtype)
        for name, value in params.items()
        if role_of(name) in REGULARIZED_ROLES
    }


# -------- Whole-model passes --------

@dataclass
class ForwardCache:
    """What model_backward needs, plus optional per-layer activations."""

    mode: str
    layers: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    stat_updates: dict = field(default_factory=dict)


def _layer_forward(index, layer, params, x, mode, seed, step):
    p = f"L{index}."
    if isinstance(layer, Conv):
        return conv2d_forward(x, params[p + "kernel"], params[p + "bias"]), {"x": x}
    if isinstance(layer, SepConv):
        out = separable_conv2d_forward(
            x, params[p + "depthwise"], params[p + "pointwise"], params[p + "bias"]
        )
        return out, {"x": x}
    if isinstance(layer, BatchNorm):
        return batch_norm_forward(
            x, params[p + "gamma"], params[p + "beta"], mode,
            params[p + "running_mean"], params[p + "running_var"],
            layer.epsilon, layer.momentum,
        )
    if isinstance(layer, Elu):
        return elu(x, layer.alpha), {"x": x}
    if isinstance(layer, MaxPool):
        out, argmax = max_pool_forward(x)
        return out, {"argmax": argmax}
    if isinstance(layer, Dropout):
        out, mask = dropout_forward(x, layer.rate, seed, mode, index, step)
        return out, {"mask": mask}
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), {"shape": x.shape}
    if isinstance(layer, Dense):
        return dense_forward(x, params[p + "kernel"], params[p + "bias"]), {"x": x}
    raise InvalidArgument(f"unsupported layer {layer!r}")


def model_forward(spec, params, x, mode="infer", seed=0, step=0, keep_activations=False):
    """Run every layer in order; returns (pred [N, 1], ForwardCache).

    Train mode records what backward needs. ``keep_activations`` stores each
    layer's output in ``cache.activations`` in either mode.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown mode {mode!r}")
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(
            f"input {x.shape} does not match model input (N, {', '.join(map(str, spec.input_shape))})"
        )
    cache = ForwardCache(mode=mode)
    out = x
    for index, layer in enumerate(spec.layers):
        try:
            out, entry = _layer_forward(index, layer, params, out, mode, seed, step)
        except InvalidArgument as e:
            raise type(e)(f"layer {index} ({layer.kind}): {e}") from e
        if mode == "train":
            cache.layers.append(entry)
            if isinstance(layer, BatchNorm):
                cache.stat_updates[f"L{index}.running_mean"] = entry.pop("running_mean")
                cache.stat_updates[f"L{index}.running_var"] = entry.pop("running_var")
        if keep_activations:
            cache.activations.append(out)
    return out, cache


def _layer_backward(index, layer, params, entry, d, grads):
    p = f"L{index}."
    if isinstance(layer, Conv):
        dx, grads[p + "kernel"], grads[p + "bias"] = conv2d_backward(
            d, entry["x"], params[p + "kernel"], input_grad=index > 0
        )
        return dx
    if isinstance(layer, SepConv):
        dx, grads[p + "depthwise"], grads[p + "pointwise"], grads[p + "bias"] = (
            separable_conv2d_backward(d, entry["x"], params[p + "depthwise"], params[p + "pointwise"])
        )
        return dx
    if isinstance(layer, BatchNorm):
        dx, grads[p + "gamma"], grads[p + "beta"] = batch_norm_backward(d, entry)
        return dx
    if isinstance(layer, Elu):
        return elu_backward(d, entry["x"], layer.alpha)
    if isinstance(layer, MaxPool):
        return max_pool_backward(d, entry["argmax"])
    if isinstance(layer, Dropout):
        return dropout_backward(d, entry["mask"])
    if isinstance(layer, Flatten):
        return d.reshape(entry["shape"])
    if isinstance(layer, Dense):
        dx, grads[p + "kernel"], grads[p + "bias"] = dense_backward(d, entry["x"], params[p + "kernel"])
        return dx
    raise InvalidArgument(f"unsupported layer {layer!r}")


def model_backward(spec, params, cache, dpred):
    """Gradients of every trainable parameter, L2 terms included."""
    if cache.mode != "train" or len(cache.layers) != len(spec.layers):
        raise InvalidState("model_backward needs the cache of a train-mode forward pass")
    grads = {}
    d = dpred
    for index in reversed(range(len(spec.layers))):
        d = _layer_backward(index, spec.layers[index], params, cache.layers[index], d, grads)
    for name, extra in l2_gradient(params, spec.l2_lambda).items():
        grads[name] = grads[name] + extra
    return grads


# -------- Activation dumps --------

def conv_layer_indices(spec):
    return [i for i, layer in enumerate(spec.layers) if layer.kind in CONV_KINDS]


def activation_name(spec, index):
    return f"act_L{index}_{spec.layers[index].kind}.pgm"


def tile_activations(activation, gap=1):
    """Min-max normalize each channel of an (H, W, C) map and tile into a grid."""
    height, width, channels = activation.shape
    cols = math.ceil(math.sqrt(channels))
    rows = math.ceil(channels / cols)
    grid = np.zeros((rows * (height + gap) - gap, cols * (width + gap) - gap), dtype=np.uint8)
    values = activation.astype(np.float64)
    for c in range(channels):
        plane = values[:, :, c]
        lo, hi = plane.min(), plane.max()
        scaled = np.zeros_like(plane) if hi == lo else (plane - lo) / (hi - lo) * 255.0
        r, q = divmod(c, cols)
        y0, x0 = r * (height + gap), q * (width + gap)
        grid[y0:y0 + height, x0:x0 + width] = np.floor(scaled + 0.5).astype(np.uint8)
    return grid[:, :, None]
