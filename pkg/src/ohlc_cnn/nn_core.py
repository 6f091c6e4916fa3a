"""From-scratch 1-D CNN engine: layers, activations, forward pass, backprop.

The network topology is fixed (three "same"-padded convolutions with
max-pooling after the second and third, two dense layers, a single sigmoid
output unit) but every width is configurable, so the same code runs both the
full 32/64/128 + 128/256 stack and tiny models for gradient verification.

Arrays are float64 throughout. Feature maps are (channels, length); the batch
kernels add a leading batch axis. The per-sample operations are thin wrappers
over the batch kernels, so there is exactly one arithmetic path.
"""

import io
import json
from dataclasses import dataclass

import numpy as np

RELU = "relu"
LEAKY_RELU = "leaky_relu"
SIGMOID = "sigmoid"
IDENTITY = "identity"

_ACTIVATIONS = (RELU, LEAKY_RELU, SIGMOID, IDENTITY)

CHECKPOINT_MAGIC = "ohlc-cnn/checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def activation_forward(x, kind: str, slope: float = 0.001):
    """Apply an activation elementwise. x may be a scalar or ndarray."""
    x = np.asarray(x, dtype=np.float64)
    if kind == RELU:
        return np.maximum(0.0, x)
    if kind == LEAKY_RELU:
        return np.where(x > 0.0, x, slope * x)
    if kind == SIGMOID:
        return 1.0 / (1.0 + np.exp(-x))
    if kind == IDENTITY:
        return x.copy()
    raise ValueError(f"unknown activation '{kind}'")


def activation_grad(x, kind: str, slope: float = 0.001):
    """Derivative of the activation w.r.t. its input, evaluated elementwise.

    At x == 0 the relu/leaky_relu subgradient takes the negative-branch value
    (0 and slope respectively).
    """
    x = np.asarray(x, dtype=np.float64)
    if kind == RELU:
        return (x > 0.0).astype(np.float64)
    if kind == LEAKY_RELU:
        return np.where(x > 0.0, 1.0, slope)
    if kind == SIGMOID:
        s = 1.0 / (1.0 + np.exp(-x))
        return s * (1.0 - s)
    if kind == IDENTITY:
        return np.ones_like(x)
    raise ValueError(f"unknown activation '{kind}'")


# ---------------------------------------------------------------------------
# layers and model
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    weights: np.ndarray      # (out_channels, in_channels, kernel_size)
    bias: np.ndarray         # (out_channels,)
    activation: str
    slope: float = 0.001

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ValueError(f"conv weights must be rank 3, got shape {self.weights.shape}")
        if self.weights.shape[2] % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel size")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


@dataclass
class DenseLayer:
    weights: np.ndarray      # (out_units, in_units)
    bias: np.ndarray         # (out_units,)
    activation: str
    slope: float = 0.001

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError(f"dense weights must be rank 2, got shape {self.weights.shape}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def in_units(self) -> int:
        return self.weights.shape[1]

    @property
    def out_units(self) -> int:
        return self.weights.shape[0]


@dataclass
class ModelConfig:
    in_channels: int = 4
    window_len: int = 32
    conv_filters: tuple = (32, 64, 128)
    dense_units: tuple = (128, 256)
    kernel_size: int = 3
    pool_size: int = 2
    leaky_slope: float = 0.001
    dropout_rate: float = 0.5
    conv_activations: tuple = (RELU, LEAKY_RELU, LEAKY_RELU)
    dense_activations: tuple = (LEAKY_RELU, LEAKY_RELU)
    output_activation: str = SIGMOID

    def validate(self) -> None:
        if self.in_channels < 1 or self.window_len < 1:
            raise ValueError("in_channels and window_len must be >= 1")
        if len(self.conv_filters) != 3 or any(f < 1 for f in self.conv_filters):
            raise ValueError(f"need three positive conv filter counts, got {self.conv_filters}")
        if len(self.dense_units) != 2 or any(u < 1 for u in self.dense_units):
            raise ValueError(f"need two positive dense widths, got {self.dense_units}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.flat_len() < 1:
            raise ValueError(
                f"window_len {self.window_len} collapses to nothing after two "
                f"size-{self.pool_size} poolings"
            )

    def pooled_len(self) -> int:
        # "same" convolutions preserve length; each pool floors it by pool_size
        return (self.window_len // self.pool_size) // self.pool_size

    def flat_len(self) -> int:
        return self.conv_filters[2] * self.pooled_len()

    def to_json(self) -> str:
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        for k in ("conv_filters", "dense_units", "conv_activations", "dense_activations"):
            d[k] = tuple(d[k])
        return cls(**d)


# ordered (name, getter) pairs defining the canonical parameter traversal
_PARAM_LAYERS = ("conv1", "conv2", "conv3", "dense1", "dense2", "output")


@dataclass
class Model:
    config: ModelConfig
    conv1: ConvLayer
    conv2: ConvLayer
    conv3: ConvLayer
    dense1: DenseLayer
    dense2: DenseLayer
    output: DenseLayer

    def parameters(self) -> list:
        """Weight and bias arrays in a fixed order (shared with gradients)."""
        out = []
        for name in _PARAM_LAYERS:
            layer = getattr(self, name)
            out.extend([layer.weights, layer.bias])
        return out

    def parameter_names(self) -> list:
        out = []
        for name in _PARAM_LAYERS:
            out.extend([f"{name}.weights", f"{name}.bias"])
        return out

    def set_parameters(self, values) -> None:
        own = self.parameters()
        if len(values) != len(own):
            raise ValueError(f"expected {len(own)} parameter arrays, got {len(values)}")
        for dst, src in zip(own, values):
            if dst.shape != src.shape:
                raise ValueError(f"parameter shape mismatch: {dst.shape} vs {src.shape}")
            dst[...] = src

    def copy(self) -> "Model":
        return Model(
            config=self.config,
            conv1=ConvLayer(self.conv1.weights.copy(), self.conv1.bias.copy(),
                            self.conv1.activation, self.conv1.slope),
            conv2=ConvLayer(self.conv2.weights.copy(), self.conv2.bias.copy(),
                            self.conv2.activation, self.conv2.slope),
            conv3=ConvLayer(self.conv3.weights.copy(), self.conv3.bias.copy(),
                            self.conv3.activation, self.conv3.slope),
            dense1=DenseLayer(self.dense1.weights.copy(), self.dense1.bias.copy(),
                              self.dense1.activation, self.dense1.slope),
            dense2=DenseLayer(self.dense2.weights.copy(), self.dense2.bias.copy(),
                              self.dense2.activation, self.dense2.slope),
            output=DenseLayer(self.output.weights.copy(), self.output.bias.copy(),
                              self.output.activation, self.output.slope),
        )


def init_model(config: ModelConfig, seed: int) -> Model:
    """Build a model with fan-in-scaled uniform weights and zero biases.

    Weights are drawn from U(-sqrt(6/fan_in), +sqrt(6/fan_in)); deterministic
    for a given seed.
    """
    config.validate()
    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    k = config.kernel_size
    f1, f2, f3 = config.conv_filters
    u1, u2 = config.dense_units
    slope = config.leaky_slope
    a1, a2, a3 = config.conv_activations
    d1, d2 = config.dense_activations

    conv1 = ConvLayer(uniform(config.in_channels * k, (f1, config.in_channels, k)),
                      np.zeros(f1), a1, slope)
    conv2 = ConvLayer(uniform(f1 * k, (f2, f1, k)), np.zeros(f2), a2, slope)
    conv3 = ConvLayer(uniform(f2 * k, (f3, f2, k)), np.zeros(f3), a3, slope)
    flat = config.flat_len()
    dense1 = DenseLayer(uniform(flat, (u1, flat)), np.zeros(u1), d1, slope)
    dense2 = DenseLayer(uniform(u1, (u2, u1)), np.zeros(u2), d2, slope)
    output = DenseLayer(uniform(u2, (1, u2)), np.zeros(1), config.output_activation, slope)
    return Model(config, conv1, conv2, conv3, dense1, dense2, output)


# ---------------------------------------------------------------------------
# batch kernels
# ---------------------------------------------------------------------------

def _conv_cols(x, kernel_size):
    # (n, c, length) -> zero-padded sliding patches (n, c, length, k)
    pad = kernel_size // 2
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    return np.lib.stride_tricks.sliding_window_view(x, kernel_size, axis=2)


def _conv_batch(x, layer: ConvLayer):
    if x.shape[1] != layer.in_channels:
        raise ValueError(
            f"conv expects {layer.in_channels} input channels, got {x.shape[1]}"
        )
    cols = _conv_cols(x, layer.kernel_size)
    z = np.tensordot(cols, layer.weights, axes=([1, 3], [1, 2]))   # (n, length, f)
    z = np.ascontiguousarray(z.transpose(0, 2, 1))
    z += layer.bias[None, :, None]
    return activation_forward(z, layer.activation, layer.slope), cols, z


def _conv_batch_backward(d_act, cols, z, layer: ConvLayer, need_dx=True):
    dz = d_act * activation_grad(z, layer.activation, layer.slope)
    db = dz.sum(axis=(0, 2))
    dw = np.tensordot(dz, cols, axes=([0, 2], [0, 2]))             # (f, c, k)
    dx = None
    if need_dx:
        n, c, length, k = cols.shape
        pad = layer.kernel_size // 2
        dcols = np.tensordot(dz, layer.weights, axes=([1], [0]))   # (n, length, c, k)
        dcols = dcols.transpose(0, 2, 1, 3)
        dxp = np.zeros((n, c, length + 2 * pad))
        for j in range(k):
            dxp[:, :, j:j + length] += dcols[:, :, :, j]
        dx = dxp[:, :, pad:pad + length] if pad else dxp
    return dx, dw, db


def _pool_batch(x, pool_size):
    n, c, length = x.shape
    if length < pool_size:
        raise ValueError(f"cannot pool length {length} with window {pool_size}")
    out_len = length // pool_size
    trimmed = x[:, :, :out_len * pool_size].reshape(n, c, out_len, pool_size)
    idx = trimmed.argmax(axis=3)
    out = np.take_along_axis(trimmed, idx[..., None], axis=3)[..., 0]
    return out, idx, length


def _pool_batch_backward(d_out, idx, in_length, pool_size):
    n, c, out_len = d_out.shape
    d_trim = np.zeros((n, c, out_len, pool_size))
    np.put_along_axis(d_trim, idx[..., None], d_out[..., None], axis=3)
    dx = np.zeros((n, c, in_length))
    dx[:, :, :out_len * pool_size] = d_trim.reshape(n, c, out_len * pool_size)
    return dx


def _dense_batch(x, layer: DenseLayer):
    if x.shape[1] != layer.in_units:
        raise ValueError(f"dense expects {layer.in_units} inputs, got {x.shape[1]}")
    z = x @ layer.weights.T + layer.bias
    return activation_forward(z, layer.activation, layer.slope), z


def _dense_batch_backward_from_dz(dz, x, layer: DenseLayer):
    # dz is the gradient at the pre-activation
    dw = dz.T @ x
    db = dz.sum(axis=0)
    dx = dz @ layer.weights
    return dx, dw, db


# ---------------------------------------------------------------------------
# per-sample operations
# ---------------------------------------------------------------------------

def _as_feature_map(x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"feature map must be rank 2 (channels, length), got shape {arr.shape}")
    return arr


def conv1d_forward(feature_map, layer: ConvLayer):
    """"Same"-padded stride-1 convolution plus the layer's activation."""
    x = _as_feature_map(feature_map)
    out, _, _ = _conv_batch(x[None], layer)
    return out[0]


def maxpool1d_forward(feature_map, pool_size: int = 2):
    """Non-overlapping max-pooling. Returns (pooled map, source indices).

    Output length is floor(length / pool_size); a trailing remainder is
    dropped. Indices point into the input map (first occurrence wins ties).
    """
    x = _as_feature_map(feature_map)
    out, idx, _ = _pool_batch(x[None], pool_size)
    offsets = np.arange(idx.shape[2]) * pool_size
    return out[0], idx[0] + offsets[None, :]


def dense_forward(vector, layer: DenseLayer):
    """activation(W @ x + b) for a 1-D input vector."""
    x = np.asarray(vector, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"dense_forward expects a vector, got shape {x.shape}")
    out, _ = _dense_batch(x[None], layer)
    return out[0]


def dropout_forward(vector, rate: float, mode: str = "train", rng=None):
    """Inverted dropout: zero units with probability `rate`, scale survivors.

    Inference mode is an exact identity, so no rescaling is ever needed at
    prediction time. Returns (output, keep-mask).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got '{mode}'")
    x = np.asarray(vector, dtype=np.float64)
    if mode == "infer" or rate == 0.0:
        return x.copy(), np.ones(x.shape, dtype=bool)
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate), keep


# ---------------------------------------------------------------------------
# whole-model forward / backward
# ---------------------------------------------------------------------------

def model_forward_batch(x, model: Model, mode: str = "infer", rng=None):
    """Run a (n, channels, length) batch through the network.

    Returns (probabilities (n,), cache). The cache stores every intermediate
    needed by model_backward_batch; in inference mode dropout is inactive and
    the cache records that.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got '{mode}'")
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected batch of shape (n, channels, length), got {x.shape}")
    if x.shape[1] != cfg.in_channels or x.shape[2] != cfg.window_len:
        raise ValueError(
            f"conv1 expects input ({cfg.in_channels} channels, {cfg.window_len} steps), "
            f"got ({x.shape[1]}, {x.shape[2]})"
        )
    n = x.shape[0]

    a1, cols1, z1 = _conv_batch(x, model.conv1)
    a2, cols2, z2 = _conv_batch(a1, model.conv2)
    p1, idx1, len1 = _pool_batch(a2, cfg.pool_size)
    a3, cols3, z3 = _conv_batch(p1, model.conv3)
    p2, idx2, len2 = _pool_batch(a3, cfg.pool_size)

    flat = p2.reshape(n, -1)
    h1, zd1 = _dense_batch(flat, model.dense1)

    if mode == "train" and cfg.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        keep = rng.random(h1.shape) >= cfg.dropout_rate
        dropped = h1 * keep / (1.0 - cfg.dropout_rate)
    else:
        keep = None
        dropped = h1

    h2, zd2 = _dense_batch(dropped, model.dense2)
    out, z_out = _dense_batch(h2, model.output)
    probs = out[:, 0]

    cache = {
        "mode": mode,
        "x": x,
        "cols1": cols1, "z1": z1,
        "cols2": cols2, "z2": z2,
        "idx1": idx1, "len1": len1,
        "cols3": cols3, "z3": z3,
        "idx2": idx2, "len2": len2,
        "pool2_shape": p2.shape,
        "flat": flat,
        "zd1": zd1,
        "keep": keep,
        "dropped": dropped,
        "zd2": zd2,
        "h2": h2,
        "probs": probs,
    }
    return probs, cache


def model_forward(sample, model: Model, mode: str = "infer", rng=None):
    """Single-sample forward pass. Returns (probability, cache)."""
    x = _as_feature_map(sample)
    probs, cache = model_forward_batch(x[None], model, mode=mode, rng=rng)
    return float(probs[0]), cache


def model_backward_from_delta(cache, delta, model: Model):
    """Backpropagate from a gradient at the output pre-activation.

    `delta` has one entry per sample in the cached batch. Returns gradient
    arrays in Model.parameters() order. Pooling routes gradient to the argmax
    positions only; the dropout mask from the forward pass is reapplied.
    """
    cfg = model.config
    probs = cache["probs"]
    delta = np.asarray(delta, dtype=np.float64).reshape(-1, 1)
    if delta.shape[0] != probs.shape[0]:
        raise ValueError(f"delta has {delta.shape[0]} entries for a batch of {probs.shape[0]}")

    d_h2, dw_out, db_out = _dense_batch_backward_from_dz(delta, cache["h2"], model.output)

    dz2 = d_h2 * activation_grad(cache["zd2"], model.dense2.activation, model.dense2.slope)
    d_dropped, dw_d2, db_d2 = _dense_batch_backward_from_dz(dz2, cache["dropped"], model.dense2)

    if cache["keep"] is not None:
        d_h1 = d_dropped * cache["keep"] / (1.0 - cfg.dropout_rate)
    else:
        d_h1 = d_dropped

    dz1 = d_h1 * activation_grad(cache["zd1"], model.dense1.activation, model.dense1.slope)
    d_flat, dw_d1, db_d1 = _dense_batch_backward_from_dz(dz1, cache["flat"], model.dense1)

    d_p2 = d_flat.reshape(cache["pool2_shape"])
    d_a3 = _pool_batch_backward(d_p2, cache["idx2"], cache["len2"], cfg.pool_size)
    d_p1, dw_c3, db_c3 = _conv_batch_backward(d_a3, cache["cols3"], cache["z3"], model.conv3)
    d_a2 = _pool_batch_backward(d_p1, cache["idx1"], cache["len1"], cfg.pool_size)
    d_a1, dw_c2, db_c2 = _conv_batch_backward(d_a2, cache["cols2"], cache["z2"], model.conv2)
    _, dw_c1, db_c1 = _conv_batch_backward(d_a1, cache["cols1"], cache["z1"], model.conv1,
                                           need_dx=False)

    return [dw_c1, db_c1, dw_c2, db_c2, dw_c3, db_c3,
            dw_d1, db_d1, dw_d2, db_d2, dw_out, db_out]


def model_backward_batch(cache, labels, model: Model):
    """Mean gradient of the cross-entropy loss over the cached batch.

    For a sigmoid output fed into binary cross-entropy, the gradient at the
    output pre-activation collapses to (p - y); dividing by the batch size
    here makes every returned array a batch mean.
    """
    if cache.get("mode") != "train":
        raise ValueError("backward needs a cache from a train-mode forward pass")
    probs = cache["probs"]
    y = np.asarray(labels, dtype=np.float64).ravel()
    if y.size != probs.size:
        raise ValueError(f"{y.size} labels for a batch of {probs.size}")
    delta = (probs - y) / y.size
    return model_backward_from_delta(cache, delta, model)


def model_backward(cache, label, model: Model):
    """Single-sample gradients of the cross-entropy loss (cache from model_forward)."""
    return model_backward_batch(cache, [label], model)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Model, extras: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write a versioned checkpoint with every parameter array by name.

    `extras` can carry additional named arrays (e.g. optimizer accumulators);
    `meta` is a JSON-serializable dict. The file round-trips bit-exactly and
    contains no timestamps, so identical models produce identical bytes.
    """
    payload = {
        "format_magic": np.str_(CHECKPOINT_MAGIC),
        "format_version": np.int64(CHECKPOINT_VERSION),
        "config_json": np.str_(model.config.to_json()),
        "meta_json": np.str_(json.dumps(meta or {}, sort_keys=True)),
    }
    for name, arr in zip(model.parameter_names(), model.parameters()):
        payload[f"param/{name}"] = arr
    for name, arr in (extras or {}).items():
        payload[f"extra/{name}"] = np.asarray(arr)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Load a checkpoint. Returns (model, meta, extras)."""
    with np.load(path, allow_pickle=False) as data:
        if "format_magic" not in data or str(data["format_magic"]) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_json(str(data["config_json"]))
        meta = json.loads(str(data["meta_json"]))
        model = init_model(config, seed=0)
        values = []
        for name in model.parameter_names():
            key = f"param/{name}"
            if key not in data:
                raise ValueError(f"checkpoint missing parameter '{name}'")
            values.append(data[key])
        model.set_parameters(values)
        extras = {k[len("extra/"):]: data[k] for k in data.files if k.startswith("extra/")}
    return model, meta, extras
