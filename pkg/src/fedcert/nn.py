"""Dense / conv / ReLU network engine on float64 numpy arrays.

Everything here is deterministic by construction: parameters are plain
read-only arrays, training is minibatch SGD whose only randomness comes
from explicit integer seeds, and models round-trip bitwise through the
on-disk format.  No framework is used so that the abstract interpreter
in `zonotope` can share the exact same layer semantics.

Conventions:
  * inputs are float64, single example shaped `input_shape` or batched
    with a leading axis;
  * Dense layers flatten whatever trailing shape they receive (row-major);
  * Conv2D uses valid padding, stride (row_step, col_step) >= 1;
  * the final layer must emit exactly `num_classes` logits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError, InputError, NumericError

MODEL_FORMAT = "fedcert-model"
MODEL_FORMAT_VERSION = 1


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _freeze(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, order="C", copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True, eq=False)
class Dense:
    W: np.ndarray  # (out_features, in_features)
    b: np.ndarray  # (out_features,)

    def __post_init__(self):
        W = _freeze(self.W)
        b = _freeze(self.b)
        if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
            raise InputError(f"dense shapes inconsistent: W {W.shape}, b {b.shape}")
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise NumericError("dense parameters must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True, eq=False)
class Conv2D:
    kernel: np.ndarray  # (filters, in_channels, k_rows, k_cols)
    bias: np.ndarray  # (filters,)
    stride: tuple[int, int] = (1, 1)  # (row step, col step)

    def __post_init__(self):
        k = _freeze(self.kernel)
        b = _freeze(self.bias)
        stride = (int(self.stride[0]), int(self.stride[1]))
        if k.ndim != 4 or b.ndim != 1 or k.shape[0] != b.shape[0]:
            raise InputError(f"conv shapes inconsistent: kernel {k.shape}, bias {b.shape}")
        if stride[0] < 1 or stride[1] < 1:
            raise ConfigError(f"conv stride must be >= 1, got {stride}")
        if not (np.isfinite(k).all() and np.isfinite(b).all()):
            raise NumericError("conv parameters must be finite")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", stride)


@dataclass(frozen=True)
class ReLU:
    pass


def _shape_after(layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        flat = int(np.prod(shape))
        if layer.W.shape[1] != flat:
            raise InputError(
                f"dense expects {layer.W.shape[1]} inputs, got shape {shape} ({flat})"
            )
        return (layer.W.shape[0],)
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise InputError(f"conv needs (channels, rows, cols) input, got {shape}")
        c, h, w = shape
        f, cin, kh, kw = layer.kernel.shape
        if cin != c:
            raise InputError(f"conv expects {cin} channels, got {c}")
        if h < kh or w < kw:
            raise InputError(f"conv kernel {kh}x{kw} larger than input {h}x{w}")
        sh, sw = layer.stride
        return (f, (h - kh) // sh + 1, (w - kw) // sw + 1)
    if isinstance(layer, ReLU):
        return shape
    raise InputError(f"unknown layer type {type(layer).__name__}")


@dataclass(frozen=True, eq=False)
class Model:
    layers: tuple
    num_classes: int
    input_shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(_shape_after(layer, shapes[-1]))
        out = shapes[-1]
        if len(out) != 1 or out[0] != self.num_classes:
            raise InputError(f"model emits shape {out}, expected ({self.num_classes},)")
        # cached so the abstract interpreter knows each conv's spatial input
        object.__setattr__(self, "layer_input_shapes", tuple(shapes[:-1]))


# ---------------------------------------------------------------------------
# forward / backward


def _conv_forward(x, kernel, bias, stride):
    # x (B, C, H, W) -> (B, F, Ho, Wo), valid padding
    sh, sw = stride
    kh, kw = kernel.shape[2:]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, :, :]
    out = np.einsum("bchwij,fcij->bfhw", win, kernel, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def _conv_backward(x, kernel, stride, dout):
    # returns (dkernel, dbias, dx) for the valid-padding forward above
    sh, sw = stride
    kh, kw = kernel.shape[2:]
    ho, wo = dout.shape[2:]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, :, :]
    dkernel = np.einsum("bchwij,bfhw->fcij", win, dout, optimize=True)
    dbias = dout.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            t = np.einsum("bfhw,fc->bchw", dout, kernel[:, :, i, j], optimize=True)
            dx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += t
    return dkernel, dbias, dx


def _apply_layer(layer, h):
    if isinstance(layer, Dense):
        flat = h.reshape(h.shape[0], -1)
        return flat @ layer.W.T + layer.b
    if isinstance(layer, Conv2D):
        return _conv_forward(h, layer.kernel, layer.bias, layer.stride)
    return np.maximum(h, 0.0)


@dataclass
class _Cache:
    inputs: list
    squeeze: bool


def forward_cache(model: Model, x) -> tuple[np.ndarray, _Cache]:
    """Forward pass keeping per-layer inputs for a later backward pass."""
    x = _f64(x)
    squeeze = x.shape == model.input_shape
    xb = x[None] if squeeze else x
    if xb.ndim != len(model.input_shape) + 1 or xb.shape[1:] != model.input_shape:
        raise InputError(f"input shape {x.shape} incompatible with {model.input_shape}")
    if xb.size and not np.isfinite(xb).all():
        raise NumericError("non-finite input to forward")
    inputs = []
    h = xb
    for layer in model.layers:
        inputs.append(h)
        h = _apply_layer(layer, h)
    return h, _Cache(inputs=inputs, squeeze=squeeze)


def forward(model: Model, x) -> np.ndarray:
    """Logits for a single input (shape `input_shape`) or a batch of them."""
    logits, cache = forward_cache(model, x)
    return logits[0] if cache.squeeze else logits


def predict(model: Model, x) -> np.ndarray:
    logits = forward(model, x)
    return np.argmax(logits, axis=-1)


def accuracy(model: Model, data, batch: int = 1024) -> float:
    xs, ys = dataset_arrays(data)
    if xs.shape[0] == 0:
        raise ConfigError("accuracy over an empty dataset")
    hits = 0
    for s in range(0, xs.shape[0], batch):
        hits += int(np.sum(predict(model, xs[s : s + batch]) == ys[s : s + batch]))
    return hits / xs.shape[0]


def backprop(model: Model, cache: _Cache, dlogits, *, want_params: bool = True,
             want_input: bool = True):
    """Propagate a logit gradient back through the cached forward pass.

    Returns (param_grads, input_grad); param_grads is aligned with
    model.layers, None for parameterless layers, else a dict keyed by the
    layer's field names.
    """
    g = _f64(dlogits)
    param_grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        inp = cache.inputs[i]
        if isinstance(layer, Dense):
            flat = inp.reshape(inp.shape[0], -1)
            if want_params:
                param_grads[i] = {"W": g.T @ flat, "b": g.sum(axis=0)}
            if want_input or i > 0:
                g = (g @ layer.W).reshape(inp.shape)
        elif isinstance(layer, Conv2D):
            dk, db, dx = _conv_backward(inp, layer.kernel, layer.stride, g)
            if want_params:
                param_grads[i] = {"kernel": dk, "bias": db}
            g = dx
        else:
            g = g * (inp > 0)
    input_grad = g if want_input else None
    return param_grads, input_grad


# ---------------------------------------------------------------------------
# losses


def softmax_t(logits, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax with max-subtraction.

    At extreme scale ratios individual components may underflow to 0.0;
    rows still sum to 1 within 1e-12.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = _f64(logits)
    if z.size and not np.isfinite(z).all():
        raise NumericError("non-finite logits in softmax")
    z = z / float(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch_targets(y, num_classes: int):
    """Returns (soft_targets or None, hard_labels or None), batched."""
    y = np.asarray(y)
    if y.ndim >= 1 and np.issubdtype(y.dtype, np.floating):
        t = _f64(y)
        if t.ndim == 1:
            t = t[None]
        if t.shape[-1] != num_classes:
            raise InputError(f"soft targets have {t.shape[-1]} classes, model has {num_classes}")
        return t, None
    labels = y.astype(np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels outside [0, {num_classes})")
    return None, labels


def cross_entropy_t(logits, y, temperature: float = 1.0) -> float:
    """Mean cross-entropy of softmax_t(logits, T) against hard or soft targets.

    Computed in log-space so saturated rows do not produce log(0).
    """
    z = _f64(logits)
    if z.ndim == 1:
        z = z[None]
    soft, hard = _as_batch_targets(y, z.shape[-1])
    zt = z / float(temperature)
    m = zt.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(zt - m).sum(axis=-1, keepdims=True)))[:, 0]
    if hard is not None:
        picked = zt[np.arange(zt.shape[0]), hard]
    else:
        picked = (soft * zt).sum(axis=-1)
    return float(np.mean(lse - picked))


def loss_grad_logits(logits, y, temperature: float = 1.0) -> np.ndarray:
    """Gradient of mean cross_entropy_t w.r.t. the logits."""
    z = _f64(logits)
    if z.ndim == 1:
        z = z[None]
    soft, hard = _as_batch_targets(y, z.shape[-1])
    p = softmax_t(z, temperature)
    if hard is not None:
        t = np.zeros_like(p)
        t[np.arange(p.shape[0]), hard] = 1.0
    else:
        t = soft
    return (p - t) / (float(temperature) * p.shape[0])


@dataclass
class Gradients:
    loss: float
    param_grads: list
    input_grad: np.ndarray


def backward(model: Model, x, y, temperature: float = 1.0) -> Gradients:
    """Loss, parameter gradients and input gradient in one pass.

    `y` may be integer labels or rows of soft targets.
    """
    logits, cache = forward_cache(model, x)
    loss = cross_entropy_t(logits, y, temperature)
    dl = loss_grad_logits(logits, y, temperature)
    pg, dx = backprop(model, cache, dl)
    if cache.squeeze:
        dx = dx[0]
    return Gradients(loss=loss, param_grads=pg, input_grad=dx)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    rng_seed: int
    temperature: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")


def dataset_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "images") and hasattr(data, "labels"):
        return data.images, data.labels
    xs, ys = data
    return _f64(xs), np.asarray(ys)


def _sgd_step(model: Model, param_grads, lr: float) -> Model:
    new_layers = []
    for layer, g in zip(model.layers, param_grads):
        if g is None:
            new_layers.append(layer)
        else:
            updates = {k: getattr(layer, k) - lr * v for k, v in g.items()}
            new_layers.append(replace(layer, **updates))
    return Model(tuple(new_layers), model.num_classes, model.input_shape)


def train(model: Model, data, cfg: TrainConfig, *, batch_transform=None) -> Model:
    """Plain minibatch SGD; shuffling comes only from cfg.rng_seed.

    `batch_transform(current_model, xb, yb) -> (xb, yb)` lets callers
    swap each batch before the gradient step (adversarial training,
    poisoning).  With epochs == 0 the model is returned unchanged.
    """
    xs, ys = dataset_arrays(data)
    n = xs.shape[0]
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.rng_seed)
    cur = model
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            xb, yb = xs[idx], ys[idx]
            if batch_transform is not None:
                xb, yb = batch_transform(cur, xb, yb)
            g = backward(cur, xb, yb, temperature=cfg.temperature)
            cur = _sgd_step(cur, g.param_grads, cfg.learning_rate)
    return cur


# ---------------------------------------------------------------------------
# parameter vector / serialization


def _param_items(layer):
    if isinstance(layer, Dense):
        return [("W", layer.W), ("b", layer.b)]
    if isinstance(layer, Conv2D):
        return [("kernel", layer.kernel), ("bias", layer.bias)]
    return []


def param_count(model: Model) -> int:
    return sum(int(a.size) for layer in model.layers for _, a in _param_items(layer))


def flatten_params(model: Model) -> np.ndarray:
    """Layer order, weights row-major then bias, as one float64 vector."""
    parts = [a.ravel() for layer in model.layers for _, a in _param_items(layer)]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def load_params(model: Model, vector) -> Model:
    """New model with the same architecture and parameters from `vector`."""
    vec = _f64(vector).ravel()
    expected = param_count(model)
    if vec.shape[0] != expected:
        raise InputError(f"parameter vector has {vec.shape[0]} entries, expected {expected}")
    if vec.size and not np.isfinite(vec).all():
        raise NumericError("parameter vector must be finite")
    pos = 0
    new_layers = []
    for layer in model.layers:
        items = _param_items(layer)
        if not items:
            new_layers.append(layer)
            continue
        updates = {}
        for name, a in items:
            chunk = vec[pos : pos + a.size]
            pos += a.size
            updates[name] = chunk.reshape(a.shape)
        new_layers.append(replace(layer, **updates))
    return Model(tuple(new_layers), model.num_classes, model.input_shape)


def _layer_meta(layer) -> dict:
    if isinstance(layer, Dense):
        return {"kind": "dense", "out": layer.W.shape[0], "in": layer.W.shape[1]}
    if isinstance(layer, Conv2D):
        f, c, kh, kw = layer.kernel.shape
        return {"kind": "conv2d", "filters": f, "in_channels": c,
                "k_rows": kh, "k_cols": kw, "stride": list(layer.stride)}
    return {"kind": "relu"}


def model_meta(model: Model) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "layers": [_layer_meta(l) for l in model.layers],
    }


def model_hash(model: Model) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(model_meta(model), sort_keys=True).encode())
    h.update(b"|")
    h.update(np.ascontiguousarray(flatten_params(model)).tobytes())
    return h.hexdigest()


def save_model(model: Model, path) -> None:
    meta = json.dumps(model_meta(model)).encode()
    arrays = {"__meta__": np.frombuffer(meta, dtype=np.uint8)}
    for i, layer in enumerate(model.layers):
        for name, a in _param_items(layer):
            arrays[f"p{i}_{name}"] = a
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _layer_from_meta(m: dict, arrays, idx: int):
    kind = m.get("kind")
    if kind == "dense":
        return Dense(W=arrays[f"p{idx}_W"], b=arrays[f"p{idx}_b"])
    if kind == "conv2d":
        return Conv2D(kernel=arrays[f"p{idx}_kernel"], bias=arrays[f"p{idx}_bias"],
                      stride=tuple(m["stride"]))
    if kind == "relu":
        return ReLU()
    raise FormatError(f"unknown layer kind {kind!r} in model file")


def load_model(path) -> Model:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read model file {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise FormatError(f"{path} is not a {MODEL_FORMAT} file")
    try:
        meta = json.loads(arrays["__meta__"].tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt model metadata in {path}") from exc
    if meta.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path} is not a {MODEL_FORMAT} file")
    if meta.get("version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {meta.get('version')}")
    try:
        layers = tuple(_layer_from_meta(m, arrays, i) for i, m in enumerate(meta["layers"]))
        return Model(layers, int(meta["num_classes"]), tuple(meta["input_shape"]))
    except KeyError as exc:
        raise FormatError(f"model file {path} is missing {exc}") from exc


# ---------------------------------------------------------------------------
# initialization and presets


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_dense(rng, out_features, in_features):
    return Dense(W=_glorot(rng, (out_features, in_features), in_features, out_features),
                 b=np.zeros(out_features))


def _init_conv(rng, filters, in_channels, k, stride):
    kh, kw = k
    fan_in = in_channels * kh * kw
    fan_out = filters * kh * kw
    return Conv2D(kernel=_glorot(rng, (filters, in_channels, kh, kw), fan_in, fan_out),
                  bias=np.zeros(filters), stride=stride)


def reinitialized(model: Model, seed: int) -> Model:
    """Same architecture, fresh per-layer seeded init, zero biases."""
    ss = np.random.SeedSequence(seed)
    children = iter(ss.spawn(sum(1 for l in model.layers if _param_items(l))))
    new_layers = []
    for layer in model.layers:
        if isinstance(layer, Dense):
            rng = np.random.default_rng(next(children))
            new_layers.append(_init_dense(rng, layer.W.shape[0], layer.W.shape[1]))
        elif isinstance(layer, Conv2D):
            rng = np.random.default_rng(next(children))
            f, c, kh, kw = layer.kernel.shape
            new_layers.append(_init_conv(rng, f, c, (kh, kw), layer.stride))
        else:
            new_layers.append(layer)
    return Model(tuple(new_layers), model.num_classes, model.input_shape)


def _build_mlp(rngs, input_shape, widths, num_classes):
    dims = [int(np.prod(input_shape))] + list(widths)
    layers = []
    for i in range(len(widths)):
        layers.append(_init_dense(next(rngs), dims[i + 1], dims[i]))
        layers.append(ReLU())
    layers.append(_init_dense(next(rngs), num_classes, dims[-1]))
    return layers


def make_model(name: str, *, seed: int, num_classes: int | None = None,
               input_shape: tuple[int, ...] | None = None) -> Model:
    """Named architecture with seeded Glorot-uniform init.

    Presets: desk_mlp (small net for fast experiments), mnist_app_d and
    cifar_app_d (the two image architectures used in the larger runs).
    """
    ss = np.random.SeedSequence(seed)
    rngs = iter(np.random.default_rng(c) for c in ss.spawn(16))
    if name == "desk_mlp":
        shape = input_shape or (1, 8, 8)
        classes = num_classes or 10
        layers = _build_mlp(rngs, shape, [32, 16], classes)
        return Model(tuple(layers), classes, shape)
    if name == "mnist_app_d":
        shape = input_shape or (1, 28, 28)
        classes = num_classes or 10
        layers = [
            _init_conv(next(rngs), 16, shape[0], (4, 4), (2, 2)), ReLU(),
            _init_conv(next(rngs), 32, 16, (4, 4), (2, 2)), ReLU(),
        ]
        flat = _flat_after(layers, shape)
        layers += [_init_dense(next(rngs), 1000, flat), ReLU(),
                   _init_dense(next(rngs), classes, 1000)]
        return Model(tuple(layers), classes, shape)
    if name == "cifar_app_d":
        shape = input_shape or (3, 32, 32)
        classes = num_classes or 10
        layers = [
            _init_conv(next(rngs), 32, shape[0], (3, 3), (1, 1)), ReLU(),
            _init_conv(next(rngs), 64, 32, (4, 4), (2, 2)), ReLU(),
            _init_conv(next(rngs), 64, 64, (3, 3), (1, 1)), ReLU(),
            _init_conv(next(rngs), 128, 64, (4, 4), (2, 2)), ReLU(),
        ]
        flat = _flat_after(layers, shape)
        layers += [_init_dense(next(rngs), 512, flat), ReLU(),
                   _init_dense(next(rngs), 512, 512), ReLU(),
                   _init_dense(next(rngs), classes, 512)]
        return Model(tuple(layers), classes, shape)
    raise ConfigError(f"unknown model preset {name!r}")


def _flat_after(layers, input_shape) -> int:
    shape = input_shape
    for layer in layers:
        shape = _shape_after(layer, shape)
    return int(np.prod(shape))
