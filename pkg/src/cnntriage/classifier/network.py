"""VGG-style block network: topology description, parameters, forward pass,
exact backpropagation and plain SGD with per-block freezing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..dataset import BinaryLabel, ClassWeights
from . import layers as L
from .layers import ShapeError

CONV, MAXPOOL, FLATTEN, DENSE, SOFTMAX = "conv", "maxpool", "flatten", "dense", "softmax"
LAYER_KINDS = (CONV, MAXPOOL, FLATTEN, DENSE, SOFTMAX)
N_CLASSES = 2


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_size: int = 0  # conv: input channels, dense: input width
    out_size: int = 0  # conv: output channels, dense: output width
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in (CONV, DENSE)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == CONV:
            return {
                "weight": (self.kernel, self.kernel, self.in_size, self.out_size),
                "bias": (self.out_size,),
            }
        if self.kind == DENSE:
            return {"weight": (self.in_size, self.out_size), "bias": (self.out_size,)}
        return {}

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "name", "in_size", "out_size", "kernel")}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(name, cin, cout, kernel=3):
    return LayerSpec(CONV, name, cin, cout, kernel)


def dense(name, n_in, n_out):
    return LayerSpec(DENSE, name, n_in, n_out)


def pool(name):
    return LayerSpec(MAXPOOL, name)


@dataclass(frozen=True)
class NetworkConfig:
    """Blocks of conv layers each closed by a 2x2 max pool, then a dense head.

    ``freeze_mask`` has one flag per block plus a final flag for the head.
    """

    name: str
    input_resolution: tuple[int, int]
    blocks: tuple[tuple[LayerSpec, ...], ...]
    head: tuple[LayerSpec, ...]
    freeze_mask: tuple[bool, ...]
    in_channels: int = 3

    def __post_init__(self):
        self.validate()

    @property
    def units(self) -> tuple[tuple[LayerSpec, ...], ...]:
        """Freezable units: every block, then the head."""
        return self.blocks + (self.head,)

    def layers(self) -> Iterator[tuple[int, LayerSpec]]:
        for u, unit in enumerate(self.units):
            for spec in unit:
                yield u, spec

    def param_layers(self) -> list[tuple[int, LayerSpec]]:
        return [(u, s) for u, s in self.layers() if s.has_params]

    def validate(self) -> None:
        if len(self.freeze_mask) != len(self.blocks) + 1:
            raise ShapeError(
                f"freeze_mask needs {len(self.blocks) + 1} flags, got {len(self.freeze_mask)}"
            )
        h, w = self.input_resolution
        if h < 1 or w < 1:
            raise ShapeError(f"bad input resolution {self.input_resolution}")
        channels, flat = self.in_channels, None
        names = set()
        for b, block in enumerate(self.blocks):
            if not block or block[-1].kind != MAXPOOL:
                raise ShapeError(f"block {b + 1} must end in a max pool")
            for spec in block:
                if spec.kind == CONV:
                    if spec.in_size != channels:
                        raise ShapeError(
                            f"{spec.name}: expects {spec.in_size} channels, receives {channels}"
                        )
                    if spec.kernel % 2 != 1:
                        raise ShapeError(f"{spec.name}: same padding needs an odd kernel")
                    channels = spec.out_size
                elif spec.kind == MAXPOOL:
                    if h % 2 or w % 2:
                        raise ShapeError(f"{spec.name}: odd spatial dims {h}x{w}")
                    h, w = h // 2, w // 2
                else:
                    raise ShapeError(f"{spec.name}: {spec.kind} not allowed inside a block")
        kinds = [s.kind for s in self.head]
        if not kinds or kinds[0] != FLATTEN or kinds[-1] != SOFTMAX:
            raise ShapeError("head must be flatten, dense..., softmax")
        if any(k != DENSE for k in kinds[1:-1]) or len(kinds) < 3:
            raise ShapeError("head interior must be one or more dense layers")
        flat = h * w * channels
        for spec in self.head[1:-1]:
            if spec.in_size != flat:
                raise ShapeError(f"{spec.name}: expects width {spec.in_size}, receives {flat}")
            flat = spec.out_size
        if flat != N_CLASSES:
            raise ShapeError(f"final dense width must be {N_CLASSES}, got {flat}")
        for _, spec in self.param_layers():
            if spec.name in names:
                raise ShapeError(f"duplicate layer name {spec.name!r}")
            names.add(spec.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_resolution": list(self.input_resolution),
            "in_channels": self.in_channels,
            "blocks": [[s.to_dict() for s in block] for block in self.blocks],
            "head": [s.to_dict() for s in self.head],
            "freeze_mask": list(self.freeze_mask),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            name=d["name"],
            input_resolution=tuple(d["input_resolution"]),
            blocks=tuple(tuple(LayerSpec.from_dict(s) for s in b) for b in d["blocks"]),
            head=tuple(LayerSpec.from_dict(s) for s in d["head"]),
            freeze_mask=tuple(bool(f) for f in d["freeze_mask"]),
            in_channels=d.get("in_channels", 3),
        )


def make_config(
    name: str,
    input_resolution: tuple[int, int],
    block_channels: list[list[int]],
    hidden_widths: list[int],
    frozen_blocks: int,
    kernel: int = 3,
    in_channels: int = 3,
    freeze_head: bool = False,
) -> NetworkConfig:
    """Build a config with Keras-style layer names (block1_conv1, fc1, predictions)."""
    blocks, channels = [], in_channels
    h, w = input_resolution
    for b, convs in enumerate(block_channels, start=1):
        block = []
        for i, cout in enumerate(convs, start=1):
            block.append(conv(f"block{b}_conv{i}", channels, cout, kernel))
            channels = cout
        block.append(pool(f"block{b}_pool"))
        blocks.append(tuple(block))
        h, w = h // 2, w // 2
    head = [LayerSpec(FLATTEN, "flatten")]
    width = h * w * channels
    for i, hidden in enumerate(hidden_widths, start=1):
        head.append(dense(f"fc{i}", width, hidden))
        width = hidden
    head.append(dense("predictions", width, N_CLASSES))
    head.append(LayerSpec(SOFTMAX, "softmax"))
    freeze = tuple(b < frozen_blocks for b in range(len(blocks))) + (freeze_head,)
    return NetworkConfig(name, tuple(input_resolution), tuple(blocks), tuple(head), freeze,
                         in_channels)


def build_config(name: str) -> NetworkConfig:
    if name == "vgg16":
        return make_config(
            "vgg16",
            (224, 224),
            [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]],
            [4096, 4096],
            frozen_blocks=3,
        )
    if name == "tiny":
        return make_config("tiny", (32, 32), [[4], [8]], [16], frozen_blocks=1)
    raise ValueError(f"unknown architecture {name!r} (expected 'vgg16' or 'tiny')")


@dataclass
class Model:
    config: NetworkConfig
    params: dict[str, dict[str, np.ndarray]] = field(repr=False)

    def __post_init__(self):
        for _, spec in self.config.param_layers():
            if spec.name not in self.params:
                raise ShapeError(f"missing parameters for layer {spec.name!r}")
            for pname, shape in spec.param_shapes().items():
                arr = self.params[spec.name][pname]
                if arr.shape != shape:
                    raise ShapeError(f"{spec.name}.{pname}: shape {arr.shape}, expected {shape}")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"{spec.name}.{pname}: non-finite values")

    @property
    def dtype(self) -> np.dtype:
        _, first = self.config.param_layers()[0]
        return self.params[first.name]["weight"].dtype

    def frozen(self, layer_name: str) -> bool:
        for u, spec in self.config.layers():
            if spec.name == layer_name:
                return self.config.freeze_mask[u]
        raise KeyError(layer_name)

    def copy(self) -> "Model":
        return Model(self.config, {k: {p: a.copy() for p, a in v.items()}
                                   for k, v in self.params.items()})

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: {p: a.astype(dtype) for p, a in v.items()}
                                   for k, v in self.params.items()})

    def tensors(self) -> Iterator[tuple[str, str, np.ndarray]]:
        for _, spec in self.config.param_layers():
            for pname in ("weight", "bias"):
                yield spec.name, pname, self.params[spec.name][pname]


def init_model(config: NetworkConfig, seed: int, dtype=np.float32) -> Model:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for _, spec in config.param_layers():
        shapes = spec.param_shapes()
        fan_in = int(np.prod(shapes["weight"][:-1]))
        limit = np.sqrt(6.0 / fan_in)
        params[spec.name] = {
            "weight": rng.uniform(-limit, limit, shapes["weight"]).astype(dtype),
            "bias": np.zeros(shapes["bias"], dtype=dtype),
        }
    return Model(config, params)


def zero_model(config: NetworkConfig, dtype=np.float32) -> Model:
    params = {
        spec.name: {p: np.zeros(s, dtype=dtype) for p, s in spec.param_shapes().items()}
        for _, spec in config.param_layers()
    }
    return Model(config, params)


@dataclass(frozen=True)
class Prediction:
    p_critical: float
    p_noncritical: float

    def __post_init__(self):
        for p in (self.p_critical, self.p_noncritical):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of range: {p}")
        if abs(self.p_critical + self.p_noncritical - 1.0) > 1e-6:
            raise ValueError("probabilities must sum to 1")

    @classmethod
    def from_probs(cls, probs) -> "Prediction":
        return cls(float(probs[BinaryLabel.CRITICAL]), float(probs[BinaryLabel.NONCRITICAL]))


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    h, w = model.config.input_resolution
    if x.ndim != 4 or x.shape[1:] != (h, w, model.config.in_channels):
        raise ShapeError(
            f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} does not match "
            f"network input {(h, w, model.config.in_channels)}"
        )
    return x.astype(model.dtype, copy=False)


def _run(model: Model, x: np.ndarray, keep_cache: bool):
    """Forward pass returning softmax probabilities and per-layer caches."""
    cache = []
    dense_specs = [s for s in model.config.head if s.kind == DENSE]
    last_dense = dense_specs[-1].name
    for _, spec in model.config.layers():
        inp = x
        if spec.kind == CONV:
            p = model.params[spec.name]
            pre = L.conv_forward(inp, p["weight"], p["bias"])
            x = L.relu(pre)
        elif spec.kind == MAXPOOL:
            pre = None
            x = L.maxpool_forward(inp)
        elif spec.kind == FLATTEN:
            pre = None
            x = inp.reshape(len(inp), -1)
        elif spec.kind == DENSE:
            p = model.params[spec.name]
            pre = L.dense_forward(inp, p["weight"], p["bias"])
            x = pre if spec.name == last_dense else L.relu(pre)
        else:
            pre = None
            x = L.softmax(inp)
        if keep_cache:
            cache.append((spec, inp, pre))
    return x, cache


def predict_proba(model: Model, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """(N, 2) softmax outputs, column 0 = critical."""
    x = _check_input(model, images)
    outs = [_run(model, x[i:i + chunk], False)[0] for i in range(0, len(x), chunk)]
    return np.concatenate(outs, axis=0)


def forward(model: Model, image: np.ndarray) -> Prediction:
    probs = predict_proba(model, image)
    return Prediction.from_probs(probs[0])


def loss_and_gradients(
    model: Model, images: np.ndarray, labels, weights: ClassWeights
) -> tuple[float, dict[str, dict[str, np.ndarray]]]:
    """Mean weighted cross-entropy over the batch and its exact gradients.

    Frozen layers get zero gradient tensors; backpropagation stops below the
    lowest trainable layer.
    """
    x = _check_input(model, images)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if len(labels) != len(x):
        raise ShapeError(f"{len(labels)} labels for {len(x)} images")
    probs, cache = _run(model, x, True)
    cw = weights.as_array()
    n = len(x)
    loss = float(L.weighted_cross_entropy(probs, labels, cw).mean())

    grads = {spec.name: {p: np.zeros(s, dtype=model.dtype)
                         for p, s in spec.param_shapes().items()}
             for _, spec in model.config.param_layers()}
    trainable_pos = [i for i, (u, s) in enumerate(model.config.layers())
                     if s.has_params and not model.config.freeze_mask[u]]
    if not trainable_pos:
        return loss, grads
    lowest = trainable_pos[0]
    units = [u for u, _ in model.config.layers()]

    dense_specs = [s for s in model.config.head if s.kind == DENSE]
    last_dense = dense_specs[-1].name
    # softmax + CE fused
    g = (L.softmax_ce_backward(probs, labels, cw) / n).astype(model.dtype)
    for pos in range(len(cache) - 2, lowest - 1, -1):
        spec, inp, pre = cache[pos]
        frozen = model.config.freeze_mask[units[pos]]
        need_input = pos > lowest
        if spec.kind == DENSE:
            if spec.name != last_dense:
                g = L.relu_backward(g, pre)
            if not frozen:
                grads[spec.name]["weight"] = inp.T @ g
                grads[spec.name]["bias"] = g.sum(axis=0)
            if need_input:
                g = g @ model.params[spec.name]["weight"].T
        elif spec.kind == FLATTEN:
            g = g.reshape(inp.shape)
        elif spec.kind == MAXPOOL:
            g = L.maxpool_backward(g, inp)
        elif spec.kind == CONV:
            g = L.relu_backward(g, pre)
            d_in, d_w, d_b = L.conv_backward(g, inp, model.params[spec.name]["weight"],
                                             need_input_grad=need_input)
            if not frozen:
                grads[spec.name]["weight"] = d_w
                grads[spec.name]["bias"] = d_b
            g = d_in
    return loss, grads


def backward(model: Model, image: np.ndarray, label: BinaryLabel | int,
             weights: ClassWeights) -> dict[str, dict[str, np.ndarray]]:
    """Gradient of one example's weighted cross-entropy w.r.t. every parameter."""
    return loss_and_gradients(model, image, [int(label)], weights)[1]


def sgd_step(model: Model, gradients: dict, learning_rate: float) -> Model:
    """In-place ``p -= lr * g`` on trainable layers; frozen layers are untouched."""
    for u, spec in model.config.param_layers():
        for pname, arr in model.params[spec.name].items():
            g = gradients[spec.name][pname]
            if g.shape != arr.shape:
                raise ShapeError(f"{spec.name}.{pname}: gradient {g.shape} vs param {arr.shape}")
            if model.config.freeze_mask[u] or learning_rate == 0:
                continue
            arr -= (learning_rate * g).astype(arr.dtype, copy=False)
    return model
