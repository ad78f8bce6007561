"""Minimal CNN inference with a write-noise hook on every produced activation.

Kernels run in the element type's compute dtype (float32 for 16-bit floats,
float64 for float64); each layer output is rounded back to the storage type,
which is the tensor that gets written and therefore noised.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import bitnoise
from .rng import ROLE_IDS, StreamFactory
from .tensor import FLOAT32, ElementType, Tensor, cast, element_type

LAYER_KINDS = ("conv2d", "batchnorm2d", "relu", "maxpool2d", "flatten", "linear")


class ShapeError(ValueError):
    pass


# --- kernels (plain numpy arrays) -------------------------------------------------


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, stride: int = 1, padding: int = 0) -> np.ndarray:
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv expects {ci} input channels, got {c}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ weight.reshape(o, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def batchnorm2d(x, gamma, beta, mean, var, eps):
    scale = gamma / np.sqrt(var + eps)
    shift = beta - mean * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def relu(x):
    return np.maximum(x, 0)


def maxpool2d(x, size=2, stride=2):
    if size == stride and x.shape[2] % size == 0 and x.shape[3] % size == 0:
        n, c, h, w = x.shape
        return x.reshape(n, c, h // size, size, w // size, size).max(axis=(3, 5))
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def linear(x, weight, bias):
    out = x @ weight.T
    if bias is not None:
        out += bias
    return out


# --- layer specs ------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a chain network.

    ``params`` holds the kind-specific hyperparameters:
    conv2d: in_channels, out_channels, kernel_size, stride, padding;
    batchnorm2d: channels, eps; maxpool2d: size, stride;
    linear: in_features, out_features.
    """

    kind: str
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        p = self.params
        if self.kind == "conv2d":
            k = p["kernel_size"]
            shapes = {"weight": (p["out_channels"], p["in_channels"], k, k)}
            if p.get("bias", True):
                shapes["bias"] = (p["out_channels"],)
            return shapes
        if self.kind == "batchnorm2d":
            c = (p["channels"],)
            return {"weight": c, "bias": c, "running_mean": c, "running_var": c}
        if self.kind == "linear":
            shapes = {"weight": (p["out_features"], p["in_features"])}
            if p.get("bias", True):
                shapes["bias"] = (p["out_features"],)
            return shapes
        return {}

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape of one sample's output given one sample's input shape."""
        p = self.params
        if self.kind == "conv2d":
            c, h, w = _expect_chw(shape, self)
            if c != p["in_channels"]:
                raise ShapeError(f"{self.name}: expects {p['in_channels']} channels, got {c}")
            k, s, pad = p["kernel_size"], p.get("stride", 1), p.get("padding", 0)
            ho, wo = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
            if ho < 1 or wo < 1:
                raise ShapeError(f"{self.name}: kernel {k} does not fit input {h}x{w}")
            return (p["out_channels"], ho, wo)
        if self.kind == "batchnorm2d":
            c, h, w = _expect_chw(shape, self)
            if c != p["channels"]:
                raise ShapeError(f"{self.name}: expects {p['channels']} channels, got {c}")
            return shape
        if self.kind == "maxpool2d":
            c, h, w = _expect_chw(shape, self)
            size, s = p.get("size", 2), p.get("stride", 2)
            if h < size or w < size:
                raise ShapeError(f"{self.name}: pool {size} does not fit input {h}x{w}")
            return (c, (h - size) // s + 1, (w - size) // s + 1)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        if self.kind == "linear":
            if len(shape) != 1 or shape[0] != p["in_features"]:
                raise ShapeError(f"{self.name}: expects ({p['in_features']},) input, got {shape}")
            return (p["out_features"],)
        return shape

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> LayerSpec:
        d = dict(d)
        return cls(d.pop("kind"), d.pop("name", ""), d)


def _expect_chw(shape, layer):
    if len(shape) != 3:
        raise ShapeError(f"{layer.name or layer.kind}: expects a CxHxW input, got {shape}")
    return shape


def layer_forward(spec: LayerSpec, x: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Apply one layer to a batch of compute-dtype values."""
    p = spec.params
    if spec.kind == "conv2d":
        return conv2d(x, params["weight"], params.get("bias"), p.get("stride", 1), p.get("padding", 0))
    if spec.kind == "batchnorm2d":
        return batchnorm2d(
            x, params["weight"], params["bias"], params["running_mean"], params["running_var"],
            x.dtype.type(p.get("eps", 1e-5)),
        )
    if spec.kind == "relu":
        return relu(x)
    if spec.kind == "maxpool2d":
        return maxpool2d(x, p.get("size", 2), p.get("stride", 2))
    if spec.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    return linear(x, params["weight"], params.get("bias"))


# --- networks ---------------------------------------------------------------------


def _is_bias(layer: LayerSpec, pname: str) -> bool:
    # batchnorm shift and statistics are treated as biases, its scale as a weight
    return pname != "weight"


@dataclass
class Network:
    layers: list[LayerSpec]
    params: dict[str, Tensor]
    dtype: ElementType
    num_classes: int
    input_shape: tuple[int, int, int] = (3, 32, 32)
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)
    architecture: str = "custom"

    def __post_init__(self):
        self.dtype = element_type(self.dtype)
        if self.num_classes < 2:
            raise ShapeError(f"num_classes must be >= 2, got {self.num_classes}")
        self.check()

    def check(self) -> None:
        """Validate parameter presence/shape and layer-to-layer shape compatibility."""
        shape = tuple(self.input_shape)
        names = set()
        for i, layer in enumerate(self.layers):
            if not layer.name:
                raise ShapeError(f"layer {i} ({layer.kind}) has no name")
            if layer.name in names:
                raise ShapeError(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
            for pname, pshape in layer.param_shapes().items():
                key = f"{layer.name}.{pname}"
                if key not in self.params:
                    raise ShapeError(f"missing tensor {key!r}")
                if tuple(self.params[key].shape) != pshape:
                    raise ShapeError(f"tensor {key!r} has shape {self.params[key].shape}, expected {pshape}")
            shape = layer.output_shape(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"network output shape {shape} does not match {self.num_classes} classes")

    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer."""
        shapes, shape = [], tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def written_activations(self) -> int:
        """Activation elements written per sample (flatten is a relabelling, not a write)."""
        return sum(
            int(np.prod(s)) for layer, s in zip(self.layers, self.activation_shapes()) if layer.kind != "flatten"
        )

    def noisy_exponent_bits(self, start_bit: int = 0) -> int:
        """Exponent bits exposed to noise per sample under a thermometer mask."""
        exp_noisy = max(0, self.dtype.exponent_bits - max(0, start_bit - 1))
        return self.written_activations() * exp_noisy

    def weight_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind in ("conv2d", "linear")]

    def astype(self, dtype) -> Network:
        dtype = element_type(dtype)
        params = {k: cast(v, dtype) for k, v in self.params.items()}
        return Network(list(self.layers), params, dtype, self.num_classes, self.input_shape,
                       self.mean, self.std, self.architecture)

    def layer_params(self, layer: LayerSpec) -> dict[str, Tensor]:
        return {p: self.params[f"{layer.name}.{p}"] for p in layer.param_shapes()}

    def forward(self, batch, spec=None, streams=None) -> Tensor:
        return forward(self, batch, spec, streams)


@dataclass
class LabeledDataset:
    """Normalised images (N, C, H, W float32) and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> LabeledDataset:
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)

    def balanced_subset(self, per_class: int) -> LabeledDataset:
        """First ``per_class`` samples of every class, in dataset order."""
        idx = []
        for c in range(self.num_classes):
            hits = np.flatnonzero(self.labels == c)
            if hits.size < per_class:
                raise ValueError(f"class {c} has only {hits.size} samples, need {per_class}")
            idx.append(hits[:per_class])
        return self.subset(np.sort(np.concatenate(idx)))


def _noisy_params(net: Network, layer_idx: int, layer: LayerSpec, spec, streams) -> dict[str, np.ndarray]:
    out = {}
    for pname, t in net.layer_params(layer).items():
        role = "biases" if _is_bias(layer, pname) else "weights"
        if spec is not None and role in spec.targets and not spec.is_noop:
            pidx = list(layer.param_shapes()).index(pname)
            rng = streams.generator(ROLE_IDS[role], layer_idx, pidx)
            t = bitnoise.inject(t, spec, rng)
        out[pname] = t.values()
    return out


def forward(net: Network, batch, spec: bitnoise.NoiseSpec | None = None, streams: StreamFactory | None = None) -> Tensor:
    """Logits for a batch; every layer output is one (possibly noisy) write."""
    if spec is not None:
        if spec.dtype != net.dtype:
            raise TypeError(f"noise spec is for {spec.dtype}, network runs in {net.dtype}")
        if streams is None:
            streams = StreamFactory(spec.seed)
    x = batch if isinstance(batch, Tensor) else Tensor.from_values(np.asarray(batch, dtype=np.float32), net.dtype)
    if x.dtype != net.dtype:
        x = cast(x, net.dtype)
    noisy_acts = spec is not None and "activations" in spec.targets and not spec.is_noop
    with np.errstate(all="ignore"):
        for i, layer in enumerate(net.layers):
            params = _noisy_params(net, i, layer, spec, streams)
            out = layer_forward(layer, x.values(), params)
            if layer.kind == "flatten":
                x = x.reshape(out.shape)
                continue
            x = Tensor.from_values(out, net.dtype)
            if noisy_acts:
                x = bitnoise.inject(x, spec, streams.generator(ROLE_IDS["activations"], i))
    return x


def predict(logits: Tensor) -> np.ndarray:
    """Top-1 class; a NaN logit counts as the maximum (first NaN wins)."""
    return np.argmax(logits.values(), axis=1)


def evaluate(net: Network, data: LabeledDataset, spec=None, streams: StreamFactory | None = None,
             batch_size: int = 250) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if spec is not None and streams is None:
        streams = StreamFactory(spec.seed)
    correct = 0
    for b, start in enumerate(range(0, len(data), batch_size)):
        sl = slice(start, start + batch_size)
        bs = streams.child(b) if streams is not None else None
        logits = net.forward(data.images[sl], spec, bs)
        correct += int(np.count_nonzero(predict(logits) == data.labels[sl]))
    return correct / len(data)


# --- architectures ----------------------------------------------------------------

VGG_CONFIGS = {
    "A": [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "B": [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "D": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
    "E": [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M",
          512, 512, 512, 512, "M"],
}
VGG_DEPTHS = {"A": 11, "B": 13, "D": 16, "E": 19}


def _conv_block(layers, idx, cin, cout):
    layers += [
        LayerSpec("conv2d", f"conv{idx}", {"in_channels": cin, "out_channels": cout, "kernel_size": 3,
                                           "stride": 1, "padding": 1}),
        LayerSpec("batchnorm2d", f"bn{idx}", {"channels": cout, "eps": 1e-5}),
        LayerSpec("relu", f"relu{idx}"),
    ]


def vgg_layers(variant: str, num_classes: int = 10, in_channels: int = 3, hidden: int = 512) -> list[LayerSpec]:
    """VGG-A/B/D/E with batchnorm for 32x32 inputs and a 512-512-K classifier."""
    cfg = VGG_CONFIGS[variant]
    layers: list[LayerSpec] = []
    cin, conv_i, pool_i = in_channels, 0, 0
    for v in cfg:
        if v == "M":
            pool_i += 1
            layers.append(LayerSpec("maxpool2d", f"pool{pool_i}", {"size": 2, "stride": 2}))
        else:
            conv_i += 1
            _conv_block(layers, conv_i, cin, v)
            cin = v
    layers.append(LayerSpec("flatten", "flatten"))
    widths = [cin, hidden, hidden, num_classes]
    for j in range(3):
        layers.append(LayerSpec("linear", f"fc{j + 1}", {"in_features": widths[j], "out_features": widths[j + 1]}))
        if j < 2:
            layers.append(LayerSpec("relu", f"fc_relu{j + 1}"))
    return layers


def reference_layers(num_classes: int = 10, widths=(8, 16), in_channels: int = 3, image_size: int = 32) -> list[LayerSpec]:
    """Small desk-scale CNN: two conv-bn-relu-pool blocks and one linear layer."""
    layers: list[LayerSpec] = []
    cin = in_channels
    for i, w in enumerate(widths, start=1):
        _conv_block(layers, i, cin, w)
        layers.append(LayerSpec("maxpool2d", f"pool{i}", {"size": 2, "stride": 2}))
        cin = w
    side = image_size // 2 ** len(widths)
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("linear", "fc", {"in_features": cin * side * side, "out_features": num_classes}))
    return layers


def init_params(layers: list[LayerSpec], rng: np.random.Generator, dtype=FLOAT32) -> dict[str, Tensor]:
    """He-initialised weights and identity batchnorm, for tests and untrained runs."""
    params = {}
    for layer in layers:
        for pname, shape in layer.param_shapes().items():
            if pname == "weight" and layer.kind != "batchnorm2d":
                fan_in = int(np.prod(shape[1:]))
                v = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif pname in ("weight", "running_var"):
                v = np.ones(shape)
            else:
                v = np.zeros(shape)
            params[f"{layer.name}.{pname}"] = Tensor.from_values(v, dtype)
    return params


def build_network(architecture: str, num_classes: int = 10, seed: int = 0, dtype=FLOAT32) -> Network:
    """Randomly initialised network for ``"reference"`` or ``"vgg-A"`` .. ``"vgg-E"``."""
    if architecture == "reference":
        layers = reference_layers(num_classes)
    elif architecture.startswith("vgg-") and architecture[4:] in VGG_CONFIGS:
        layers = vgg_layers(architecture[4:], num_classes)
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    params = init_params(layers, np.random.default_rng(seed), dtype)
    return Network(layers, params, element_type(dtype), num_classes, architecture=architecture)
