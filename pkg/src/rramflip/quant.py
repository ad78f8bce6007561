"""Static post-training affine quantization to 8-bit integers.

``Q(r) = round(r / S + Z)`` with ``S = (beta - alpha) / (beta_q - alpha_q)`` and
``Z = -(alpha / S - alpha_q)``, per tensor.  Convolution and linear layers
accumulate exact integer products in 32 bits and rescale in float at the
layer boundary; every layer output is stored (and therefore noised) as int8.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import bitnoise
from .nn import LabeledDataset, Network, batchnorm2d, conv2d, layer_forward, linear, maxpool2d, relu
from .nn import forward as float_forward
from .rng import ROLE_IDS, StreamFactory
from .tensor import FLOAT32, INT8, Tensor

log = logging.getLogger(__name__)

INT32_MAX = 2**31 - 1
DEGENERATE_PAD = 1e-6


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    alpha: float
    beta: float
    qmin: int = -128
    qmax: int = 127
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> QuantParams:
        return cls(**d)


def make_params(alpha: float, beta: float, qmin: int = -128, qmax: int = 127) -> QuantParams:
    """QuantParams for the float range ``[alpha, beta]``; a point range is widened."""
    alpha, beta = float(alpha), float(beta)
    if not (np.isfinite(alpha) and np.isfinite(beta)) or alpha > beta:
        raise ValueError(f"invalid float range [{alpha}, {beta}]")
    degenerate = alpha == beta
    if degenerate:
        alpha, beta = alpha - DEGENERATE_PAD, beta + DEGENERATE_PAD
    scale = (beta - alpha) / (qmax - qmin)
    z = -(alpha / scale - qmin)
    zero_point = int(np.clip(np.rint(z), qmin, qmax))
    return QuantParams(scale, zero_point, alpha, beta, qmin, qmax, degenerate)


def quantize(r, q: QuantParams):
    v = np.clip(np.rint(np.asarray(r, dtype=np.float64) / q.scale + q.zero_point), q.qmin, q.qmax)
    return v.astype(np.int64) if v.ndim else int(v)


def dequantize(v, q: QuantParams):
    v = np.asarray(v, dtype=np.float64)
    out = q.scale * (v - q.zero_point)
    return out if out.ndim else float(out)


def _to_int8(r, q: QuantParams) -> Tensor:
    return Tensor(quantize(r, q).astype(np.int8), INT8)


def calibrate(net: Network, calib_data: LabeledDataset, batch_size: int = 250) -> dict[str, QuantParams]:
    """Per-tensor min/max ranges: parameters directly, activations over noiseless float passes.

    Keys: ``"input"``, ``"<layer>.out"`` for every written layer output and
    ``"<layer>.weight"`` / ``"<layer>.bias"`` for conv and linear layers.
    """
    if len(calib_data) == 0:
        raise ValueError("calibration set is empty")
    if net.dtype != FLOAT32:
        net = net.astype(FLOAT32)
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}

    def observe(key, a):
        lo[key] = min(lo.get(key, np.inf), float(np.min(a)))
        hi[key] = max(hi.get(key, -np.inf), float(np.max(a)))

    for start in range(0, len(calib_data), batch_size):
        x = calib_data.images[start:start + batch_size].astype(np.float32)
        observe("input", x)
        for layer in net.layers:
            params = {k: t.values() for k, t in net.layer_params(layer).items()}
            x = layer_forward(layer, x, params)
            if layer.kind != "flatten":
                observe(f"{layer.name}.out", x)

    qp = {}
    for layer in net.weight_layers():
        for pname, t in net.layer_params(layer).items():
            v = t.values()
            qp[f"{layer.name}.{pname}"] = make_params(v.min(), v.max())
    for key in lo:
        qp[key] = make_params(lo[key], hi[key])
    for key, q in qp.items():
        if q.degenerate:
            log.warning("degenerate calibration range for %s; widened to [%g, %g]", key, q.alpha, q.beta)
    return qp


@dataclass
class QuantizedNetwork:
    net: Network
    qparams: dict[str, QuantParams]
    qtensors: dict[str, Tensor]

    @property
    def dtype(self):
        return INT8

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    def forward(self, batch, spec=None, streams=None) -> Tensor:
        return quantized_forward(self, batch, spec, streams)


def quantize_network(net: Network, qparams: dict[str, QuantParams]) -> QuantizedNetwork:
    if net.dtype != FLOAT32:
        net = net.astype(FLOAT32)
    qtensors = {}
    for layer in net.weight_layers():
        for pname, t in net.layer_params(layer).items():
            key = f"{layer.name}.{pname}"
            qtensors[key] = _to_int8(t.values(), qparams[key])
    return QuantizedNetwork(net, qparams, qtensors)


def _layer_qtensors(qnet, i, layer, spec, streams) -> dict[str, np.ndarray]:
    """Zero-point-shifted integer parameters (possibly noised) of a conv/linear layer."""
    out = {}
    for pidx, pname in enumerate(layer.param_shapes()):
        key = f"{layer.name}.{pname}"
        t = qnet.qtensors[key]
        role = "weights" if pname == "weight" else "biases"
        if spec is not None and role in spec.targets and not spec.is_noop:
            t = bitnoise.inject(t, spec, streams.generator(ROLE_IDS[role], i, pidx))
        out[pname] = t.data.astype(np.int64) - qnet.qparams[key].zero_point
    return out


def quantized_forward(qnet: QuantizedNetwork, batch, spec: bitnoise.NoiseSpec | None = None,
                      streams: StreamFactory | None = None) -> Tensor:
    """Dequantized float32 logits of the int8 network; every int8 layer output is one write."""
    if spec is not None:
        if spec.dtype != INT8:
            raise TypeError(f"quantized inference needs an int8 noise mask, got {spec.dtype}")
        if streams is None:
            streams = StreamFactory(spec.seed)
    net, qp = qnet.net, qnet.qparams
    noisy_acts = spec is not None and "activations" in spec.targets and not spec.is_noop
    x_q = qp["input"]
    x = _to_int8(np.asarray(batch, dtype=np.float32), x_q)
    for i, layer in enumerate(net.layers):
        if layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
            continue
        out_q = qp[f"{layer.name}.out"]
        if layer.kind in ("conv2d", "linear"):
            p = _layer_qtensors(qnet, i, layer, spec, streams)
            xi = x.data.astype(np.float64) - x_q.zero_point
            w = p["weight"].astype(np.float64)
            if layer.kind == "conv2d":
                acc = conv2d(xi, w, None, layer.params.get("stride", 1), layer.params.get("padding", 0))
            else:
                acc = linear(xi, w, None)
            if np.abs(acc).max(initial=0) > INT32_MAX:
                raise OverflowError(f"{layer.name}: accumulator exceeds 32 bits")
            acc = acc.astype(np.int32)
            w_q = qp[f"{layer.name}.weight"]
            y = (x_q.scale * w_q.scale) * acc.astype(np.float64)
            if "bias" in p:
                b = qp[f"{layer.name}.bias"].scale * p["bias"].astype(np.float64)
                y += b[None, :, None, None] if layer.kind == "conv2d" else b[None, :]
        else:
            xf = dequantize(x.data, x_q)
            if layer.kind == "batchnorm2d":
                bp = {k: t.values().astype(np.float64) for k, t in net.layer_params(layer).items()}
                y = batchnorm2d(xf, bp["weight"], bp["bias"], bp["running_mean"], bp["running_var"],
                                layer.params.get("eps", 1e-5))
            elif layer.kind == "relu":
                y = relu(xf)
            else:
                y = maxpool2d(xf, layer.params.get("size", 2), layer.params.get("stride", 2))
        x = _to_int8(y, out_q)
        if noisy_acts:
            x = bitnoise.inject(x, spec, streams.generator(ROLE_IDS["activations"], i))
        x_q = out_q
    return Tensor.from_values(dequantize(x.data, x_q), FLOAT32)


def float_reference(net: Network, batch) -> Tensor:
    """Noiseless float32 logits, the oracle for quantization fidelity."""
    return float_forward(net.astype(FLOAT32) if net.dtype != FLOAT32 else net, batch)


def serialize(qparams: dict[str, QuantParams]) -> dict:
    return {k: q.to_dict() for k, q in qparams.items()}


def deserialize(d: dict) -> dict[str, QuantParams]:
    return {k: QuantParams.from_dict(v) for k, v in d.items()}
