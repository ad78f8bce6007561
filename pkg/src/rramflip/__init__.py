"""Bit-flip write-noise injection and resilience sweeps for CNN inference."""
from .bitnoise import BitMask, FlipTensorPair, NoiseSpec, apply_bitflip_noise, inject, make_startbit_mask
from .device import DeviceModel, ResistanceDistribution, solve_threshold
from .tensor import BFLOAT16, FLOAT16, FLOAT32, FLOAT64, INT8, UINT8, Tensor, bit_view, cast, from_bits

__version__ = "0.1.0"

__all__ = [
    "BFLOAT16", "FLOAT16", "FLOAT32", "FLOAT64", "INT8", "UINT8",
    "BitMask", "DeviceModel", "FlipTensorPair", "NoiseSpec", "ResistanceDistribution", "Tensor",
    "apply_bitflip_noise", "bit_view", "cast", "from_bits", "inject", "make_startbit_mask", "solve_threshold",
]
