"""W4A8 post-training quantization toolkit built around the integer-with-denormal (dINT) format."""

from .formats import FormatKind, QuantFormat, QuantParams, parse_format
from .quantizer import Granularity, QuantizedTensor, calibrate_params, dequantize, fake_quant, quantize
from .tensorio import LayerCapsule, load_capsules, read_tensor, synth_capsule, write_tensor

__all__ = [
    "FormatKind",
    "Granularity",
    "LayerCapsule",
    "QuantFormat",
    "QuantParams",
    "QuantizedTensor",
    "calibrate_params",
    "dequantize",
    "fake_quant",
    "load_capsules",
    "parse_format",
    "quantize",
    "read_tensor",
    "synth_capsule",
    "write_tensor",
]

__version__ = "0.1.0"
