"""Per-vector scaled quantization: calibration, two-level scales, a bit-exact
integer datapath model and analytical cost reporting."""

__version__ = "0.1.0"
