"""Quantized tiny Transformers for time series: QAT, integer inference,
FPGA cost models, VHDL generation and hardware-aware search."""

__version__ = "0.1.0"
