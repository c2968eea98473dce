"""Integer-only 4-bit neural network inference with shift-based batch-norm quantization."""

__version__ = "0.1.0"
