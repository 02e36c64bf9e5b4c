"""Terminal extraction, ONNX export, and serving for sycam datasets."""

__version__ = "0.1.0"
