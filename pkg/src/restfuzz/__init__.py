"""restfuzz: grammar-based stateful REST API fuzzing with learned mutations."""

__version__ = "0.1.0"
