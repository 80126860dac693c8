"""Circuit and causal-variable localization benchmark on a toy transformer."""

__version__ = "0.1.0"
