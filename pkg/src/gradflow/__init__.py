"""gradflow: layer-wise gradient scores for out-of-distribution detection with GLOW-style flows."""

__version__ = "0.1.0"
