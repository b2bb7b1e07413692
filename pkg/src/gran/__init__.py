"""Block-wise autoregressive graph generation with attentive message passing."""

__version__ = "0.1.0"
