"""setnet: deep permutation-invariant networks (Deep Sets, Set Transformer and their ++ variants)."""

__version__ = "0.1.0"
