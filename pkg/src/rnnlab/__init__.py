"""Recurrent weighted-average and discounted-attention cells with a numpy autodiff core."""

__version__ = "0.1.0"
