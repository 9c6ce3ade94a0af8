"""Sparse-view CT reconstruction with a temperature-scaled variational deep image prior."""

__version__ = "0.1.0"
