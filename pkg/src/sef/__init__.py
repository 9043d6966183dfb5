"""Semantic channel grouping and decomposed distribution matching on a small CNN."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
