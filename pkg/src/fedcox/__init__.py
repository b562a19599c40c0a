"""Federated fitting, selection and validation of centre-stratified Cox models."""

__version__ = "0.1.0"

from fedcox.kernels import IMPLEMENTATION as KERNEL_IMPLEMENTATION  # noqa: F401
