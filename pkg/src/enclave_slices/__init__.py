"""Hybrid enclave/accelerator inference with trainable model slices."""

__version__ = "0.1.0"
