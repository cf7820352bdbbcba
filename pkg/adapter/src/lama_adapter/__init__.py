"""Thin adapter between the case-directory in-painting protocol and a
pretrained large-mask in-painting checkpoint (with a dependency-free stub
mode for protocol testing)."""

__version__ = "0.1.0"
