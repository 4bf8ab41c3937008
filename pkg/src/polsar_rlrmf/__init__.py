"""Robust low-rank feature denoising, CNN classification and MRF refinement for PolSAR images."""

__version__ = "0.1.0"
