"""Audio-visual(-linguistic) diffusion speech enhancement on a synthetic corpus."""

__version__ = "0.1.0"
