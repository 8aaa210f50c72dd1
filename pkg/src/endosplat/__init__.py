"""Online Gaussian-splatting scene reconstruction and dense point tracking."""

__version__ = "0.1.0"
