"""SGDFuse - mask-guided diffusion fusion of infrared and visible images."""

__version__ = "0.1.0"
