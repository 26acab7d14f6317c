"""Multi-concept personalization of a small text-to-image diffusion model with attention calibration."""

__version__ = "0.1.0"
