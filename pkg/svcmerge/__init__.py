"""Weight-space merging of fine-tuned checkpoints with singular value calibration."""

__version__ = "0.1.0"
