"""Semi-supervised segmentation with a promptable backbone, DFE and PCSW prompting."""

__version__ = "0.1.0"
