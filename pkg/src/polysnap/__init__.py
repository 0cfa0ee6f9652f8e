"""polysnap: polygon-based refinement of instance segmentation masks."""

__version__ = "0.1.0"
