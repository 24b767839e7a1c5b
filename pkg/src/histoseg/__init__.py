"""histoseg: tumor segmentation and section classification for whole-slide images."""

__version__ = "0.1.0"

CHECKPOINT_MAGIC = "HSEG1"
