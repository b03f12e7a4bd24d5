"""tada: learn a convolutional emulator of an unknown JPEG processing pipeline
from a small unlabeled image set, and measure how much cover-source mismatch
the tailored source removes."""

__version__ = "0.1.0"
