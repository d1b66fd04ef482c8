"""Semi-supervised semantic segmentation of registered RGB-D sequences.

A small U-Net is trained on a few annotated frames, on annotations warped
to the other frames of each sequence, and on a consistency term that asks
predictions of the same surface seen from different views to agree.
"""

__version__ = "0.1.0"
