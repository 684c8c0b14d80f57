"""Budget-aware semi-supervised segmentation toolkit.

Desk-scale reproduction of an annotation-cost accounting scheme and a
two-network pseudo-labeling pipeline (sequential instance decoding, class
conditioning, class-masked Hungarian matching, sIoU loss) on a deterministic
synthetic-shapes benchmark.
"""

__version__ = "0.1.0"
