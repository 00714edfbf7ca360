"""Joint local feature detection and description with context augmentation.

A compact, CPU-friendly implementation of an attention-weighted local
feature pipeline: a shared convolutional backbone augmented with global
(transformer) and local (dilated convolution) context, a feature-pyramid
keypoint detector, an attention map that both weights the descriptor
triplet loss and re-ranks matches at test time, plus the synthetic data,
matching, and evaluation tooling needed to train and measure it end to end.
"""

__version__ = "0.1.0"
