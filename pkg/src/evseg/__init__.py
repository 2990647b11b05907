"""Unsupervised domain adaptation for event-camera semantic segmentation.

Synthetic source scenes provide labeled intensity images; target scenes
provide unlabeled event streams. A small convolutional segmenter is trained
with teacher-student self-training, hybrid pseudo labels fused from an
event-to-image reconstruction channel, and prototype-based feature
alignment. Everything runs on the CPU in seconds to minutes.
"""

__version__ = "0.1.0"
