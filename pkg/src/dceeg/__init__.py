"""Multimodal EEG seizure detection at desk scale.

Subpackages cover the full pipeline: signal preprocessing, a convolutional
self-attention EEG encoder and a prompted text encoder trained with a joint
contrastive and classification objective, teacher-to-student distillation,
and an evaluation harness, all on a minimal numpy autodiff core.
"""

__version__ = "0.1.0"
