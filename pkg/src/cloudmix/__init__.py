"""cloudmix: self-supervised point cloud pre-training by mixing and
disentangling pairs of clouds, plus fine-tuning and evaluation tools."""

__version__ = "0.1.0"
