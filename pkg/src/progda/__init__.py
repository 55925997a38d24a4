"""Progressive unsupervised domain adaptation with cluster-wise contrastive
learning and amplitude-spectrum augmentation, at desk scale."""

__version__ = "0.1.0"
