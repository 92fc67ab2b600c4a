"""cryda: domain-shift diagnosis and unsupervised adaptation for cry audio classifiers."""

__version__ = "0.1.0"
