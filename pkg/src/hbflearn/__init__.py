"""hbflearn: unsupervised hybrid beamforming design and classical baselines."""

__version__ = "0.1.0"
