"""Adversarial robustness of bottleneck-injected classifiers, at desk scale.

Library + CLI for training baseline and variational-bottleneck classifiers,
running white-box attacks against them, and emitting robustness, bitrate and
perturbation-norm reports.
"""

__version__ = "0.1.0"
