"""Gradient-based adversarial training for text classification.

Library + CLI covering multi-step embedding perturbation (FreeLB-style
training and k-PGD attacks), contrastive representation learning with
dual momentum memory banks, token reconstruction from adversarial
representations, and a robustness analysis suite, all on a compact
trainable encoder with its own reverse-mode gradient tape.
"""

__version__ = "0.1.0"
