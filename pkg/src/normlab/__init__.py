"""Adversarial attacks (FGSM, PGD, second-order) and adversarial training on MNIST."""

__version__ = "0.1.0"
