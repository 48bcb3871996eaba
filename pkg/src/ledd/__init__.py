"""Ensemble distillation in logit space: Laplace/Gaussian students, Dirichlet
EDD, knowledge distillation and the uncertainty/OOD evaluation stack."""

__version__ = "0.1.0"
