"""Total / knowledge / data uncertainty for ensembles and students.

Sequence-level scores are the mean over decoding steps of the token-level
quantities, all computed on one decoded hypothesis that every member (or
sample) shares as back-history.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import digamma, entr, softmax

from .distributions import DiagGaussianParams, DiagLaplaceParams, RngStream, sample

MI_TOLERANCE = 1e-9


@dataclass(frozen=True)
class UncertaintyScores:
    total: float
    knowledge: float
    data: float


def _anchored_mean(x: np.ndarray, axis: int) -> np.ndarray:
    """Mean taken as offsets from the first entry, so identical entries
    average to exactly that entry."""
    first = np.take(x, [0], axis=axis)
    return np.squeeze(first, axis=axis) + (x - first).mean(axis=axis)


def predictive(members) -> np.ndarray:
    """Arithmetic mean of member distributions over the member axis (-2)."""
    return _anchored_mean(np.asarray(members, dtype=np.float64), -2)


def entropy(p) -> np.ndarray:
    return entr(np.asarray(p, dtype=np.float64)).sum(axis=-1)


def _clamp_mi(mi: np.ndarray) -> np.ndarray:
    if np.any(mi < -MI_TOLERANCE):
        raise FloatingPointError(f"mutual information {float(np.min(mi)):.3e} is below tolerance")
    return np.maximum(mi, 0.0)


def mutual_information(members) -> np.ndarray:
    """Entropy of the member mean minus mean member entropy."""
    members = np.asarray(members, dtype=np.float64)
    return _clamp_mi(entropy(predictive(members)) - _anchored_mean(entropy(members), -1))


def member_set_scores(step_members) -> UncertaintyScores:
    """Reduce per-step member distributions ``[L, M, K]`` to sequence scores."""
    step_members = np.asarray(step_members, dtype=np.float64)
    if step_members.ndim != 3:
        raise ValueError(f"expected [L, M, K] member distributions, got shape {step_members.shape}")
    tu_steps = entropy(predictive(step_members))
    ku_steps = _clamp_mi(tu_steps - _anchored_mean(entropy(step_members), -1))
    tu = float(tu_steps.mean())
    ku = float(ku_steps.mean())
    return UncertaintyScores(tu, ku, tu - ku)


def _check_length(n_steps: int, decoded) -> None:
    if decoded is not None and len(decoded) != n_steps:
        raise ValueError(f"{n_steps} scored steps for a decoded sequence of length {len(decoded)}")


def sequence_scores(member_step_logits, decoded=None) -> UncertaintyScores:
    """Scores from member logits ``[L, M, K]`` evaluated on ``decoded``."""
    z = np.asarray(member_step_logits, dtype=np.float64)
    _check_length(z.shape[0], decoded)
    return member_set_scores(softmax(z, axis=-1))


def sample_set_scores(sample_probs) -> UncertaintyScores:
    """Scores from sampled per-step distributions laid out ``[S, L, K]``."""
    return member_set_scores(np.asarray(sample_probs, dtype=np.float64).transpose(1, 0, 2))


def sample_scores(mu, sigma, family: str, n_samples: int, rng: RngStream, decoded=None) -> UncertaintyScores:
    """Monte Carlo scores for a logit-space distribution with per-step ``mu, sigma [L, K]``."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples to estimate mutual information")
    mu = np.asarray(mu, dtype=np.float64)
    _check_length(mu.shape[0], decoded)
    if family == "laplace-logit":
        params = DiagLaplaceParams(mu, sigma)
    elif family == "gaussian-logit":
        params = DiagGaussianParams(mu, sigma)
    else:
        raise ValueError(f"sampling needs a logit-space family, got {family!r}")
    z = sample(params, n_samples, rng)  # [S, L, K]
    return sample_set_scores(softmax(z, axis=-1))


def student_sample_scores(student, src, decoded, n_samples: int, rng: RngStream, family: str = "laplace-logit") -> UncertaintyScores:
    """Score a logit-space student on ``decoded`` by sampling its logit distribution."""
    from .nncore import forward_seq

    if n_samples < 2:
        raise ValueError("need at least 2 samples to estimate mutual information")
    if not student.has_scale_head:
        raise ValueError("student has no scale head; it is not a logit-space student")
    with torch.no_grad():
        mu, log_sigma = forward_seq(student, src, decoded)
    return sample_scores(mu.double().numpy(), np.exp(log_sigma.double().numpy()), family, n_samples, rng, decoded)


def dirichlet_step_terms(alpha) -> tuple[np.ndarray, np.ndarray]:
    """Per-step (total, expected data) uncertainty of ``Dir(alpha)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0) or not np.all(np.isfinite(alpha)):
        raise ValueError("Dirichlet concentrations must be positive and finite")
    a0 = alpha.sum(axis=-1, keepdims=True)
    mean = alpha / a0
    total = entropy(mean)
    expected = -(mean * (digamma(alpha + 1.0) - digamma(a0 + 1.0))).sum(axis=-1)
    return total, expected


def dirichlet_scores(alpha_steps, decoded=None) -> UncertaintyScores:
    alpha_steps = np.asarray(alpha_steps, dtype=np.float64)
    _check_length(alpha_steps.shape[0], decoded)
    total, expected = dirichlet_step_terms(alpha_steps)
    ku_steps = _clamp_mi(total - expected)
    tu = float(total.mean())
    ku = float(ku_steps.mean())
    return UncertaintyScores(tu, ku, tu - ku)


def deterministic_predictive(mu) -> np.ndarray:
    """Softmax of the mean logits, used in place of the sampled expectation."""
    return softmax(np.asarray(mu, dtype=np.float64), axis=-1)
