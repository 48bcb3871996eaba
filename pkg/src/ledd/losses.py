"""Training objectives for standard models, KD students and EDD students.

Tensors follow the layout ``[B, L, K]`` for student outputs and
``[B, L, M, K]`` for ensemble outputs; the batch axis may be dropped for a
single sequence. Per-step terms are averaged over the valid steps of each
sequence and then over sequences. Losses are accumulated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DIRICHLET_SMOOTHING = 1e-8
FAMILIES = ("dirichlet", "gaussian-logit", "laplace-logit")


@dataclass(frozen=True)
class KDConfig:
    lam: float = 0.5
    temperature: float = 0.8
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")


@dataclass(frozen=True)
class EDDConfig:
    beta: float = 0.1
    family: str = "laplace-logit"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown student family {self.family!r}")


def _f64(x) -> torch.Tensor:
    return torch.as_tensor(x).to(torch.float64)


def _batched(x: torch.Tensor, rank: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == rank - 1 else x


def _reduce(per_step: torch.Tensor, mask) -> torch.Tensor:
    """Mean over valid steps of each sequence, then mean over sequences."""
    if mask is None:
        return per_step.mean(dim=-1).mean()
    mask = _batched(torch.as_tensor(mask, dtype=torch.bool), 2).to(per_step.device)
    w = mask.to(per_step.dtype)
    per_seq = (per_step * w).sum(-1) / w.sum(-1).clamp_min(1.0)
    return per_seq.mean()


def normalize_logits(z: torch.Tensor) -> torch.Tensor:
    """Shift logits so that ``LogSumExp`` over the class axis is zero."""
    z = torch.as_tensor(z)
    return z - torch.logsumexp(z, dim=-1, keepdim=True)


def _check_targets(targets: torch.Tensor, num_classes: int, mask) -> torch.Tensor:
    """Validate targets at valid steps; masked steps are replaced by class 0."""
    if mask is not None:
        keep = _batched(torch.as_tensor(mask, dtype=torch.bool), 2)
        targets = torch.where(keep, targets, torch.zeros_like(targets))
    if targets.numel() and (int(targets.max()) >= num_classes or int(targets.min()) < 0):
        raise ValueError(f"target id outside [0, {num_classes})")
    return targets


def nll_step_terms(logits, targets, smoothing: float = 0.0) -> torch.Tensor:
    """Per-step label-smoothed negative log-likelihood, shape ``[B, L]``."""
    logp = torch.log_softmax(_f64(logits), dim=-1)
    k = logp.shape[-1]
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if smoothing == 0.0:
        return -picked
    return -((1.0 - smoothing) * picked + (smoothing / k) * logp.sum(-1))


def nll_loss(logits, targets, smoothing: float = 0.0, mask=None) -> torch.Tensor:
    logits = _batched(torch.as_tensor(logits), 3)
    targets = _batched(torch.as_tensor(targets, dtype=torch.long), 2)
    targets = _check_targets(targets, logits.shape[-1], mask)
    return _reduce(nll_step_terms(logits, targets, smoothing), mask)


def tempered_kl_steps(teacher_probs, student_logits, temperature: float) -> torch.Tensor:
    """Per-step ``KL(teacher_T || student_T)`` with ``0 ln 0 = 0``.

    The teacher (an averaged distribution) is tempered through its log
    probabilities; the student through its logits. Both are renormalised.
    """
    log_teacher = torch.log(_f64(teacher_probs)) / temperature
    log_q = torch.log_softmax(log_teacher, dim=-1)
    q = log_q.exp()
    log_p = torch.log_softmax(_f64(student_logits) / temperature, dim=-1)
    safe_log_q = torch.where(q > 0, log_q, torch.zeros_like(log_q))
    return (q * (safe_log_q - log_p)).sum(-1)


def kd_terms(teacher_probs, student_logits, targets, cfg: KDConfig, mask=None) -> dict[str, torch.Tensor]:
    """NLL part, KL part and their convex combination."""
    student_logits = _batched(torch.as_tensor(student_logits), 3)
    teacher_probs = _batched(torch.as_tensor(teacher_probs), 3)
    targets = _batched(torch.as_tensor(targets, dtype=torch.long), 2)
    targets = _check_targets(targets, student_logits.shape[-1], mask)
    nll = _reduce(nll_step_terms(student_logits, targets, cfg.label_smoothing), mask)
    kl = _reduce(tempered_kl_steps(teacher_probs, student_logits, cfg.temperature), mask)
    return {"nll": nll, "kl": kl, "kd": cfg.lam * nll + (1.0 - cfg.lam) * kl}


def kd_loss(teacher_probs, student_logits, targets, cfg: KDConfig, mask=None) -> torch.Tensor:
    """``lam * NLL + (1 - lam) * KL`` against the member-averaged teacher."""
    return kd_terms(teacher_probs, student_logits, targets, cfg, mask)["kd"]


def smooth_simplex(probs: torch.Tensor, eps: float = DIRICHLET_SMOOTHING) -> torch.Tensor:
    k = probs.shape[-1]
    return (probs + eps) / (1.0 + k * eps)


def dirichlet_edd_steps(alpha, member_probs) -> torch.Tensor:
    alpha = _f64(alpha)
    if torch.any(alpha <= 0) or not torch.isfinite(alpha).all():
        raise ValueError("Dirichlet concentrations must be positive and finite")
    log_geo = torch.log(smooth_simplex(_f64(member_probs))).mean(dim=-2)
    log_beta = torch.lgamma(alpha).sum(-1) - torch.lgamma(alpha.sum(-1))
    k = alpha.shape[-1]
    return (log_beta - (alpha * log_geo).sum(-1)) / k


def dirichlet_edd_loss(alpha, member_probs, mask=None) -> torch.Tensor:
    """Dirichlet NLL of the members, reduced through their geometric mean.

    ``(1/LK) sum_l [ln B(alpha_l) - sum_k alpha_lk ln pi~_lk]`` where pi~ is
    the geometric average of the (smoothed) member probabilities.
    """
    alpha = _batched(torch.as_tensor(alpha), 3)
    member_probs = _batched(torch.as_tensor(member_probs), 4)
    return _reduce(dirichlet_edd_steps(alpha, member_probs), mask)


def _check_ensemble_logits(z: torch.Tensor) -> torch.Tensor:
    z = _f64(z)
    if not torch.isfinite(z).all():
        raise ValueError("ensemble logits contain non-finite values")
    return z


def _check_sigma(sigma: torch.Tensor) -> torch.Tensor:
    sigma = _f64(sigma)
    if torch.any(sigma <= 0):
        raise ValueError("scales must be positive")
    return sigma


def laplace_edd_steps(mu, sigma, ensemble_logits) -> torch.Tensor:
    z = _check_ensemble_logits(ensemble_logits)
    mu = _f64(mu).unsqueeze(-2)
    sigma = _check_sigma(sigma).unsqueeze(-2)
    return (torch.abs(z - mu) / sigma + torch.log(sigma)).mean(dim=(-2, -1))


def laplace_edd_loss(mu, sigma, ensemble_logits, mask=None) -> torch.Tensor:
    """Laplace NLL of member logits with the constant ``ln 2`` dropped.

    Per element ``|z - mu| / sigma + ln sigma``, averaged over members,
    classes, steps and sequences.
    """
    mu = _batched(torch.as_tensor(mu), 3)
    sigma = _batched(torch.as_tensor(sigma), 3)
    ensemble_logits = _batched(torch.as_tensor(ensemble_logits), 4)
    return _reduce(laplace_edd_steps(mu, sigma, ensemble_logits), mask)


def gaussian_edd_steps(mu, sigma, ensemble_logits) -> torch.Tensor:
    z = _check_ensemble_logits(ensemble_logits)
    mu = _f64(mu).unsqueeze(-2)
    sigma = _check_sigma(sigma).unsqueeze(-2)
    return ((z - mu) ** 2 / (2.0 * sigma**2) + torch.log(sigma)).mean(dim=(-2, -1))


def gaussian_edd_loss(mu, sigma, ensemble_logits, mask=None) -> torch.Tensor:
    """Gaussian NLL of member logits with ``ln sqrt(2 pi)`` dropped."""
    mu = _batched(torch.as_tensor(mu), 3)
    sigma = _batched(torch.as_tensor(sigma), 3)
    ensemble_logits = _batched(torch.as_tensor(ensemble_logits), 4)
    return _reduce(gaussian_edd_steps(mu, sigma, ensemble_logits), mask)


def ledd_terms(
    mu,
    sigma,
    ensemble_logits,
    targets,
    kd_cfg: KDConfig,
    edd_cfg: EDDConfig,
    mask=None,
    kd_weight: float = 1.0,
) -> dict[str, torch.Tensor]:
    """Components of ``kd_weight * L_KD(softmax(mu)) + beta * L_EDD``.

    The KD teacher is the member average of ``softmax(ensemble_logits)``.
    ``kd_weight`` defaults to 1; setting it to 0 trains on the
    distribution-distillation term alone.
    """
    if edd_cfg.family == "laplace-logit":
        edd_fn = laplace_edd_loss
    elif edd_cfg.family == "gaussian-logit":
        edd_fn = gaussian_edd_loss
    else:
        raise ValueError(f"combined logit-space loss needs a logit family, got {edd_cfg.family!r}")
    ensemble_logits = _batched(torch.as_tensor(ensemble_logits), 4)
    teacher = torch.softmax(_f64(ensemble_logits), dim=-1).mean(dim=-2)
    terms = kd_terms(teacher, mu, targets, kd_cfg, mask) if kd_weight else {}
    edd = edd_fn(mu, sigma, ensemble_logits, mask)
    kd = terms.get("kd", torch.zeros((), dtype=torch.float64))
    terms["edd"] = edd
    terms["total"] = kd_weight * kd + edd_cfg.beta * edd
    return terms


def combined_ledd_loss(mu, sigma, ensemble_logits, targets, kd_cfg, edd_cfg, mask=None) -> torch.Tensor:
    """``L_KD + beta * L_EDD`` for a Gaussian or Laplace logit-space student."""
    return ledd_terms(mu, sigma, ensemble_logits, targets, kd_cfg, edd_cfg, mask)["total"]
