"""Ensemble training, teacher-logit collection, distillation drivers and the
Laplace-augmented ensemble scorer.

Datasets are either a :class:`~ledd.seqtask.ToyData` (static 2-D
classification, one "step" per example) or a list of ``(src, tgt)`` token
pairs. Models are built by a factory ``make(seed, scale_head)`` so that
members, snapshots and students share one architecture.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.special import softmax
from torch import nn

from . import losses
from ._io import Reader, atomic_write_bytes, seal, unseal
from .distributions import RngStream, fit_laplace_mle
from .losses import EDDConfig, KDConfig
from .nncore import Adam, LrSchedule, NonFiniteGradient, backward, lr_at, seq_batch
from .seqtask import ToyData
from .uncertainty import UncertaintyScores, sample_scores

TEACHER_MAGIC = b"EDDL"
TEACHER_VERSION = 1

ModelFactory = Callable[..., nn.Module]


class TrainingDivergence(FloatingPointError):
    """A loss term or gradient went non-finite.

    Carries the step, the offending term, the model in its last state and
    the training log up to that point.
    """

    def __init__(self, step: int, term: str, model: nn.Module | None = None, log: list | None = None):
        self.step = step
        self.term = term
        self.model = model
        self.log = log or []
        super().__init__(f"non-finite {term} at step {step}")


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    inputs: tuple
    targets: torch.Tensor  # [B, L]
    mask: torch.Tensor | None  # [B, L]; None when every step is valid


def make_batch(data, idx: Sequence[int]) -> Batch:
    if isinstance(data, ToyData):
        x = torch.from_numpy(data.x[np.asarray(idx)])
        y = torch.from_numpy(data.y[np.asarray(idx)])[:, None]
        return Batch((x,), y, None)
    src, src_len, tgt_in, tgt, mask = seq_batch([data[i] for i in idx])
    return Batch((src, src_len, tgt_in), tgt, mask)


def model_outputs(model: nn.Module, batch: Batch):
    """Return (main [B,L,K], log_scale [B,L,K] or None)."""
    out = model(*batch.inputs)
    main, log_scale = out if isinstance(out, tuple) else (out, None)
    if main.dim() == 2:
        main = main[:, None, :]
        log_scale = None if log_scale is None else log_scale[:, None, :]
    return main, log_scale


def _steps_of(data, i: int) -> int:
    return 1 if isinstance(data, ToyData) else len(data[i][1])


def _targets_of(data, i: int) -> list[int]:
    return [int(data.y[i])] if isinstance(data, ToyData) else list(data[i][1])


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    schedule: LrSchedule = LrSchedule(kind="constant", eta_max=1e-3)
    label_smoothing: float = 0.0
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")


@dataclass(frozen=True)
class EnsembleSpec:
    kind: str = "deep"  # or "snapshot"
    members: int = 5
    base_seed: int = 0
    train: TrainConfig = TrainConfig()
    # snapshot phase: one cycle of `period` steps per member
    eta_min: float = 1e-4
    eta_max: float = 1e-3
    period: int = 100

    def __post_init__(self):
        if self.kind not in ("deep", "snapshot"):
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        if self.members < 1:
            raise ValueError("ensemble needs at least one member")

    @property
    def cyclic(self) -> LrSchedule:
        return LrSchedule(kind="cyclic", eta_min=self.eta_min, eta_max=self.eta_max, period=self.period)


class _BatchOrder:
    """Epoch-wise shuffled minibatches from a seeded generator."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = np.random.default_rng([seed, 0xBA7C])
        self.perm = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > len(self.perm):
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return np.sort(idx)


def _run(
    model: nn.Module,
    n_examples: int,
    cfg: TrainConfig,
    seed: int,
    loss_fn: Callable[[np.ndarray], dict],
    schedule: LrSchedule | None = None,
    on_step: Callable[[int], None] | None = None,
) -> list[dict]:
    schedule = schedule or cfg.schedule
    order = _BatchOrder(n_examples, cfg.batch_size, seed)
    opt = Adam(model.named_parameters(), betas=cfg.betas, eps=cfg.eps)
    log: list[dict] = []
    model.train()
    for step in range(1, cfg.steps + 1):
        terms = loss_fn(order.next())
        row = {"step": step, "lr": lr_at(schedule, step)}
        for name, value in terms.items():
            v = float(value.detach())
            row[name] = v
            if not math.isfinite(v):
                log.append(row)
                raise TrainingDivergence(step, name, model, log)
        log.append(row)
        backward(terms["total"])
        try:
            opt.step(row["lr"])
        except NonFiniteGradient as err:
            raise TrainingDivergence(step, f"gradient:{err.name}", model, log) from err
        if on_step is not None:
            on_step(step)
    model.eval()
    return log


def train_member(model: nn.Module, data, cfg: TrainConfig, seed: int, schedule=None, on_step=None) -> list[dict]:
    """Plain (label-smoothed) NLL training in place; returns the loss log."""

    def loss_fn(idx):
        b = make_batch(data, idx)
        main, _ = model_outputs(model, b)
        nll = losses.nll_loss(main, b.targets, cfg.label_smoothing, b.mask)
        return {"nll": nll, "total": nll}

    return _run(model, len(data), cfg, seed, loss_fn, schedule, on_step)


def train_deep_ensemble(spec: EnsembleSpec, data, make: ModelFactory) -> list[nn.Module]:
    """``spec.members`` models, member ``m`` initialised and shuffled with seed ``base_seed + m``."""
    members = []
    for m in range(spec.members):
        seed = spec.base_seed + m
        model = make(seed=seed)
        train_member(model, data, spec.train, seed)
        members.append(model)
    return members


def train_snapshot_ensemble(base: nn.Module, spec: EnsembleSpec, data) -> tuple[list[nn.Module], list[float]]:
    """Continue ``base`` under a cyclic schedule; snapshot at the end of every cycle.

    Runs ``members * period`` steps. Returns the snapshots and the learning
    rate applied at every step.
    """
    model = copy.deepcopy(base)
    cfg = TrainConfig(
        steps=spec.members * spec.period,
        batch_size=spec.train.batch_size,
        schedule=spec.cyclic,
        label_smoothing=spec.train.label_smoothing,
        betas=spec.train.betas,
        eps=spec.train.eps,
    )
    snapshots: list[nn.Module] = []

    def on_step(step):
        if step % spec.period == 0:
            snap = copy.deepcopy(model)
            snap.eval()
            snapshots.append(snap)

    log = train_member(model, data, cfg, spec.base_seed, on_step=on_step)
    return snapshots, [row["lr"] for row in log]


# --------------------------------------------------------- teacher outputs


@dataclass
class TeacherOutputs:
    """Normalised member logits per example (``[L, M, K]`` float32) and the
    teacher-forced reference targets they are aligned to."""

    logits: list[np.ndarray]
    targets: list[list[int]]

    def __post_init__(self):
        if len(self.logits) != len(self.targets):
            raise ValueError("one target sequence per example is required")
        shapes = {z.shape[1:] for z in self.logits}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent member/class dimensions {shapes}")
        for i, (z, t) in enumerate(zip(self.logits, self.targets)):
            if z.shape[0] != len(t):
                raise ValueError(f"example {i}: {z.shape[0]} logit steps for {len(t)} targets")

    @property
    def members(self) -> int:
        return self.logits[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.logits[0].shape[2]

    def __len__(self) -> int:
        return len(self.logits)

    def probs(self, i: int) -> np.ndarray:
        return softmax(self.logits[i].astype(np.float64), axis=-1)

    def batch_logits(self, idx: Sequence[int]) -> torch.Tensor:
        """Zero-padded ``[B, L, M, K]`` tensor of normalised logits."""
        L = max(self.logits[i].shape[0] for i in idx)
        out = np.zeros((len(idx), L, self.members, self.num_classes), dtype=np.float32)
        for b, i in enumerate(idx):
            out[b, : self.logits[i].shape[0]] = self.logits[i]
        return torch.from_numpy(out)


def collect_teacher_logits(members: Sequence[nn.Module], data, batch_size: int = 256) -> TeacherOutputs:
    """Teacher-forced member logits on every example, each row LogSumExp-normalised."""
    shapes = {tuple((n, tuple(p.shape)) for n, p in m.named_parameters() if not n.startswith("scale.")) for m in members}
    if len(shapes) != 1:
        raise ValueError("ensemble members do not share one architecture")
    n = len(data)
    out: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = list(range(start, min(n, start + batch_size)))
            b = make_batch(data, idx)
            per_member = [losses.normalize_logits(model_outputs(m, b)[0].double()) for m in members]
            z = torch.stack(per_member, dim=2).to(torch.float32).numpy()  # [B, L, M, K]
            for j, i in enumerate(idx):
                out.append(np.ascontiguousarray(z[j, : _steps_of(data, i)]))
    return TeacherOutputs(out, [_targets_of(data, i) for i in range(n)])


def teacher_cache_bytes(teacher: TeacherOutputs) -> bytes:
    parts = [
        TEACHER_MAGIC,
        struct.pack("<IIII", TEACHER_VERSION, teacher.members, teacher.num_classes, len(teacher)),
    ]
    for z, t in zip(teacher.logits, teacher.targets):
        parts.append(struct.pack("<I", len(t)))
        parts.append(np.asarray(t, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(z, dtype="<f4").tobytes())
    return seal(b"".join(parts))


def parse_teacher_cache(blob: bytes) -> TeacherOutputs:
    rd = Reader(unseal(blob, "teacher cache"), "teacher cache")
    if rd.take(4) != TEACHER_MAGIC:
        raise ValueError("not a teacher-logit cache (bad magic)")
    version = rd.u32()
    if version != TEACHER_VERSION:
        raise ValueError(f"unsupported teacher cache version {version}")
    M, K, count = rd.u32(), rd.u32(), rd.u32()
    logits, targets = [], []
    for _ in range(count):
        L = rd.u32()
        targets.append(rd.u32s(L).tolist())
        logits.append(rd.f32(L * M * K).reshape(L, M, K))
    if not rd.exhausted:
        raise ValueError("trailing bytes in teacher cache")
    return TeacherOutputs(logits, targets)


def save_teacher_cache(teacher: TeacherOutputs, path) -> None:
    atomic_write_bytes(path, teacher_cache_bytes(teacher))


def load_teacher_cache(path) -> TeacherOutputs:
    return parse_teacher_cache(Path(path).read_bytes())


# ------------------------------------------------------------ distillation

STUDENT_FAMILIES = ("kd", "edd-dirichlet", "ledd-gaussian", "ledd-laplace")


@dataclass(frozen=True)
class DistillSpec:
    family: str = "ledd-laplace"
    kd: KDConfig = KDConfig()
    beta: float = 0.1
    train: TrainConfig = TrainConfig()
    init_from_teacher: bool = True
    teacher_member: int = 0
    kd_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in STUDENT_FAMILIES:
            raise ValueError(f"unknown student family {self.family!r}")
        if self.beta < 0 or self.kd_weight < 0:
            raise ValueError("beta and kd_weight must be non-negative")

    @property
    def has_scale_head(self) -> bool:
        return self.family.startswith("ledd")

    @property
    def edd(self) -> EDDConfig:
        family = {"ledd-laplace": "laplace-logit", "ledd-gaussian": "gaussian-logit"}.get(self.family, "dirichlet")
        return EDDConfig(beta=self.beta, family=family)


def copy_trunk(src: nn.Module, dst: nn.Module) -> None:
    """Copy every parameter of ``src`` into ``dst`` except a scale head."""
    src_params = dict(src.named_parameters())
    with torch.no_grad():
        for name, p in dst.named_parameters():
            if name.startswith("scale."):
                continue
            if name not in src_params or src_params[name].shape != p.shape:
                raise ValueError(f"teacher member does not match student parameter {name!r}")
            p.copy_(src_params[name])


def distill_terms(spec: DistillSpec, student: nn.Module, batch: Batch, teacher_logits: torch.Tensor) -> dict:
    """Loss components of one batch. ``total`` is the optimised quantity and
    always equals ``weighted_kd + weighted_edd``."""
    main, log_scale = model_outputs(student, batch)
    z = teacher_logits
    if spec.family == "kd":
        teacher = torch.softmax(z.double(), dim=-1).mean(dim=-2)
        t = losses.kd_terms(teacher, main, batch.targets, spec.kd, batch.mask)
        zero = torch.zeros((), dtype=torch.float64)
        return {"nll": t["nll"], "kl": t["kl"], "edd": zero, "weighted_kd": t["kd"], "weighted_edd": zero, "total": t["kd"]}
    if spec.family == "edd-dirichlet":
        alpha = torch.exp(main.double())
        if not torch.isfinite(alpha).all():
            return {"total": torch.tensor(float("inf")), "alpha": torch.tensor(float("inf"))}
        edd = losses.dirichlet_edd_loss(alpha, torch.softmax(z.double(), dim=-1), batch.mask)
        zero = torch.zeros((), dtype=torch.float64)
        return {"nll": zero, "kl": zero, "edd": edd, "weighted_kd": zero, "weighted_edd": edd, "total": edd}
    sigma = torch.exp(log_scale.double())
    if not torch.isfinite(sigma).all() or torch.any(sigma <= 0):
        return {"total": torch.tensor(float("inf")), "sigma": torch.tensor(float("inf"))}
    t = losses.ledd_terms(main, sigma, z, batch.targets, spec.kd, spec.edd, batch.mask, spec.kd_weight)
    zero = torch.zeros((), dtype=torch.float64)
    return {
        "nll": t.get("nll", zero),
        "kl": t.get("kl", zero),
        "edd": t["edd"],
        "weighted_kd": spec.kd_weight * t["kd"] if "kd" in t else zero,
        "weighted_edd": spec.beta * t["edd"],
        "total": t["total"],
    }


def distill(
    spec: DistillSpec,
    teacher: TeacherOutputs,
    data,
    make: ModelFactory,
    members: Sequence[nn.Module] | None = None,
) -> tuple[nn.Module, list[dict]]:
    """Train a student of ``spec.family`` on teacher-forced teacher outputs.

    With ``init_from_teacher`` the student trunk starts as a copy of
    ``members[teacher_member]``; a scale head always starts at zero.
    Raises :class:`TrainingDivergence` if any term goes non-finite.
    """
    if len(teacher) != len(data):
        raise ValueError(f"teacher has {len(teacher)} examples, dataset has {len(data)}")
    for i in range(len(data)):
        if teacher.logits[i].shape[0] != _steps_of(data, i):
            raise ValueError(f"teacher is not aligned with example {i}")
    student = make(seed=spec.seed, scale_head=spec.has_scale_head)
    if spec.init_from_teacher:
        if not members:
            raise ValueError("init_from_teacher needs the teacher members")
        copy_trunk(members[spec.teacher_member], student)

    def loss_fn(idx):
        b = make_batch(data, idx)
        return distill_terms(spec, student, b, teacher.batch_logits(idx))

    log = _run(student, len(data), spec.train, spec.seed, loss_fn)
    return student, log


# ---------------------------------------------------- augmented ensemble


def augmented_ensemble_scores(step_logits, n_samples: int, rng: RngStream, decoded=None) -> UncertaintyScores:
    """Fit a per-step Laplace to member logits ``[L, M, K]`` and score samples from it."""
    z = np.asarray(step_logits, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"expected [L, M, K] logits, got shape {z.shape}")
    if z.shape[1] < 2:
        raise ValueError("augmented scoring needs at least 2 members per step")
    fit = fit_laplace_mle(z.transpose(1, 0, 2))
    return sample_scores(fit.mu, fit.sigma, "laplace-logit", n_samples, rng, decoded)


# --------------------------------------------------- model-level scoring


def member_step_logits(members: Sequence[nn.Module], src: Sequence[int], decoded: Sequence[int]) -> np.ndarray:
    """Normalised logits ``[L, M, K]`` of every member on one shared hypothesis."""
    from .nncore import forward_seq

    rows = []
    with torch.no_grad():
        for m in members:
            out = forward_seq(m, src, decoded)
            main = out[0] if isinstance(out, tuple) else out
            rows.append(losses.normalize_logits(main.double()).numpy())
    return np.stack(rows, axis=1)


@dataclass
class ScoredSequence:
    decoded: list[int]
    truncated: bool
    scores: UncertaintyScores
    extra: dict = field(default_factory=dict)
