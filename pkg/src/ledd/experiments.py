"""Experiment pipelines that chain data, training, distillation and evaluation.

These functions are pure in the sense that they take a config and return
results; the command-line layer owns all file output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import evalkit
from .config import ExperimentConfig, derive_seed
from .distributions import RngStream
from .ensembles import (
    DistillSpec,
    EnsembleSpec,
    TeacherOutputs,
    TrainConfig,
    TrainingDivergence,
    augmented_ensemble_scores,
    collect_teacher_logits,
    distill,
    member_step_logits,
    train_deep_ensemble,
    train_member,
    train_snapshot_ensemble,
)
from .losses import KDConfig
from .nncore import MlpModel, TinySeqModel, decode, forward_seq
from .seqtask import ToyData, gen_ood_dataset, gen_seq_dataset, gen_toy
from .uncertainty import UncertaintyScores, dirichlet_scores, entropy, sequence_scores, student_sample_scores

GRID_KIND = {"kd": "kd", "edd-dirichlet": "dirichlet", "ledd-laplace": "laplace-logit", "ledd-gaussian": "gaussian-logit"}
LOGIT_FAMILY = {"ledd-laplace": "laplace-logit", "ledd-gaussian": "gaussian-logit"}


# ---------------------------------------------------------------- builders


def model_factory(cfg: ExperimentConfig):
    """``make(seed, scale_head=False)`` for the configured architecture."""
    if cfg.task.kind == "toy":
        widths = [2, *cfg.model.hidden, len(cfg.task.toy.centers)]

        def make(seed: int = 0, scale_head: bool = False):
            return MlpModel(widths, scale_head=scale_head, seed=seed)

    else:
        vocab, emb, hid = cfg.task.seq.vocab_size, cfg.model.emb_dim, cfg.model.hid_dim

        def make(seed: int = 0, scale_head: bool = False):
            return TinySeqModel(vocab, emb_dim=emb, hid_dim=hid, scale_head=scale_head, seed=seed)

    return make


def train_data(cfg: ExperimentConfig):
    if cfg.task.kind == "toy":
        return gen_toy(cfg.toy_spec())
    return gen_seq_dataset(cfg.seq_spec(), cfg.task.seq.train_count, stream=0)


def test_pairs(cfg: ExperimentConfig):
    return gen_seq_dataset(cfg.seq_spec(), cfg.task.seq.test_count, stream=1)


def ood_sources(cfg: ExperimentConfig) -> dict[str, list[list[int]]]:
    out = {}
    for i, shift in enumerate(cfg.shifts()):
        name = f"{shift.kind}-{shift.magnitude:g}"
        out[name] = gen_ood_dataset(cfg.seq_spec(), shift, cfg.eval.ood_count, stream=100 + i)
    return out


def ensemble_spec(cfg: ExperimentConfig) -> EnsembleSpec:
    e = cfg.ensemble
    return EnsembleSpec(
        kind=e.kind,
        members=e.members,
        base_seed=derive_seed(cfg.seed, "ensemble"),
        train=TrainConfig(steps=e.steps, batch_size=e.batch_size, schedule=e.schedule.build(), label_smoothing=e.label_smoothing),
        eta_min=e.eta_min,
        eta_max=e.eta_max,
        period=e.period,
    )


def distill_spec(cfg: ExperimentConfig, family: str) -> DistillSpec:
    d = cfg.distill
    return DistillSpec(
        family=family,
        kd=KDConfig(lam=d.lam, temperature=d.temperature, label_smoothing=d.label_smoothing),
        beta=d.beta,
        train=TrainConfig(steps=d.steps, batch_size=d.batch_size, schedule=d.schedule.build()),
        init_from_teacher=d.init_from_teacher,
        teacher_member=d.teacher_member,
        kd_weight=d.kd_weight,
        seed=derive_seed(cfg.seed, "distill"),
    )


def train_ensemble(cfg: ExperimentConfig, data, make) -> tuple[list, list[float] | None]:
    """Members of the configured ensemble, plus the lr trace for snapshot runs."""
    spec = ensemble_spec(cfg)
    if spec.kind == "deep":
        return train_deep_ensemble(spec, data, make), None
    base = make(seed=spec.base_seed)
    train_member(base, data, spec.train, spec.base_seed)
    return train_snapshot_ensemble(base, spec, data)


# --------------------------------------------------------------------- toy


@dataclass
class ToyResult:
    data: ToyData
    members: list
    teacher: TeacherOutputs
    grids: dict[str, evalkit.GridEval] = field(default_factory=dict)
    students: dict = field(default_factory=dict)
    logs: dict[str, list[dict]] = field(default_factory=dict)
    diverged: dict[str, TrainingDivergence] = field(default_factory=dict)

    def confidence_correlation(self, method: str) -> float:
        """Pearson correlation of a method's confidence grid with the ensemble's."""
        return evalkit.pearson(self.grids[method].confidence.ravel(), self.grids["ensemble"].confidence.ravel())


def toy_grid(result: ToyResult, method: str, bounds, resolution: int) -> evalkit.GridEval:
    if method == "ensemble":
        return evalkit.grid_eval(result.members, "ensemble", bounds, resolution)
    return evalkit.grid_eval(result.students[method], GRID_KIND[method], bounds, resolution, teacher=result.members)


def run_toy(cfg: ExperimentConfig, families=("kd", "edd-dirichlet", "ledd-laplace")) -> ToyResult:
    """Train the ensemble, distil it with every family and evaluate all grids.

    A family whose training goes non-finite is recorded in ``diverged``; its
    partially trained model is still evaluated when its outputs are finite.
    """
    if cfg.task.kind != "toy":
        raise ValueError("the toy pipeline needs task.kind = toy")
    make = model_factory(cfg)
    data = train_data(cfg)
    members, _ = train_ensemble(cfg, data, make)
    teacher = collect_teacher_logits(members, data)
    result = ToyResult(data, members, teacher)
    bounds = data.bounds()
    result.grids["ensemble"] = toy_grid(result, "ensemble", bounds, cfg.eval.resolution)
    for fam in families:
        try:
            student, log = distill(distill_spec(cfg, fam), teacher, data, make, members)
        except TrainingDivergence as div:
            result.diverged[fam] = div
            student, log = div.model, div.log
        result.students[fam] = student
        result.logs[fam] = log
        try:
            grid = toy_grid(result, fam, bounds, cfg.eval.resolution)
        except ValueError:
            if fam not in result.diverged:
                raise
            continue
        if np.all(np.isfinite(grid.confidence)):
            result.grids[fam] = grid
    return result


# ------------------------------------------------------- sequence scoring


@dataclass
class ScoredSet:
    """Decoded hypotheses and their uncertainty scores for one source set."""

    name: str
    hypotheses: list[list[int]]
    truncated: list[bool]
    scores: list[UncertaintyScores]

    @property
    def lengths(self) -> list[int]:
        return [len(h) for h in self.hypotheses]

    def measure(self, name: str) -> list[float]:
        attr = {"TU": "total", "KU": "knowledge", "DU": "data"}[name]
        return [getattr(s, attr) for s in self.scores]


def source_stream(rng: RngStream, src) -> RngStream:
    """Sampling stream keyed by the source tokens, so a sequence's score does
    not depend on which set it appears in or at what position."""
    return rng.child(derive_seed(0, " ".join(map(str, src))))


def score_ensemble(members, sources, beam: int, length_penalty: float, name: str = "",
                   augmented: tuple[int, RngStream] | None = None) -> tuple[ScoredSet, ScoredSet | None]:
    """Decode with the member average, then score raw members on the shared
    hypothesis; with ``augmented=(S, rng)`` also score the Laplace-fit
    samples of the same member logits, drawn from :func:`source_stream`."""
    hyps, trunc, raw, aug = [], [], [], []
    for i, src in enumerate(sources):
        h = decode(members, src, beam=beam, length_penalty=length_penalty)
        z = member_step_logits(members, src, h.tokens)
        hyps.append(h.tokens)
        trunc.append(h.truncated)
        raw.append(sequence_scores(z, h.tokens))
        if augmented is not None:
            n_samples, rng = augmented
            aug.append(augmented_ensemble_scores(z, n_samples, source_stream(rng, src), h.tokens))
    raw_set = ScoredSet(name, hyps, trunc, raw)
    return raw_set, (ScoredSet(name, hyps, trunc, aug) if augmented is not None else None)


def score_student(student, family: str, sources, beam: int, length_penalty: float, n_samples: int,
                  rng: RngStream, name: str = "") -> ScoredSet:
    """Decode a student and score it. KD students get TU only (KU is NaN)."""
    hyps, trunc, scores = [], [], []
    for i, src in enumerate(sources):
        h = decode(student, src, beam=beam, length_penalty=length_penalty)
        hyps.append(h.tokens)
        trunc.append(h.truncated)
        if family in LOGIT_FAMILY:
            scores.append(student_sample_scores(student, src, h.tokens, n_samples, source_stream(rng, src), LOGIT_FAMILY[family]))
            continue
        with torch.no_grad():
            z = forward_seq(student, src, h.tokens).double()
        if family == "edd-dirichlet":
            scores.append(dirichlet_scores(torch.exp(z).numpy(), h.tokens))
        else:
            tu = float(entropy(torch.softmax(z, -1).numpy()).mean())
            scores.append(UncertaintyScores(tu, float("nan"), float("nan")))
    return ScoredSet(name, hyps, trunc, scores)


def measures_for(model_name: str) -> tuple[str, ...]:
    return ("TU",) if model_name == "kd" else ("TU", "KU")


def detection_reports(scored: dict[str, dict[str, ScoredSet]], id_name: str = "id") -> list[evalkit.DetectionReport]:
    """One report per (model, measure, OOD set); ``scored[model][set]``."""
    reports = []
    for model_name, sets in scored.items():
        for ood_name, ood in sets.items():
            if ood_name == id_name:
                continue
            for measure in measures_for(model_name):
                reports.append(evalkit.DetectionReport(
                    sets[id_name].measure(measure), ood.measure(measure), measure, model_name, id_name, ood_name,
                ))
    return reports


def length_pcc(sets: dict[str, ScoredSet], id_name: str, ood_name: str) -> float:
    """PCC between decoded length and TU over the merged ID and OOD sets."""
    lengths = sets[id_name].lengths + sets[ood_name].lengths
    tu = sets[id_name].measure("TU") + sets[ood_name].measure("TU")
    return evalkit.pearson(lengths, tu)
