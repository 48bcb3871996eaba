"""Experiment configuration: a strict YAML schema mapped onto frozen dataclasses.

Unknown keys are rejected, every numeric field is range-checked, and all
violations are reported together. ``dump(parse(text))`` round-trips, and
:func:`config_hash` is a SHA-256 over a canonical JSON rendering.

Schema (all sections and keys optional; defaults shown by the dataclasses)::

    seed: 0
    out: runs/default
    ensemble_dir: ""          # read members/teacher cache from here instead of `out`
    task:
      kind: toy | seq
      toy: {centers: [[x, y], ...], stds: [...], per_class: 1000}
      seq: {vocab_size, n_held_out, min_len, max_len, length_shape, reorder_window,
            noise, train_count, test_count}
    model: {hidden: [64, 64], emb_dim: 32, hid_dim: 64}
    ensemble: {kind: deep | snapshot, members, steps, batch_size, label_smoothing,
               schedule: {...}, eta_min, eta_max, period}
    distill: {families: [...], lam, temperature, label_smoothing, beta, kd_weight,
              init_from_teacher, teacher_member, steps, batch_size, schedule: {...}}
    eval: {shifts: [{kind, magnitude}], samples, beam, length_penalty, ood_count,
           resolution}

A ``schedule`` block is ``{kind: constant | inverse-sqrt | cyclic, eta_max,
eta_min, warmup, d_model, scale, period}``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .ensembles import STUDENT_FAMILIES
from .nncore import LrSchedule
from .seqtask import OodShift, SeqTaskSpec, ToySpec


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violated field."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "constant"
    eta_max: float = 3e-3
    eta_min: float = 1e-4
    warmup: int = 4000
    d_model: int = 512
    scale: float = 1.0
    period: int = 100

    def build(self) -> LrSchedule:
        return LrSchedule(
            kind=self.kind, warmup=self.warmup, d_model=self.d_model, scale=self.scale,
            eta_min=self.eta_min, eta_max=self.eta_max, period=self.period,
        )


@dataclass(frozen=True)
class ToyTaskConfig:
    centers: tuple[tuple[float, float], ...] = ((0.0, 0.0), (3.0, 0.0), (1.5, 2.6))
    stds: tuple[float, ...] = (1.0, 1.0, 1.0)
    per_class: int = 1000


@dataclass(frozen=True)
class SeqTaskConfig:
    vocab_size: int = 64
    n_held_out: int = 16
    min_len: int = 3
    max_len: int = 10
    length_shape: str = "uniform"
    reorder_window: int = 2
    noise: float = 0.1
    train_count: int = 3000
    test_count: int = 200


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "toy"
    toy: ToyTaskConfig = ToyTaskConfig()
    seq: SeqTaskConfig = SeqTaskConfig()


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    emb_dim: int = 32
    hid_dim: int = 64


@dataclass(frozen=True)
class EnsembleConfig:
    kind: str = "deep"
    members: int = 5
    steps: int = 1500
    batch_size: int = 64
    label_smoothing: float = 0.1
    schedule: ScheduleConfig = ScheduleConfig()
    eta_min: float = 1e-4
    eta_max: float = 1e-3
    period: int = 300


@dataclass(frozen=True)
class DistillConfig:
    families: tuple[str, ...] = ("kd", "ledd-laplace")
    lam: float = 0.5
    temperature: float = 0.8
    label_smoothing: float = 0.1
    beta: float = 0.1
    kd_weight: float = 1.0
    init_from_teacher: bool = True
    teacher_member: int = 0
    steps: int = 1500
    batch_size: int = 64
    schedule: ScheduleConfig = ScheduleConfig()


@dataclass(frozen=True)
class ShiftConfig:
    kind: str = "length-shift"
    magnitude: float = 2.0


@dataclass(frozen=True)
class EvalConfig:
    shifts: tuple[ShiftConfig, ...] = (ShiftConfig(),)
    samples: int = 32
    beam: int = 4
    length_penalty: float = 0.6
    ood_count: int = 200
    resolution: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    ensemble_dir: str = ""
    task: TaskConfig = TaskConfig()
    model: ModelConfig = ModelConfig()
    ensemble: EnsembleConfig = EnsembleConfig()
    distill: DistillConfig = DistillConfig()
    eval: EvalConfig = EvalConfig()

    def toy_spec(self) -> ToySpec:
        t = self.task.toy
        return ToySpec(centers=t.centers, stds=t.stds, per_class=t.per_class, seed=self.seed)

    def seq_spec(self) -> SeqTaskSpec:
        s = self.task.seq
        return SeqTaskSpec(
            vocab_size=s.vocab_size, n_held_out=s.n_held_out, min_len=s.min_len, max_len=s.max_len,
            length_shape=s.length_shape, reorder_window=s.reorder_window, noise=s.noise, seed=self.seed,
        )

    def shifts(self) -> list[OodShift]:
        return [OodShift(s.kind, s.magnitude) for s in self.eval.shifts]


# ------------------------------------------------------------------ parsing


_BAD = object()  # marks a field that failed conversion; its default is used instead


def _convert(tp, value, path: str, errors: list[str]):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, errors)
    if typing.get_origin(tp) is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            errors.append(f"{path}: expected a list, got {type(value).__name__}")
            return _BAD
        if len(args) == 2 and args[1] is Ellipsis:
            items = [_convert(args[0], v, f"{path}[{i}]", errors) for i, v in enumerate(value)]
        elif len(value) != len(args):
            errors.append(f"{path}: expected {len(args)} entries, got {len(value)}")
            return _BAD
        else:
            items = [_convert(a, v, f"{path}[{i}]", errors) for i, (a, v) in enumerate(zip(args, value))]
        return _BAD if any(x is _BAD for x in items) else tuple(items)
    if tp is bool:
        if isinstance(value, bool):
            return value
        errors.append(f"{path}: expected true/false, got {value!r}")
        return _BAD
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        errors.append(f"{path}: expected an integer, got {value!r}")
        return _BAD
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (1e-3) as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        errors.append(f"{path}: expected a number, got {value!r}")
        return _BAD
    if tp is str:
        if isinstance(value, str):
            return value
        errors.append(f"{path}: expected a string, got {value!r}")
        return _BAD
    raise TypeError(f"unsupported config field type {tp!r}")


def _build(cls, raw, path: str, errors: list[str]):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{path or '<root>'}: expected a mapping, got {type(raw).__name__}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in raw:
        if key not in names:
            errors.append(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for name in names:
        if name in raw:
            value = _convert(hints[name], raw[name], f"{path + '.' if path else ''}{name}", errors)
            if value is not _BAD:
                kwargs[name] = value
    return cls(**kwargs)


def _check(errors: list[str], ok: bool, message: str) -> None:
    if not ok:
        errors.append(message)


def _validate_schedule(s: ScheduleConfig, path: str, errors: list[str]) -> None:
    try:
        s.build()
    except ValueError as err:
        errors.append(f"{path}: {err}")


def validate(cfg: ExperimentConfig) -> list[str]:
    """Range checks that need more than a type; returns every violation."""
    e: list[str] = []
    _check(e, cfg.seed >= 0, "seed: must be >= 0")
    _check(e, cfg.task.kind in ("toy", "seq"), f"task.kind: must be toy or seq, got {cfg.task.kind!r}")
    if cfg.ensemble_dir:
        _check(e, Path(cfg.ensemble_dir).is_dir(), f"ensemble_dir: directory {cfg.ensemble_dir!r} does not exist")
    t = cfg.task.toy
    _check(e, len(t.centers) >= 2, "task.toy.centers: need at least two classes")
    _check(e, len(t.centers) == len(t.stds), "task.toy.stds: one standard deviation per centre")
    _check(e, all(s > 0 for s in t.stds), "task.toy.stds: must be > 0")
    _check(e, t.per_class >= 1, "task.toy.per_class: must be >= 1")
    s = cfg.task.seq
    _check(e, 8 <= s.vocab_size <= 4096, "task.seq.vocab_size: must lie in [8, 4096]")
    _check(e, 0 <= s.n_held_out <= s.vocab_size - 5, "task.seq.n_held_out: leaves fewer than 2 in-distribution symbols")
    _check(e, 1 <= s.min_len <= s.max_len <= 200, "task.seq: need 1 <= min_len <= max_len <= 200")
    _check(e, s.length_shape in ("uniform", "triangular"), "task.seq.length_shape: must be uniform or triangular")
    _check(e, s.reorder_window >= 1, "task.seq.reorder_window: must be >= 1")
    _check(e, 0.0 <= s.noise <= 1.0, "task.seq.noise: must lie in [0, 1]")
    _check(e, s.train_count >= 1, "task.seq.train_count: must be >= 1")
    _check(e, s.test_count >= 2, "task.seq.test_count: must be >= 2")
    m = cfg.model
    _check(e, len(m.hidden) >= 1 and all(h >= 1 for h in m.hidden), "model.hidden: need at least one positive width")
    _check(e, m.emb_dim >= 1, "model.emb_dim: must be >= 1")
    _check(e, m.hid_dim >= 1, "model.hid_dim: must be >= 1")
    en = cfg.ensemble
    _check(e, en.kind in ("deep", "snapshot"), f"ensemble.kind: must be deep or snapshot, got {en.kind!r}")
    _check(e, en.members >= 1, "ensemble.members: must be >= 1")
    _check(e, en.steps >= 1, "ensemble.steps: must be >= 1")
    _check(e, en.batch_size >= 1, "ensemble.batch_size: must be >= 1")
    _check(e, 0.0 <= en.label_smoothing < 1.0, "ensemble.label_smoothing: must lie in [0, 1)")
    _check(e, 0 < en.eta_min < en.eta_max, "ensemble: need 0 < eta_min < eta_max")
    _check(e, en.period >= 2, "ensemble.period: must be >= 2")
    _validate_schedule(en.schedule, "ensemble.schedule", e)
    d = cfg.distill
    for i, fam in enumerate(d.families):
        _check(e, fam in STUDENT_FAMILIES, f"distill.families[{i}]: unknown family {fam!r}")
    _check(e, len(set(d.families)) == len(d.families), "distill.families: duplicates")
    _check(e, 0.0 <= d.lam <= 1.0, "distill.lam: must lie in [0, 1]")
    _check(e, d.temperature > 0, "distill.temperature: must be > 0")
    _check(e, 0.0 <= d.label_smoothing < 1.0, "distill.label_smoothing: must lie in [0, 1)")
    _check(e, d.beta >= 0, "distill.beta: must be >= 0")
    _check(e, d.kd_weight >= 0, "distill.kd_weight: must be >= 0")
    _check(e, 0 <= d.teacher_member < max(en.members, 1), "distill.teacher_member: must index an ensemble member")
    _check(e, d.steps >= 1, "distill.steps: must be >= 1")
    _check(e, d.batch_size >= 1, "distill.batch_size: must be >= 1")
    _validate_schedule(d.schedule, "distill.schedule", e)
    ev = cfg.eval
    for i, sh in enumerate(ev.shifts):
        try:
            OodShift(sh.kind, sh.magnitude)
        except ValueError as err:
            e.append(f"eval.shifts[{i}]: {err}")
    _check(e, ev.samples >= 2, "eval.samples: must be >= 2")
    _check(e, ev.beam >= 1, "eval.beam: must be >= 1")
    _check(e, ev.length_penalty >= 0, "eval.length_penalty: must be >= 0")
    _check(e, ev.ood_count >= 1, "eval.ood_count: must be >= 1")
    _check(e, 1 <= ev.resolution <= 1000, "eval.resolution: must lie in [1, 1000]")
    return e


def from_dict(raw) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _build(ExperimentConfig, raw, "", errors)
    errors += validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def parse(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError([f"not valid YAML: {err}"]) from err
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text())


def to_dict(cfg) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    return plain(cfg)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def derive_seed(seed: int, *tags) -> int:
    """Deterministic 32-bit sub-seed for a named component of a run."""
    words = [int(seed)]
    for tag in tags:
        words.append(int(tag) if isinstance(tag, int) else int.from_bytes(hashlib.sha256(str(tag).encode()).digest()[:4], "little"))
    return int(np.random.SeedSequence(words).generate_state(1)[0])
