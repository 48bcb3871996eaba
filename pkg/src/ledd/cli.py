"""Command-line entry point.

    ledd <subcommand> --config PATH [--seed N] [--out DIR]

Subcommands: train-ensemble, distill, detect, toy, augmented, analyze.
Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 I/O error (missing or corrupt inputs), 1 anything else.

Output layout under ``--out``::

    data/                     generated datasets (toy CSV or token-line files)
    members/member_NN.ckpt    ensemble checkpoints
    teacher.eddl              teacher-logit cache
    lr_trace.csv              per-step learning rate (snapshot ensembles)
    students/<family>.ckpt    distilled students, with <family>_curve.csv
    detect/, augmented/       summary.csv, sequences.csv, scores/*.csv
    analyze/pcc.csv           length-vs-TU correlations
    toy/                      data, per-method grid.csv / loss.svg / confidence.svg
    manifest-<subcommand>.json
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as C
from . import evalkit
from . import experiments as X
from ._io import atomic_write_text, file_sha256
from .distributions import RngStream
from .ensembles import TrainingDivergence, collect_teacher_logits, distill, load_teacher_cache, save_teacher_cache
from .nncore import load_checkpoint, save_checkpoint
from .seqtask import read_parallel, read_toy_csv, read_token_lines, write_parallel, write_token_lines

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4
CURVE_COLUMNS = ("step", "lr", "nll", "kl", "edd", "weighted_kd", "weighted_edd", "total")


class InputError(OSError):
    """A required input artifact is missing or unreadable."""


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Run:
    """Collects artifacts of one subcommand and writes its manifest."""

    def __init__(self, command: str, cfg: C.ExperimentConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.artifacts: list[Path] = []
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        atomic_write_text(p, text)
        return self.add(p)

    def add(self, p: Path) -> Path:
        self.artifacts.append(Path(p))
        return Path(p)

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        self.timings[name] = round(now - self._t0, 3)

    def manifest(self) -> Path:
        missing = [str(p) for p in self.artifacts if not p.exists()]
        if missing:
            raise InputError(f"declared artifacts missing: {missing}")
        import ledd

        body = {
            "command": self.command,
            "config_hash": C.config_hash(self.cfg),
            "seed": self.cfg.seed,
            "artifacts": {str(p.relative_to(self.out)): file_sha256(p) for p in sorted(set(self.artifacts))},
            "timings_s": self.timings,
            "versions": {
                "ledd": getattr(ledd, "__version__", "0"),
                "python": platform.python_version(),
                "numpy": np.__version__,
                "torch": torch.__version__,
            },
        }
        p = self.out / f"manifest-{self.command}.json"
        atomic_write_text(p, json.dumps(body, indent=2, sort_keys=True) + "\n")
        return p


# ----------------------------------------------------------------- loading


def _source_dir(cfg: C.ExperimentConfig) -> Path:
    return Path(cfg.ensemble_dir or cfg.out)


def _load_members(cfg: C.ExperimentConfig):
    paths = sorted((_source_dir(cfg) / "members").glob("member_*.ckpt"))
    if not paths:
        raise InputError(f"no ensemble checkpoints under {_source_dir(cfg) / 'members'}; run train-ensemble first")
    make = X.model_factory(cfg)
    return [_read(load_checkpoint, make(seed=0), p) for p in paths]


def _read(loader, *args):
    """Run a file loader, reporting corrupt content as an input error."""
    try:
        return loader(*args)
    except ValueError as err:
        raise InputError(f"{args[-1]}: {err}") from err


def _load_train_data(cfg: C.ExperimentConfig):
    base = _source_dir(cfg) / "data"
    try:
        if cfg.task.kind == "toy":
            return read_toy_csv(base / "train.csv")
        return read_parallel(base / "train")
    except FileNotFoundError as err:
        raise InputError(f"training data missing: {err.filename}") from err


def _load_student(cfg: C.ExperimentConfig, family: str):
    p = Path(cfg.out) / "students" / f"{family}.ckpt"
    if not p.exists():
        raise InputError(f"student checkpoint {p} missing; run distill first")
    spec = X.distill_spec(cfg, family)
    return _read(load_checkpoint, X.model_factory(cfg)(seed=0, scale_head=spec.has_scale_head), p)


def _require_seq(cfg: C.ExperimentConfig, command: str) -> None:
    if cfg.task.kind != "seq":
        raise C.ConfigError([f"task.kind: {command} needs the sequence task"])


def _eval_sources(cfg: C.ExperimentConfig) -> dict[str, list[list[int]]]:
    base = _source_dir(cfg) / "data"
    try:
        sets = {"id": [s for s, _ in read_parallel(base / "test")]}
        for name in X.ood_sources(cfg):
            sets[name] = read_token_lines(base / f"ood_{name}.src")
    except FileNotFoundError as err:
        raise InputError(f"evaluation data missing: {err.filename}") from err
    return sets


# ---------------------------------------------------------------- commands


def _curve_csv(log: list[dict]) -> str:
    return _csv(CURVE_COLUMNS, [[_fmt(row.get(c, float("nan"))) for c in CURVE_COLUMNS] for row in log])


def _divergence_csv(div: TrainingDivergence) -> str:
    return _csv(("step", "term"), [[div.step, div.term]])


def cmd_train_ensemble(cfg: C.ExperimentConfig, run: Run) -> int:
    make = X.model_factory(cfg)
    data = X.train_data(cfg)
    if cfg.task.kind == "toy":
        run.text("data/train.csv", data.to_csv())
    else:
        run.artifacts += write_parallel(run.path("data/train"), data)
        run.artifacts += write_parallel(run.path("data/test"), X.test_pairs(cfg))
        for name, srcs in X.ood_sources(cfg).items():
            p = run.path(f"data/ood_{name}.src")
            write_token_lines(p, srcs)
            run.add(p)
    run.lap("data")
    for stale in run.path("members/x").parent.glob("member_*.ckpt"):
        stale.unlink()
    members, lr_trace = X.train_ensemble(cfg, data, make)
    run.lap("train")
    for m, model in enumerate(members):
        p = run.path(f"members/member_{m:02d}.ckpt")
        save_checkpoint(model, p)
        run.add(p)
    if lr_trace is not None:
        run.text("lr_trace.csv", _csv(("step", "lr"), [[i + 1, repr(lr)] for i, lr in enumerate(lr_trace)]))
    p = run.path("teacher.eddl")
    save_teacher_cache(collect_teacher_logits(members, data), p)
    run.add(p)
    run.lap("teacher")
    return EXIT_OK


def cmd_distill(cfg: C.ExperimentConfig, run: Run) -> int:
    data = _load_train_data(cfg)
    cache = _source_dir(cfg) / "teacher.eddl"
    members = None
    if cfg.distill.init_from_teacher or not cache.exists():
        members = _load_members(cfg)
    teacher = _read(load_teacher_cache, cache) if cache.exists() else collect_teacher_logits(members, data)
    make = X.model_factory(cfg)
    status = EXIT_OK
    for fam in cfg.distill.families:
        try:
            student, log = distill(X.distill_spec(cfg, fam), teacher, data, make, members)
        except TrainingDivergence as div:
            run.text(f"students/{fam}_curve.csv", _curve_csv(div.log))
            run.text(f"students/{fam}_divergence.csv", _divergence_csv(div))
            print(f"{fam}: {div}", file=sys.stderr)
            status = EXIT_DIVERGED
            continue
        p = run.path(f"students/{fam}.ckpt")
        save_checkpoint(student, p)
        run.add(p)
        run.text(f"students/{fam}_curve.csv", _curve_csv(log))
        run.lap(fam)
    return status


def _sequence_rows(scored: dict[str, dict[str, X.ScoredSet]]):
    rows = []
    for model_name, sets in scored.items():
        for set_name, s in sets.items():
            for i, (h, tr, sc) in enumerate(zip(s.hypotheses, s.truncated, s.scores)):
                rows.append([model_name, set_name, i, len(h), int(tr), repr(sc.total), repr(sc.knowledge), repr(sc.data)])
    return rows


def _write_detection(run: Run, prefix: str, scored: dict[str, dict[str, X.ScoredSet]]) -> list:
    reports = X.detection_reports(scored)
    summary = []
    for rep in reports:
        rel = f"{prefix}/scores/{rep.model}_{rep.measure}_{rep.ood_name}.csv"
        run.text(rel, rep.to_csv())
        summary.append([rep.model, rep.measure, rep.id_name, rep.ood_name, repr(rep.auroc)])
    pcc_rows = []
    for model_name, sets in scored.items():
        for ood_name in sets:
            if ood_name != "id":
                pcc_rows.append([model_name, ood_name, _pcc_or_nan(sets, ood_name)])
    run.text(f"{prefix}/summary.csv", _csv(("model", "measure", "id", "ood", "auroc"), summary))
    run.text(f"{prefix}/pcc.csv", _csv(("model", "ood", "pcc_length_tu"), pcc_rows))
    run.text(f"{prefix}/sequences.csv", _csv(
        ("model", "set", "index", "length", "truncated", "tu", "ku", "du"), _sequence_rows(scored)))
    return reports


def _pcc_or_nan(sets, ood_name) -> str:
    try:
        return repr(X.length_pcc(sets, "id", ood_name))
    except evalkit.UndefinedCorrelation:
        return "nan"


def cmd_detect(cfg: C.ExperimentConfig, run: Run) -> int:
    _require_seq(cfg, "detect")
    members = _load_members(cfg)
    students = {fam: _load_student(cfg, fam) for fam in cfg.distill.families}
    sources = _eval_sources(cfg)
    ev = cfg.eval
    rng = RngStream(C.derive_seed(cfg.seed, "detect"))
    scored: dict[str, dict[str, X.ScoredSet]] = {"ensemble": {}}
    for fam in students:
        scored[fam] = {}
    for name, srcs in sources.items():
        scored["ensemble"][name], _ = X.score_ensemble(members, srcs, ev.beam, ev.length_penalty, name)
        for fam, student in students.items():
            scored[fam][name] = X.score_student(
                student, fam, srcs, ev.beam, ev.length_penalty, ev.samples, rng.child(C.derive_seed(0, fam)), name)
    run.lap("score")
    _write_detection(run, "detect", scored)
    return EXIT_OK


def cmd_augmented(cfg: C.ExperimentConfig, run: Run) -> int:
    _require_seq(cfg, "augmented")
    members = _load_members(cfg)
    if len(members) < 2:
        raise C.ConfigError(["ensemble.members: the augmented scorer needs at least 2 members"])
    sources = _eval_sources(cfg)
    ev = cfg.eval
    rng = RngStream(C.derive_seed(cfg.seed, "augmented"))
    scored: dict[str, dict[str, X.ScoredSet]] = {"ensemble": {}, "augmented": {}}
    for name, srcs in sources.items():
        raw, aug = X.score_ensemble(members, srcs, ev.beam, ev.length_penalty, name, augmented=(ev.samples, rng))
        scored["ensemble"][name], scored["augmented"][name] = raw, aug
    run.lap("score")
    _write_detection(run, "augmented", scored)
    return EXIT_OK


def cmd_analyze(cfg: C.ExperimentConfig, run: Run) -> int:
    """Length-vs-TU Pearson correlation from dumped per-sequence scores."""
    rows = []
    found = False
    for prefix in ("detect", "augmented"):
        p = Path(cfg.out) / prefix / "sequences.csv"
        if not p.exists():
            continue
        found = True
        with open(p, newline="") as fh:
            table = list(csv.DictReader(fh))
        models = sorted({r["model"] for r in table})
        for model_name in models:
            mine = [r for r in table if r["model"] == model_name]
            for ood in sorted({r["set"] for r in mine if r["set"] != "id"}):
                sel = [r for r in mine if r["set"] in ("id", ood)]
                try:
                    pcc = repr(evalkit.pearson([float(r["length"]) for r in sel], [float(r["tu"]) for r in sel]))
                except evalkit.UndefinedCorrelation:
                    pcc = "nan"
                rows.append([prefix, model_name, ood, len(sel), pcc])
    if not found:
        raise InputError("no per-sequence scores found; run detect or augmented first")
    run.text("analyze/pcc.csv", _csv(("source", "model", "ood", "n", "pcc_length_tu"), rows))
    return EXIT_OK


def cmd_toy(cfg: C.ExperimentConfig, run: Run) -> int:
    if cfg.task.kind != "toy":
        raise C.ConfigError(["task.kind: toy needs the toy task"])
    result = X.run_toy(cfg)
    run.lap("toy")
    run.text("toy/data.csv", result.data.to_csv())
    run.text("toy/data.svg", evalkit.scatter_svg(result.data.x, result.data.y, result.data.bounds()))
    summary = []
    for method in ("ensemble", "kd", "edd-dirichlet", "ledd-laplace"):
        d = f"toy/{method}"
        Path(run.out, d).mkdir(parents=True, exist_ok=True)
        grid = result.grids.get(method)
        if grid is not None:
            run.text(f"{d}/grid.csv", grid.to_csv())
            run.text(f"{d}/loss.svg", evalkit.heatmap_svg(grid.loss, f"{method} loss"))
            run.text(f"{d}/confidence.svg", evalkit.heatmap_svg(grid.confidence, f"{method} confidence"))
        if method in result.logs:
            run.text(f"{d}/curve.csv", _curve_csv(result.logs[method]))
        div = result.diverged.get(method)
        if div is not None:
            run.text(f"{d}/divergence.csv", _divergence_csv(div))
        corr = result.confidence_correlation(method) if grid is not None and method != "ensemble" else float("nan")
        summary.append([method, repr(corr), int(div is not None), div.step if div else "", div.term if div else ""])
    run.text("toy/summary.csv", _csv(("method", "confidence_pcc", "diverged", "step", "term"), summary))
    return EXIT_OK


COMMANDS = {
    "train-ensemble": cmd_train_ensemble,
    "distill": cmd_distill,
    "detect": cmd_detect,
    "toy": cmd_toy,
    "augmented": cmd_augmented,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ledd", description="Ensemble distillation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().split("\n")[0] or None)
        p.add_argument("--config", required=True, help="YAML experiment configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def load_config(path, seed=None, out=None) -> C.ExperimentConfig:
    try:
        cfg = C.load(path)
    except FileNotFoundError as err:
        raise C.ConfigError([f"config file {path} not found"]) from err
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out"] = out
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        errors = C.validate(cfg)
        if errors:
            raise C.ConfigError(errors)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        run = Run(args.command, cfg)
        status = COMMANDS[args.command](cfg, run)
        run.lap("total")
        if status == EXIT_OK:
            run.manifest()
        return status
    except C.ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except Exception as err:  # noqa: BLE001 - any other failure is still a nonzero exit
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
