"""AUROC, corpus BLEU, Pearson correlation and 2-D grid evaluation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
import torch
from scipy.stats import rankdata

from . import losses
from ._io import atomic_write_text
from .uncertainty import predictive


class UndefinedCorrelation(ValueError):
    """Pearson correlation of a constant series."""


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """P(ood > id) + 0.5 P(ood == id), computed from mid-ranks."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValueError("AUROC needs non-empty ID and OOD score lists")
    ranks = rankdata(np.concatenate([id_scores, ood_scores]))
    n_id, n_ood = id_scores.size, ood_scores.size
    # mid-ranks are half-integers, so 2*U is an exact integer
    twice_u = int(round(2.0 * ranks[n_id:].sum())) - n_ood * (n_ood + 1)
    return float(Fraction(twice_u, 2 * n_id * n_ood))


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_order: int = 4) -> float:
    """Corpus BLEU in [0, 100] with one reference per hypothesis and no smoothing."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference lists differ in length")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_prec)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("Pearson correlation needs at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelation("Pearson correlation is undefined for a constant series")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


@dataclass
class DetectionReport:
    id_scores: np.ndarray
    ood_scores: np.ndarray
    measure: str
    model: str = ""
    id_name: str = "id"
    ood_name: str = "ood"
    auroc: float = field(init=False)

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=np.float64)
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64)
        self.auroc = auroc(self.id_scores, self.ood_scores)

    def to_csv(self) -> str:
        lines = ["score,label"]
        lines += [f"{s!r},0" for s in self.id_scores.tolist()]
        lines += [f"{s!r},1" for s in self.ood_scores.tolist()]
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def read_score_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :meth:`DetectionReport.to_csv`: returns (id, ood) scores."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[data[:, 1] == 0, 0], data[data[:, 1] == 1, 0]


# ------------------------------------------------------------------ grids

GRID_KINDS = ("ensemble", "kd", "dirichlet", "laplace-logit", "gaussian-logit")


@dataclass
class GridEval:
    bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    resolution: int
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray  # [resolution, resolution], row = y index
    confidence: np.ndarray

    def to_csv(self) -> str:
        lines = ["x,y,loss,confidence"]
        for j, y in enumerate(self.ys):
            for i, x in enumerate(self.xs):
                lines.append(f"{x!r},{y!r},{float(self.loss[j, i])!r},{float(self.confidence[j, i])!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    def write_svg(self, path, which: str = "confidence", title: str = "") -> None:
        atomic_write_text(path, heatmap_svg(getattr(self, which), title or which))


def grid_points(bounds, resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cell-centre coordinates; returns (xs, ys, points [r*r, 2]) in row-major y/x order."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    xmin, xmax, ymin, ymax = bounds
    xs = xmin + (np.arange(resolution) + 0.5) * (xmax - xmin) / resolution
    ys = ymin + (np.arange(resolution) + 0.5) * (ymax - ymin) / resolution
    gx, gy = np.meshgrid(xs, ys)
    return xs, ys, np.stack([gx.ravel(), gy.ravel()], axis=1)


def _outputs(model, points: torch.Tensor):
    out = model(points)
    if isinstance(out, tuple):
        return out[0].double(), out[1].double()
    return out.double(), None


def _input_width(model) -> int:
    widths = getattr(model, "widths", None)
    if widths is None:
        raise ValueError("grid evaluation needs an MLP classifier")
    return widths[0]


def grid_eval(model, kind: str, bounds, resolution: int, teacher=None) -> GridEval:
    """Per-cell distillation loss and confidence (max predictive probability).

    ``kind`` selects how ``model`` is read: ``"ensemble"`` (a list of
    members; no loss, so the loss grid is NaN), ``"kd"`` (softmax of the
    logits; loss is the KL from the teacher mean), ``"dirichlet"`` (mean of
    ``Dir(exp(logits))``; loss is the Dirichlet EDD term) or a logit-space
    family (softmax of the mean head; loss is that family's EDD term).
    ``teacher`` is the list of ensemble members the loss is measured
    against.
    """
    if kind not in GRID_KINDS:
        raise ValueError(f"unknown grid kind {kind!r}")
    members = list(model) if kind == "ensemble" else [model]
    for m in members:
        if _input_width(m) != 2:
            raise ValueError("grid evaluation needs a model with 2-D inputs")
    if kind != "ensemble" and teacher is None:
        raise ValueError(f"kind {kind!r} needs the teacher ensemble for its loss grid")
    xs, ys, pts = grid_points(bounds, resolution)
    x = torch.as_tensor(pts, dtype=next(members[0].parameters()).dtype)
    with torch.no_grad():
        if kind == "ensemble":
            probs = predictive(np.stack([torch.softmax(_outputs(m, x)[0], -1).numpy() for m in members], axis=1))
            loss = np.full(len(pts), np.nan)
        else:
            t_logits = torch.stack([_outputs(m, x)[0] for m in teacher], dim=1)  # [N, M, K]
            t_norm = losses.normalize_logits(t_logits)
            t_probs = torch.softmax(t_norm, dim=-1)
            main, log_scale = _outputs(model, x)
            if kind == "kd":
                probs = torch.softmax(main, -1).numpy()
                loss = losses.tempered_kl_steps(t_probs.mean(1), main, 1.0).numpy()
            elif kind == "dirichlet":
                alpha = torch.exp(main)
                probs = (alpha / alpha.sum(-1, keepdim=True)).numpy()
                loss = losses.dirichlet_edd_steps(alpha, t_probs).numpy()
            else:
                if log_scale is None:
                    raise ValueError("logit-space grid needs a model with a scale head")
                probs = torch.softmax(main, -1).numpy()
                steps = losses.laplace_edd_steps if kind == "laplace-logit" else losses.gaussian_edd_steps
                loss = steps(main, torch.exp(log_scale), t_norm).numpy()
    r = resolution
    return GridEval(
        tuple(float(b) for b in bounds), r, xs, ys,
        np.asarray(loss, dtype=np.float64).reshape(r, r),
        np.asarray(probs, dtype=np.float64).max(axis=-1).reshape(r, r),
    )


def heatmap_svg(values: np.ndarray, title: str = "", cell: int = 4) -> str:
    """Self-contained SVG heatmap with a linear white-to-blue ramp and min/max legend.

    Row 0 of ``values`` is drawn at the bottom. NaN cells are grey.
    """
    values = np.asarray(values, dtype=np.float64)
    rows, cols = values.shape
    finite = values[np.isfinite(values)]
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 0.0
    span = vmax - vmin if vmax > vmin else 1.0
    width, height = cols * cell, rows * cell
    legend_h = 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + legend_h}" '
        f'viewBox="0 0 {width} {height + legend_h}">',
        f"<title>{escape(title)}</title>",
    ]
    for j in range(rows):
        y = (rows - 1 - j) * cell
        for i in range(cols):
            v = values[j, i]
            if np.isfinite(v):
                t = (v - vmin) / span
                rgb = (int(round(255 * (1 - t))), int(round(255 * (1 - 0.6 * t))), 255)
                fill = "#%02x%02x%02x" % rgb
            else:
                fill = "#999999"
            out.append(f'<rect x="{i * cell}" y="{y}" width="{cell}" height="{cell}" fill="{fill}"/>')
    gid = "ramp"
    out += [
        f'<defs><linearGradient id="{gid}"><stop offset="0" stop-color="#ffffff"/>'
        f'<stop offset="1" stop-color="#0066ff"/></linearGradient></defs>',
        f'<rect x="0" y="{height + 8}" width="{width}" height="10" fill="url(#{gid})"/>',
        f'<text x="0" y="{height + 34}" font-size="11" font-family="sans-serif">min {vmin:.4g}</text>',
        f'<text x="{width}" y="{height + 34}" font-size="11" font-family="sans-serif" '
        f'text-anchor="end">max {vmax:.4g}</text>',
        "</svg>",
    ]
    return "\n".join(out) + "\n"


def scatter_svg(points: np.ndarray, labels: np.ndarray, bounds, size: int = 400) -> str:
    """Class-coloured scatter of a 2-D dataset."""
    colors = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd"]
    xmin, xmax, ymin, ymax = bounds
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">', "<title>dataset</title>"]
    for (x, y), c in zip(np.asarray(points), np.asarray(labels)):
        px = (x - xmin) / (xmax - xmin) * size
        py = size - (y - ymin) / (ymax - ymin) * size
        out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="1.2" fill="{colors[int(c) % len(colors)]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str | Path, text: str) -> None:
    atomic_write_text(path, text)
