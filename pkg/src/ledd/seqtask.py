"""Synthetic data: the three-Gaussian toy set and seq2seq transduction corpora.

Sequence corpora use a shared vocabulary whose ids 0/1/2 are BOS/EOS/PAD.
The last ``n_held_out`` ids never occur in in-distribution sources; they
are what the vocab-shift OOD sets are built from.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .nncore import EOS, RESERVED

Pair = tuple[list[int], list[int]]


@dataclass(frozen=True)
class ToySpec:
    centers: tuple[tuple[float, float], ...] = ((0.0, 0.0), (3.0, 0.0), (1.5, 2.6))
    stds: tuple[float, ...] = (1.0, 1.0, 1.0)
    per_class: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.centers) != len(self.stds):
            raise ValueError("one standard deviation per class centre is required")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if any(s <= 0 for s in self.stds):
            raise ValueError("standard deviations must be positive")


@dataclass
class ToyData:
    x: np.ndarray  # [N, 2] float32
    y: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.y)

    def bounds(self, pad: float = 0.0) -> tuple[float, float, float, float]:
        lo, hi = self.x.min(axis=0), self.x.max(axis=0)
        return (float(lo[0] - pad), float(hi[0] + pad), float(lo[1] - pad), float(hi[1] + pad))

    def to_csv(self) -> str:
        rows = ["x,y,label"] + [f"{a!r},{b!r},{int(c)}" for (a, b), c in zip(self.x.tolist(), self.y)]
        return "\n".join(rows) + "\n"


def gen_toy(spec: ToySpec) -> ToyData:
    """``per_class`` points from an isotropic Gaussian at each centre, class-ordered."""
    rng = np.random.default_rng(spec.seed)
    xs, ys = [], []
    for c, (center, std) in enumerate(zip(spec.centers, spec.stds)):
        xs.append(np.asarray(center, dtype=np.float64) + std * rng.standard_normal((spec.per_class, 2)))
        ys.append(np.full(spec.per_class, c, dtype=np.int64))
    return ToyData(np.concatenate(xs).astype(np.float32), np.concatenate(ys))


def read_toy_csv(path) -> ToyData:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ToyData(data[:, :2].astype(np.float32), data[:, 2].astype(np.int64))


@dataclass(frozen=True)
class SeqTaskSpec:
    """Source/target grammar.

    Sources are i.i.d. symbols from the in-distribution alphabet
    (``RESERVED .. vocab_size - n_held_out - 1``). Targets apply a fixed
    substitution cipher, reverse each block of ``reorder_window`` tokens,
    then resample each token uniformly over the target alphabet with
    probability ``noise``. Both sides end with EOS.
    """

    vocab_size: int = 64
    n_held_out: int = 16
    min_len: int = 3
    max_len: int = 10
    length_shape: str = "uniform"  # or "triangular"
    reorder_window: int = 1
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise rate must lie in [0, 1]")
        if self.length_shape not in ("uniform", "triangular"):
            raise ValueError(f"unknown length shape {self.length_shape!r}")
        if self.reorder_window < 1:
            raise ValueError("reorder window must be >= 1")
        if self.n_id_symbols < 2 or self.n_held_out < 0:
            raise ValueError("vocabulary too small for the held-out split")

    @property
    def n_id_symbols(self) -> int:
        return self.vocab_size - RESERVED - self.n_held_out

    @property
    def id_symbols(self) -> np.ndarray:
        return np.arange(RESERVED, RESERVED + self.n_id_symbols)

    @property
    def held_out_symbols(self) -> np.ndarray:
        return np.arange(self.vocab_size - self.n_held_out, self.vocab_size)

    @property
    def target_symbols(self) -> np.ndarray:
        return np.arange(RESERVED, self.vocab_size)

    def length_pmf(self) -> tuple[np.ndarray, np.ndarray]:
        lengths = np.arange(self.min_len, self.max_len + 1)
        if self.length_shape == "uniform":
            w = np.ones(len(lengths))
        else:
            mid = 0.5 * (self.min_len + self.max_len)
            w = (self.max_len - self.min_len) / 2 + 1 - np.abs(lengths - mid)
        return lengths, w / w.sum()

    def cipher(self) -> dict[int, int]:
        """Fixed map from every non-reserved source id to a target id."""
        rng = np.random.default_rng([self.seed, 0xC1F])
        src = np.arange(RESERVED, self.vocab_size)
        return dict(zip(src.tolist(), rng.permutation(self.target_symbols).tolist()))


@dataclass(frozen=True)
class OodShift:
    """``vocab-shift``: fraction of source tokens replaced by held-out ids (0, 1].
    ``length-shift``: source lengths multiplied by the magnitude (0, 10].
    ``rule-shift``: fraction of tokens emitted by a repetitive Markov grammar (0, 1].
    """

    kind: str
    magnitude: float

    def __post_init__(self):
        limits = {"vocab-shift": 1.0, "length-shift": 10.0, "rule-shift": 1.0}
        if self.kind not in limits:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if not 0.0 < self.magnitude <= limits[self.kind]:
            raise ValueError(f"{self.kind} magnitude must lie in (0, {limits[self.kind]}], got {self.magnitude}")


def _draw_lengths(spec: SeqTaskSpec, rng: np.random.Generator, count: int) -> np.ndarray:
    lengths, pmf = spec.length_pmf()
    return rng.choice(lengths, size=count, p=pmf)


def transduce(spec: SeqTaskSpec, src_body: Sequence[int], rng: np.random.Generator | None = None) -> list[int]:
    """Target body (no EOS) for a source body under the task rule."""
    table = spec.cipher()
    out = [table[int(t)] for t in src_body]
    w = spec.reorder_window
    if w > 1:
        out = [tok for i in range(0, len(out), w) for tok in reversed(out[i : i + w])]
    if spec.noise > 0:
        if rng is None:
            raise ValueError("a noisy task needs a random generator")
        flip = rng.random(len(out)) < spec.noise
        resampled = rng.choice(spec.target_symbols, size=len(out))
        out = [int(r) if f else t for t, f, r in zip(out, flip, resampled)]
    return out


def gen_seq_dataset(spec: SeqTaskSpec, count: int, stream: int = 0) -> list[Pair]:
    """``count`` (src, tgt) pairs, both EOS-terminated; ``stream`` separates splits."""
    rng = np.random.default_rng([spec.seed, 1, stream])
    lengths = _draw_lengths(spec, rng, count)
    pairs = []
    for n in lengths:
        body = rng.choice(spec.id_symbols, size=int(n)).tolist()
        pairs.append((body + [EOS], transduce(spec, body, rng) + [EOS]))
    return pairs


def _markov_body(spec: SeqTaskSpec, rng: np.random.Generator, n: int) -> list[int]:
    # repetitive grammar: runs of ascending ids with small strides
    syms = spec.id_symbols
    pos = int(rng.integers(len(syms)))
    out = []
    for _ in range(n):
        out.append(int(syms[pos]))
        pos = (pos + int(rng.integers(1, 3))) % len(syms)
    return out


def gen_ood_dataset(spec: SeqTaskSpec, shift: OodShift, count: int, stream: int = 100) -> list[list[int]]:
    """EOS-terminated OOD source sequences (no targets)."""
    rng = np.random.default_rng([spec.seed, 2, stream])
    lengths = _draw_lengths(spec, rng, count)
    out = []
    for n in lengths:
        n = int(n)
        if shift.kind == "length-shift":
            n = max(1, int(round(n * shift.magnitude)))
        body = rng.choice(spec.id_symbols, size=n)
        if shift.kind == "vocab-shift":
            if spec.n_held_out == 0:
                raise ValueError("vocab-shift needs held-out symbols")
            swap = rng.random(n) < shift.magnitude
            body = np.where(swap, rng.choice(spec.held_out_symbols, size=n), body)
        elif shift.kind == "rule-shift":
            alt = np.asarray(_markov_body(spec, rng, n))
            body = np.where(rng.random(n) < shift.magnitude, alt, body)
        out.append([int(t) for t in body] + [EOS])
    return out


def write_token_lines(path, seqs: Sequence[Sequence[int]]) -> None:
    atomic_write_text(path, "".join(" ".join(str(int(t)) for t in s) + "\n" for s in seqs))


def read_token_lines(path) -> list[list[int]]:
    return [[int(t) for t in line.split()] for line in Path(path).read_text().splitlines()]


def write_parallel(prefix, pairs: Sequence[Pair]) -> tuple[Path, Path]:
    """Write ``<prefix>.src`` and ``<prefix>.tgt`` with matching line counts."""
    prefix = Path(prefix)
    src, tgt = prefix.with_suffix(".src"), prefix.with_suffix(".tgt")
    write_token_lines(src, [s for s, _ in pairs])
    write_token_lines(tgt, [t for _, t in pairs])
    return src, tgt


def read_parallel(prefix) -> list[Pair]:
    prefix = Path(prefix)
    src = read_token_lines(prefix.with_suffix(".src"))
    tgt = read_token_lines(prefix.with_suffix(".tgt"))
    if len(src) != len(tgt):
        raise ValueError(f"parallel files differ in line count ({len(src)} vs {len(tgt)})")
    return list(zip(src, tgt))
