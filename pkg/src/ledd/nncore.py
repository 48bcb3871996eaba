"""Models, optimiser, learning-rate schedules, beam search and checkpoints.

Gradients come from torch autograd. Models default to float32 activations;
call ``.double()`` on a model for finite-difference checks.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from ._io import Reader, atomic_write_bytes, seal, unseal

BOS, EOS, PAD = 0, 1, 2
RESERVED = 3

CHECKPOINT_MAGIC = b"EDDK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when a tensor dimension does not match what a model expects."""

    def __init__(self, what: str, expected, got):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected {expected}, got {got}")


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


@contextmanager
def _seeded(seed: int):
    # default layer init draws from the global generator; isolate it
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _zero_linear(n_in: int, n_out: int) -> nn.Linear:
    # log-scale head: starts at log(sigma) = 0 and draws nothing from the RNG
    with _seeded(0):
        layer = nn.Linear(n_in, n_out)
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class MlpModel(nn.Module):
    """Feed-forward classifier with tanh hidden units.

    ``widths`` is ``[input_dim, *hidden, num_classes]``. With ``scale_head``
    a second linear map off the last hidden layer emits log-scales, zero
    initialised so every scale starts at 1.
    """

    def __init__(self, widths: Sequence[int], scale_head: bool = False, seed: int = 0):
        super().__init__()
        if len(widths) < 2 or any(int(w) < 1 for w in widths):
            raise ValueError(f"invalid layer widths {list(widths)}")
        self.widths = [int(w) for w in widths]
        with _seeded(seed):
            self.layers = nn.ModuleList(
                nn.Linear(a, b) for a, b in zip(self.widths[:-1], self.widths[1:])
            )
        self.scale = None
        if scale_head:
            self.scale = _zero_linear(self.widths[-2], self.widths[-1])

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def has_scale_head(self) -> bool:
        return self.scale is not None

    def forward(self, x: torch.Tensor):
        if x.shape[-1] != self.widths[0]:
            raise ShapeError("input width (last dimension)", self.widths[0], x.shape[-1])
        h = x
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        logits = self.layers[-1](h)
        if self.scale is None:
            return logits
        return logits, self.scale(h)


class TinySeqModel(nn.Module):
    """GRU encoder-decoder with one dot-product attention block.

    The encoder is a bidirectional GRU over the source. The decoder is a
    unidirectional GRU fed the previous target token; at step ``l`` it
    attends over the encoder states and projects ``[h_l; context]`` to the
    vocabulary. Row ``l`` therefore depends only on the source and
    ``tgt[:l]``. Token ids 0/1/2 are BOS/EOS/PAD.
    """

    def __init__(
        self,
        vocab_size: int,
        emb_dim: int = 32,
        hid_dim: int = 64,
        scale_head: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        if vocab_size <= RESERVED:
            raise ValueError("vocabulary must include the reserved BOS/EOS/PAD ids")
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hid_dim = hid_dim
        with _seeded(seed):
            self.src_emb = nn.Embedding(vocab_size, emb_dim, padding_idx=PAD)
            self.tgt_emb = nn.Embedding(vocab_size, emb_dim)
            self.encoder = nn.GRU(emb_dim, hid_dim, batch_first=True, bidirectional=True)
            self.bridge = nn.Linear(2 * hid_dim, hid_dim)
            self.decoder = nn.GRU(emb_dim, hid_dim, batch_first=True)
            self.key = nn.Linear(2 * hid_dim, hid_dim, bias=False)
            self.out = nn.Linear(3 * hid_dim, vocab_size)
        self.scale = None
        if scale_head:
            self.scale = _zero_linear(3 * hid_dim, vocab_size)

    @property
    def num_classes(self) -> int:
        return self.vocab_size

    @property
    def has_scale_head(self) -> bool:
        return self.scale is not None

    def encode(self, src: torch.Tensor, src_len: torch.Tensor):
        """Return (encoder states [B,S,2H], keys [B,S,H], source mask, initial hidden)."""
        emb = self.src_emb(src)
        packed = pack_padded_sequence(emb, src_len.cpu(), batch_first=True, enforce_sorted=False)
        states, _ = self.encoder(packed)
        states, _ = pad_packed_sequence(states, batch_first=True, total_length=src.shape[1])
        mask = torch.arange(src.shape[1], device=src.device)[None, :] < src_len[:, None]
        mean = (states * mask[..., None]).sum(1) / src_len[:, None].to(states.dtype)
        h0 = torch.tanh(self.bridge(mean))[None]
        return states, self.key(states), mask, h0

    def _project(self, dec: torch.Tensor, states, keys, mask):
        att = torch.einsum("blh,bsh->bls", dec, keys)
        att = att.masked_fill(~mask[:, None, :], float("-inf"))
        ctx = torch.einsum("bls,bsd->bld", torch.softmax(att, dim=-1), states)
        feat = torch.cat([dec, ctx], dim=-1)
        logits = self.out(feat)
        if self.scale is None:
            return logits
        return logits, self.scale(feat)

    def forward(self, src, src_len, tgt_in):
        """Teacher-forced logits ``[B, L, V]`` for decoder inputs ``tgt_in``."""
        states, keys, mask, h0 = self.encode(src, src_len)
        dec, _ = self.decoder(self.tgt_emb(tgt_in), h0)
        return self._project(dec, states, keys, mask)

    def step(self, enc, hidden, prev):
        """One decoder step for a batch of hypotheses; returns (output, hidden)."""
        states, keys, mask = enc
        dec, hidden = self.decoder(self.tgt_emb(prev)[:, None, :], hidden)
        out = self._project(dec, states, keys, mask)
        if isinstance(out, tuple):
            return (out[0][:, 0], out[1][:, 0]), hidden
        return out[:, 0], hidden


def _check_tokens(tokens: Sequence[int], vocab: int, what: str) -> None:
    for i, t in enumerate(tokens):
        if not 0 <= int(t) < vocab:
            raise ValueError(f"{what}[{i}] = {t} is outside the vocabulary of size {vocab}")


def forward_classifier(model: MlpModel, inputs: torch.Tensor):
    """Logits ``[B, K]`` (and log-scales when the model has a scale head)."""
    if inputs.dim() != 2:
        raise ShapeError("input rank", 2, inputs.dim())
    return model(inputs)


def seq_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]):
    """Pad a list of (src, tgt) pairs.

    Returns ``src [B,S]``, ``src_len [B]``, decoder inputs ``[B,L]`` (BOS then
    ``tgt[:-1]``), targets ``[B,L]`` and a target mask.
    """
    if not pairs:
        raise ValueError("empty batch")
    S = max(len(s) for s, _ in pairs)
    L = max(len(t) for _, t in pairs)
    B = len(pairs)
    src = torch.full((B, S), PAD, dtype=torch.long)
    tgt_in = torch.full((B, L), PAD, dtype=torch.long)
    tgt = torch.full((B, L), PAD, dtype=torch.long)
    mask = torch.zeros((B, L), dtype=torch.bool)
    src_len = torch.empty(B, dtype=torch.long)
    for b, (s, t) in enumerate(pairs):
        if len(s) == 0:
            raise ValueError(f"example {b} has an empty source")
        if len(t) == 0:
            raise ValueError(f"example {b} has an empty target")
        src[b, : len(s)] = torch.as_tensor(list(s))
        src_len[b] = len(s)
        tgt[b, : len(t)] = torch.as_tensor(list(t))
        tgt_in[b, 0] = BOS
        if len(t) > 1:
            tgt_in[b, 1 : len(t)] = torch.as_tensor(list(t[:-1]))
        mask[b, : len(t)] = True
    return src, src_len, tgt_in, tgt, mask


def forward_seq(model: TinySeqModel, src: Sequence[int], tgt: Sequence[int]):
    """Per-step logits ``[L, V]`` for target ``tgt`` under teacher forcing.

    Row ``l`` predicts ``tgt[l]`` from the source and ``tgt[:l]``.
    """
    if len(src) == 0:
        raise ValueError("source sequence is empty")
    _check_tokens(src, model.vocab_size, "src")
    _check_tokens(tgt, model.vocab_size, "tgt")
    s, sl, tin, _, _ = seq_batch([(src, tgt)])
    out = model(s, sl, tin)
    if isinstance(out, tuple):
        return out[0][0], out[1][0]
    return out[0]


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` of every parameter reachable from a scalar loss."""
    if loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


class Adam:
    """Adam over named parameters with a per-call learning rate.

    Raises :class:`NonFiniteGradient` before touching any weight if a
    gradient contains inf/nan. Gradients are zeroed after every step.
    """

    def __init__(self, named_params: Iterable[tuple[str, nn.Parameter]], betas=(0.9, 0.98), eps=1e-8):
        named = [(n, p) for n, p in named_params if p.requires_grad]
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.betas = betas
        self.eps = eps
        self.opt = torch.optim.Adam(self.params, lr=1.0, betas=betas, eps=eps)
        self.steps = 0

    def step(self, lr: float) -> None:
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            elif not torch.isfinite(p.grad).all():
                raise NonFiniteGradient(name)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        self.zero_grad()
        self.steps += 1

    def zero_grad(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.grad.zero_()

    def moments(self, param: nn.Parameter):
        st = self.opt.state.get(param, {})
        return st.get("exp_avg"), st.get("exp_avg_sq")


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate schedule.

    kind is ``"inverse-sqrt"`` (warmup, d_model, scale), ``"cyclic"``
    (eta_min, eta_max, period) or ``"constant"`` (eta_max).
    """

    kind: str = "constant"
    warmup: int = 4000
    d_model: int = 512
    scale: float = 1.0
    eta_min: float = 1e-4
    eta_max: float = 1e-3
    period: int = 100

    def __post_init__(self):
        if self.kind not in ("inverse-sqrt", "cyclic", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cyclic" and not (0 < self.eta_min < self.eta_max):
            raise ValueError("cyclic schedule needs 0 < eta_min < eta_max")
        if self.kind == "cyclic" and self.period < 2:
            raise ValueError("cyclic period must be at least 2 steps")
        if self.kind == "inverse-sqrt" and (self.warmup < 1 or self.d_model < 1 or self.scale <= 0):
            raise ValueError("inverse-sqrt schedule needs warmup >= 1, d_model >= 1, scale > 0")
        if self.kind == "constant" and self.eta_max <= 0:
            raise ValueError("constant learning rate must be positive")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 1:
        raise ValueError("steps are counted from 1")
    if schedule.kind == "inverse-sqrt":
        return schedule.scale * (step * schedule.d_model) ** -0.5 * min(1.0, step / schedule.warmup) ** 1.5
    if schedule.kind == "cyclic":
        phase = ((step - 1) % schedule.period) / schedule.period
        tri = 1.0 - abs(2.0 * phase - 1.0)
        return schedule.eta_min + (schedule.eta_max - schedule.eta_min) * tri
    return schedule.eta_max


# ---------------------------------------------------------------- decoding


class _ModelStepper:
    """Next-token log-probabilities from one model, or the member average."""

    def __init__(self, models: Sequence[TinySeqModel]):
        self.models = list(models)
        vocab = {m.vocab_size for m in self.models}
        if len(vocab) != 1:
            raise ValueError("ensemble members disagree on vocabulary size")
        self.vocab_size = vocab.pop()

    def init(self, src: Sequence[int]):
        s, sl, _, _, _ = seq_batch([(src, [EOS])])
        states = []
        for m in self.models:
            st, keys, mask, h0 = m.encode(s, sl)
            states.append(((st, keys, mask), h0))
        return states

    def step(self, state, prev: torch.Tensor):
        n = prev.shape[0]
        new_state, logps = [], []
        for m, (enc, hidden) in zip(self.models, state):
            enc_n = tuple(t.expand(n, *t.shape[1:]) for t in enc)
            out, hidden = m.step(enc_n, hidden, prev)
            logits = out[0] if isinstance(out, tuple) else out
            logps.append(torch.log_softmax(logits.double(), dim=-1))
            new_state.append((enc, hidden))
        if len(logps) == 1:
            return logps[0], new_state
        stacked = torch.stack(logps)
        return torch.logsumexp(stacked, dim=0) - math.log(len(logps)), new_state

    def reorder(self, state, idx: torch.Tensor):
        return [(enc, hidden[:, idx]) for enc, hidden in state]


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    truncated: bool = False

    def normalized(self, length_penalty: float) -> float:
        return self.score / max(len(self.tokens), 1) ** length_penalty


def decode(
    model,
    src: Sequence[int],
    beam: int = 4,
    length_penalty: float = 0.6,
    max_len: int | None = None,
) -> Hypothesis:
    """Beam search for the hypothesis maximising ``sum log p / L**length_penalty``.

    ``model`` is a :class:`TinySeqModel` (L-EDD students score with the
    softmax of their mean head), a sequence of models (scored by the
    average of member probabilities), or any object exposing
    ``init(src)``, ``step(state, prev)`` and ``reorder(state, idx)``.
    BOS and PAD are never emitted. At every step the ``beam`` best
    candidate extensions are kept; those ending in EOS are finished. If no
    hypothesis finishes within ``max_len`` (default ``2*len(src)+8``) the
    best unfinished one is returned with ``truncated=True``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if len(src) == 0:
        raise ValueError("source sequence is empty")
    if isinstance(model, nn.Module):
        stepper = _ModelStepper([model])
    elif isinstance(model, (list, tuple)):
        stepper = _ModelStepper(model)
    else:
        stepper = model
    if hasattr(stepper, "vocab_size"):
        _check_tokens(src, stepper.vocab_size, "src")
    if max_len is None:
        max_len = 2 * len(src) + 8

    with torch.no_grad():
        state = stepper.init(src)
        active = [Hypothesis([], 0.0)]
        finished: list[Hypothesis] = []
        for _ in range(max_len):
            prev = torch.tensor([h.tokens[-1] if h.tokens else BOS for h in active], dtype=torch.long)
            logp, state = stepper.step(state, prev)
            logp = torch.as_tensor(logp, dtype=torch.float64).clone()
            logp[:, BOS] = float("-inf")
            logp[:, PAD] = float("-inf")
            base = torch.tensor([h.score for h in active], dtype=torch.float64)
            cand = (base[:, None] + logp).reshape(-1)
            vocab = logp.shape[1]
            # stable descending order: ties broken by (hypothesis, token) index
            order = np.argsort(-cand.numpy(), kind="stable")[:beam]
            keep_rows, next_active = [], []
            for flat in order:
                score = float(cand[flat])
                if score == float("-inf"):
                    break
                row, tok = divmod(int(flat), vocab)
                hyp = Hypothesis(active[row].tokens + [tok], score)
                if tok == EOS:
                    finished.append(hyp)
                else:
                    keep_rows.append(row)
                    next_active.append(hyp)
            if not next_active:
                break
            state = stepper.reorder(state, torch.tensor(keep_rows, dtype=torch.long))
            active = next_active

    pool = finished if finished else active
    best = max(pool, key=lambda h: h.normalized(length_penalty))
    if not finished:
        best = Hypothesis(best.tokens, best.score, truncated=True)
    return best


# ------------------------------------------------------------- checkpoints


def checkpoint_bytes(model: nn.Module) -> bytes:
    """Serialize every named parameter as float32 in the EDDK format."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, p in model.named_parameters():
        raw = name.encode("utf-8")
        arr = p.detach().cpu().to(torch.float32).numpy()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    return seal(b"".join(parts))


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    payload = unseal(blob, "checkpoint")
    rd = Reader(payload, "checkpoint")
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    while not rd.exhausted:
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        dims = [rd.u32() for _ in range(rank)]
        out[name] = rd.f32(int(np.prod(dims, dtype=np.int64))).reshape(dims)
    return out


def load_weights(model: nn.Module, weights: dict[str, np.ndarray]) -> nn.Module:
    """Copy ``weights`` into ``model``; names and shapes must match exactly."""
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(weights))
    extra = sorted(set(weights) - set(params))
    if missing or extra:
        raise ValueError(f"checkpoint does not fit the model (missing {missing}, unexpected {extra})")
    with torch.no_grad():
        for name, p in params.items():
            arr = weights[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ShapeError(f"parameter {name!r}", tuple(p.shape), tuple(arr.shape))
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    return model


def save_checkpoint(model: nn.Module, path: str | Path) -> int:
    """Write ``model`` atomically; returns the FNV-1a checksum."""
    blob = checkpoint_bytes(model)
    atomic_write_bytes(path, blob)
    return struct.unpack("<Q", blob[-8:])[0]


def load_checkpoint(model: nn.Module, path: str | Path) -> nn.Module:
    return load_weights(model, parse_checkpoint(Path(path).read_bytes()))


def checkpoint_checksum(model: nn.Module) -> int:
    return struct.unpack("<Q", checkpoint_bytes(model)[-8:])[0]


def snapshot_weights(model: nn.Module) -> dict[str, np.ndarray]:
    return {n: p.detach().cpu().to(torch.float32).numpy().copy() for n, p in model.named_parameters()}
