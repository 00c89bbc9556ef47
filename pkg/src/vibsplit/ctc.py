"""Alignment-free transcription loss and metrics.

The loss sums, in log space, over all frame-level paths whose collapse
(merge repeats, drop blanks) equals the target. The backward pass uses the
forward-backward posteriors rather than autograd through the recursion, so
one utterance costs two numpy sweeps regardless of graph size. A brute-force
path enumerator serves as an independent oracle on small instances.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

NEG_INF = -np.inf

BLANK_TOKEN = "<blank>"


class InfeasibleTargetWarning(UserWarning):
    """Target cannot be emitted in the given number of frames (loss is +inf)."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered symbol list for CTC decoding, blank first by convention."""

    symbols: tuple[str, ...]
    blank_index: int = 0
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        if not 0 <= self.blank_index < len(self.symbols):
            raise ValueError(f"blank_index {self.blank_index} out of range")
        object.__setattr__(
            self,
            "_index",
            {s: i for i, s in enumerate(self.symbols) if i != self.blank_index},
        )

    @classmethod
    def from_characters(cls, characters: str | Sequence[str]) -> "Vocabulary":
        return cls(symbols=(BLANK_TOKEN, *characters), blank_index=0)

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode(self, transcript: str) -> list[int]:
        ids = []
        for ch in transcript:
            if ch not in self._index:
                raise ValueError(f"symbol {ch!r} not in vocabulary")
            ids.append(self._index[ch])
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in ids if i != self.blank_index)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.symbols[self.blank_index] + "\n")
            for i, s in enumerate(self.symbols):
                if i != self.blank_index:
                    fh.write(s + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        lines = [line for line in lines if line != ""]
        if not lines:
            raise ValueError(f"empty vocabulary file: {path}")
        return cls(symbols=tuple(lines), blank_index=0)


@dataclass
class LogProbSequence:
    """[frames, C] matrix whose rows are log-probability distributions."""

    values: Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError(f"expected [frames, C], got {tuple(self.values.shape)}")
        gap = torch.logsumexp(self.values.double(), dim=1).abs().max().item()
        if gap > 1e-6:
            raise ValueError(f"rows must log-sum-exp to 0 (max deviation {gap:.3g})")


def _extended_target(targets: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(targets) + 1, blank, dtype=np.int64)
    ext[1::2] = np.asarray(targets, dtype=np.int64)
    return ext


def min_frames_for_target(targets: Sequence[int]) -> int:
    """Shortest path length able to emit the target (repeats need a blank)."""
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def _validate_targets(targets: Sequence[int], num_classes: int, blank: int) -> None:
    for t in targets:
        if t == blank:
            raise ValueError("target must not contain the blank symbol")
        if not 0 <= t < num_classes:
            raise ValueError(f"target id {t} outside [0, {num_classes})")


def _logaddexp3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.logaddexp(a, b), c)


def _forward_alphas(x: np.ndarray, ext: np.ndarray, skip_ok: np.ndarray) -> np.ndarray:
    """Log-space forward lattice over the blank-interleaved extended target."""
    frames, _ = x.shape
    s_len = len(ext)
    alpha = np.full((frames, s_len), NEG_INF)
    alpha[0, 0] = x[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = x[0, ext[1]]
    for t in range(1, frames):
        prev = alpha[t - 1]
        move = np.full(s_len, NEG_INF)
        move[1:] = prev[:-1]
        skip = np.full(s_len, NEG_INF)
        if s_len > 2:
            skip[2:] = prev[:-2]
        skip = np.where(skip_ok, skip, NEG_INF)
        alpha[t] = _logaddexp3(prev, move, skip) + x[t, ext]
    return alpha


def _backward_betas(x: np.ndarray, ext: np.ndarray, skip_ok: np.ndarray) -> np.ndarray:
    """Suffix lattice; beta[t, s] excludes the emission at frame t."""
    frames, _ = x.shape
    s_len = len(ext)
    beta = np.full((frames, s_len), NEG_INF)
    beta[frames - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[frames - 1, s_len - 2] = 0.0
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1] + x[t + 1, ext]
        move = np.full(s_len, NEG_INF)
        move[:-1] = nxt[1:]
        skip = np.full(s_len, NEG_INF)
        if s_len > 2:
            # skip_ok is indexed by the arrival state: s -> s+2 needs skip_ok[s+2]
            skip[:-2] = np.where(skip_ok[2:], nxt[2:], NEG_INF)
        beta[t] = _logaddexp3(nxt, move, skip)
    return beta


class _CtcLossFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logprobs: Tensor, ext_t: Tensor, blank: int) -> Tensor:
        x = logprobs.detach().cpu().numpy().astype(np.float64)
        ext = ext_t.numpy()
        skip_ok = np.zeros(len(ext), dtype=bool)
        skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
        alpha = _forward_alphas(x, ext, skip_ok)
        tail = alpha[-1, -1] if len(ext) == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
        ctx.saved = (x, ext, skip_ok, alpha, float(tail))
        ctx.in_dtype = logprobs.dtype
        return torch.tensor(-float(tail), dtype=logprobs.dtype)

    @staticmethod
    def backward(ctx, grad_output: Tensor):
        x, ext, skip_ok, alpha, log_p = ctx.saved
        if not np.isfinite(log_p):
            return torch.zeros(x.shape, dtype=ctx.in_dtype), None, None
        beta = _backward_betas(x, ext, skip_ok)
        # posterior over lattice states; d(-log P)/d x[t, k] = -sum_{s: ext[s]=k} post
        post = np.exp(alpha + beta - log_p)
        grad = np.zeros_like(x)
        for s, k in enumerate(ext):
            grad[:, k] -= post[:, s]
        g = torch.from_numpy(grad).to(ctx.in_dtype) * grad_output
        return g, None, None


def ctc_loss(logprobs: Tensor | LogProbSequence, targets: Sequence[int], blank: int = 0) -> Tensor:
    """Negative log-probability of all paths collapsing to the target.

    Returns +inf (with a warning) when the target needs more frames than
    available; trainers skip such utterances.
    """
    if isinstance(logprobs, LogProbSequence):
        logprobs = logprobs.values
    if logprobs.ndim != 2:
        raise ValueError(f"expected [frames, C], got {tuple(logprobs.shape)}")
    frames, num_classes = logprobs.shape
    targets = list(targets)
    _validate_targets(targets, num_classes, blank)
    if frames < min_frames_for_target(targets):
        warnings.warn(
            f"target of length {len(targets)} infeasible in {frames} frames",
            InfeasibleTargetWarning,
            stacklevel=2,
        )
        return torch.tensor(math.inf, dtype=logprobs.dtype)
    ext = torch.from_numpy(_extended_target(targets, blank))
    return _CtcLossFn.apply(logprobs, ext, blank)


def collapse_path(path: Sequence[int], blank: int = 0) -> tuple[int, ...]:
    """CTC collapse: merge consecutive repeats, then drop blanks."""
    out: list[int] = []
    prev: int | None = None
    for p in path:
        if p != prev:
            if p != blank:
                out.append(p)
            prev = p
    return tuple(out)


def brute_force_ctc(
    logprobs: Tensor | LogProbSequence, targets: Sequence[int], blank: int = 0
) -> float:
    """Path-enumeration oracle; refuses instances above frames<=6, C<=4."""
    if isinstance(logprobs, LogProbSequence):
        logprobs = logprobs.values
    frames, num_classes = logprobs.shape
    if frames > 6 or num_classes > 4:
        raise ValueError(
            f"instance [{frames} x {num_classes}] above enumeration bound (frames<=6, C<=4)"
        )
    targets = tuple(targets)
    _validate_targets(targets, num_classes, blank)
    x = logprobs.detach().cpu().numpy().astype(np.float64)
    total = NEG_INF
    for path in itertools.product(range(num_classes), repeat=frames):
        if collapse_path(path, blank) == targets:
            total = np.logaddexp(total, sum(x[t, k] for t, k in enumerate(path)))
    return float(-total)


def greedy_decode(logprobs: Tensor | np.ndarray | LogProbSequence,
                  vocab: Vocabulary) -> str:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks."""
    if isinstance(logprobs, LogProbSequence):
        logprobs = logprobs.values
    if isinstance(logprobs, Tensor):
        logprobs = logprobs.detach().cpu().numpy()
    path = np.argmax(logprobs, axis=1).tolist()
    return vocab.decode(collapse_path(path, vocab.blank_index))


def edit_distance(reference: Sequence, hypothesis: Sequence) -> int:
    """Levenshtein distance over arbitrary token sequences."""
    n, m = len(reference), len(hypothesis)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        curr = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (reference[i - 1] != hypothesis[j - 1])
            curr[j] = min(prev[j] + 1, curr[j - 1] + 1, sub)
        prev = curr
    return prev[m]


def _as_words(text: str | Sequence[str]) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def wer(reference: str | Sequence[str], hypothesis: str | Sequence[str]) -> float:
    """Word-level edit distance divided by the reference word count."""
    ref, hyp = _as_words(reference), _as_words(hypothesis)
    if not ref:
        raise ValueError("reference must be nonempty")
    return edit_distance(ref, hyp) / len(ref)


def cer(reference: str, hypothesis: str) -> float:
    """Character-level edit distance divided by the reference length."""
    if not reference:
        raise ValueError("reference must be nonempty")
    return edit_distance(reference, hypothesis) / len(reference)
