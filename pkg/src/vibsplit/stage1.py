"""Stage-1 trainer: the transcription bottleneck.

Pipeline per utterance: softmax-weighted layer mixing (or a fixed layer),
bottleneck encoder to a diagonal Gaussian, one reparameterized sample, and
a linear CTC head.  The loss is CTC plus the annealed-beta KL penalty;
inference uses posterior means only.  After training the model is frozen —
stage 2 and every probe treat it as a fixed feature extractor.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from .ctc import (
    InfeasibleTargetWarning,
    Vocabulary,
    ctc_loss,
    edit_distance,
    greedy_decode,
    min_frames_for_target,
)
from .data import FormatError, UtteranceRecord, layer_mix, load_hidden_states, select_layer
from .optim import (
    DivergenceError,
    clip_gradients,
    derive_seed,
    make_adamw,
    make_scheduler,
    shuffled_indices,
)
from .vib import (
    BetaSchedule,
    BottleneckEncoder,
    beta_at,
    gaussian_kl,
    init_affine,
    reparameterize,
)

PAPER_WIDTHS = (16, 32, 64, 128, 256)
BLANK_BIAS = 1.0


@dataclass(frozen=True)
class Stage1Config:
    d: int = 16
    epochs: int = 50
    lr: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    beta_start: float = 0.1
    beta_end: float = 1.0
    layer: int | None = None  # None = learned weighted average over layers
    seed: int = 0
    allowed_widths: tuple[int, ...] = PAPER_WIDTHS  # () disables the check

    def __post_init__(self) -> None:
        if self.allowed_widths and self.d not in self.allowed_widths:
            raise ValueError(
                f"bottleneck width {self.d} not in allowed set {self.allowed_widths}"
            )
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 1 and lr positive")
        if self.beta_start < 0 or self.beta_end < self.beta_start:
            raise ValueError("beta range must satisfy 0 <= start <= end")


class Stage1Model(nn.Module):
    """Layer mixer + bottleneck encoder + linear CTC head."""

    def __init__(self, layer_count: int, width: int, vocab: Vocabulary,
                 config: Stage1Config):
        super().__init__()
        self.layer_logits = nn.Parameter(torch.zeros(layer_count))
        self.encoder = BottleneckEncoder(width, config.d)
        self.ctc_head = nn.Linear(config.d, len(vocab.symbols))
        self.vocab = vocab
        self.config = config
        self.layer_count = layer_count
        self.width = width
        self.history: list[dict] = []

    def initialize(self, rng: np.random.Generator) -> None:
        """Small random weights; the CTC bias starts nudged toward blank so
        an untrained decode is empty rather than arbitrary-length noise."""
        for layer in (self.encoder.shared1, self.encoder.shared2,
                      self.encoder.head_mean, self.encoder.head_logvar,
                      self.ctc_head):
            init_affine(layer, rng)
        with torch.no_grad():
            self.ctc_head.bias[self.vocab.blank_index] = BLANK_BIAS

    def mix(self, hidden: Tensor) -> Tensor:
        if self.config.layer is None:
            return layer_mix(hidden, self.layer_logits)
        return select_layer(hidden, self.config.layer)

    def layer_weights(self) -> np.ndarray:
        return torch.softmax(self.layer_logits.detach(), dim=0).numpy()

    def frame_logprobs(self, latent_sample: Tensor) -> Tensor:
        return torch.log_softmax(self.ctc_head(latent_sample), dim=1)


def _hidden_tensor(record: UtteranceRecord) -> Tensor:
    return torch.from_numpy(
        np.ascontiguousarray(load_hidden_states(record).values, dtype=np.float32)
    )


def _usable_records(records: Sequence[UtteranceRecord], vocab: Vocabulary
                    ) -> list[tuple[UtteranceRecord, Tensor, list[int]]]:
    usable = []
    for record in records:
        target = vocab.encode(record.transcript)
        hidden = _hidden_tensor(record)
        if min_frames_for_target(target) > hidden.shape[1]:
            warnings.warn(
                f"record {record.id}: target needs more frames than available; skipped",
                InfeasibleTargetWarning,
            )
            continue
        usable.append((record, hidden, target))
    return usable


def train_stage1(records: Sequence[UtteranceRecord], vocab: Vocabulary,
                 config: Stage1Config) -> Stage1Model:
    """Train the textual bottleneck on the given records (no internal split)."""
    usable = _usable_records(records, vocab)
    if not usable:
        raise ValueError("no trainable records (all targets infeasible or empty)")
    layer_count = usable[0][1].shape[0]
    width = usable[0][1].shape[2]
    if config.layer is not None and not 0 <= config.layer < layer_count:
        raise ValueError(f"fixed layer {config.layer} out of range [0, {layer_count})")

    model = Stage1Model(layer_count, width, vocab, config)
    model.initialize(np.random.default_rng(derive_seed(config.seed, "stage1-init")))

    trainable = [p for n, p in model.named_parameters()
                 if config.layer is None or n != "layer_logits"]
    optimizer = make_adamw(trainable, config.lr, config.weight_decay)
    total_steps = config.epochs * len(usable)
    scheduler = make_scheduler(optimizer, total_steps, config.warmup_ratio)
    betas = BetaSchedule(config.beta_start, config.beta_end, total_steps)

    order_rng = np.random.default_rng(derive_seed(config.seed, "stage1-order"))
    noise_rng = np.random.default_rng(derive_seed(config.seed, "stage1-noise"))
    step = 0
    for epoch in range(config.epochs):
        epoch_loss = epoch_ctc = epoch_kl = 0.0
        for idx in shuffled_indices(order_rng, len(usable)):
            record, hidden, target = usable[idx]
            try:
                frames = model.mix(hidden)
                latent = model.encoder(frames)
                eps = torch.from_numpy(
                    noise_rng.standard_normal((latent.frames, config.d)).astype(np.float32)
                )
                sample = reparameterize(latent, eps)
                ctc = ctc_loss(model.frame_logprobs(sample), target, vocab.blank_index)
                kl = gaussian_kl(latent)
            except ValueError as exc:
                # Inputs were validated before the loop, so a forward-pass
                # validation failure after the first update means the weights
                # collapsed (e.g. the logvar head pushed std to zero).
                if step > 0:
                    raise DivergenceError(
                        f"stage 1 collapsed at epoch {epoch}, record {record.id}: {exc}"
                    ) from exc
                raise
            beta = beta_at(step, betas)
            loss = ctc + beta * kl
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"stage 1 diverged at epoch {epoch}, record {record.id}: "
                    f"ctc={ctc.item()!r} kl={kl.item()!r}"
                )
            optimizer.zero_grad()
            loss.backward()
            clip_gradients(trainable, config.grad_clip)
            optimizer.step()
            scheduler.step()
            step += 1
            epoch_loss += loss.item()
            epoch_ctc += ctc.item()
            epoch_kl += kl.item()
        n = len(usable)
        model.history.append({
            "epoch": epoch,
            "loss": epoch_loss / n,
            "ctc": epoch_ctc / n,
            "kl": epoch_kl / n,
            "beta": beta_at(min(step, total_steps - 1), betas),
        })
    model.eval()
    model.requires_grad_(False)
    return model


def textual_latents(model: Stage1Model, record: UtteranceRecord) -> np.ndarray:
    """Frozen per-frame posterior means, [T, d]."""
    with torch.no_grad():
        latent = model.encoder(model.mix(_hidden_tensor(record)))
    return latent.mean.numpy()


def save_stage1(path, model: Stage1Model, corpus: str = "") -> None:
    """Checkpoint the model with enough metadata to rebuild it.

    ``corpus`` is the fingerprint of the training corpus; downstream stages
    refuse to condition on a checkpoint whose fingerprint differs from the
    corpus they were handed.
    """
    meta = {
        "kind": "stage1",
        "config": asdict(model.config),
        "vocab": {"symbols": list(model.vocab.symbols),
                  "blank_index": model.vocab.blank_index},
        "layer_count": model.layer_count,
        "width": model.width,
        "corpus": corpus,
        "history": model.history,
    }
    save_checkpoint(path, module_tensors(model), meta)


def _stage1_from_meta(meta: dict) -> Stage1Model:
    raw = dict(meta["config"])
    raw["allowed_widths"] = tuple(raw.get("allowed_widths", ()))
    config = Stage1Config(**raw)
    vocab = Vocabulary(symbols=tuple(meta["vocab"]["symbols"]),
                       blank_index=meta["vocab"]["blank_index"])
    return Stage1Model(meta["layer_count"], meta["width"], vocab, config)


def load_stage1(path) -> tuple[Stage1Model, dict]:
    """Rebuild a frozen stage-1 model and return it with its metadata."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "stage1":
        raise FormatError(f"{path}: not a stage-1 checkpoint")
    model = _stage1_from_meta(meta)
    load_module_tensors(model, tensors)
    model.history = list(meta.get("history", []))
    model.eval()
    model.requires_grad_(False)
    return model, meta


def eval_stage1(model: Stage1Model, records: Sequence[UtteranceRecord]) -> dict:
    """Corpus-level WER/CER (greedy decode on means) and mean per-frame KL."""
    word_edits = word_total = char_edits = char_total = 0
    kl_sum = 0.0
    with torch.no_grad():
        for record in records:
            frames = model.mix(_hidden_tensor(record))
            latent = model.encoder(frames)
            logprobs = model.frame_logprobs(latent.mean)
            hypothesis = greedy_decode(logprobs.numpy(), model.vocab)
            ref_words = record.transcript.split()
            word_edits += edit_distance(ref_words, hypothesis.split())
            word_total += len(ref_words)
            char_edits += edit_distance(list(record.transcript), list(hypothesis))
            char_total += len(record.transcript)
            kl_sum += gaussian_kl(latent).item()
    if word_total == 0 or char_total == 0:
        raise ValueError("evaluation set has empty references")
    return {
        "wer": word_edits / word_total,
        "cer": char_edits / char_total,
        "kl": kl_sum / len(records),
    }
