"""Stage-2 trainer: the task-relevant acoustic bottleneck.

The acoustic encoder sees the same upstream hidden states through its own
layer mixing and produces frame-wise Gaussian latents (the KL penalty is
applied to these, before pooling).  Sampled frames are attention-pooled to
one vector, concatenated with the mean-pooled *frozen* stage-1 textual
means, and classified with a single affine layer under cross-entropy.

The stage-1 model is registered as a frozen submodule: it contributes the
conditioning vector and is saved with the checkpoint, but none of its
parameters ever reach the optimizer and no gradient flows into it (the
conditioning is computed once, under no_grad, per record).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from .data import FormatError, UtteranceRecord, layer_mix, select_layer
from .optim import (
    DivergenceError,
    clip_gradients,
    derive_seed,
    make_adamw,
    make_scheduler,
    shuffled_indices,
)
from .stage1 import Stage1Model, _hidden_tensor, _stage1_from_meta, textual_latents
from .vib import (
    BetaSchedule,
    BottleneckEncoder,
    beta_at,
    gaussian_kl,
    init_affine,
    reparameterize,
)


@dataclass(frozen=True)
class Stage2Config:
    task: str = "emotion"
    d: int = 16
    epochs: int = 50
    batch: int = 8
    lr: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    beta_start: float = 0.1
    beta_end: float = 1.0
    layer: int | None = None
    undersample: bool | None = None  # None: on for emotion, off otherwise
    condition: bool = True  # False drops the frozen textual conditioning
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.lr <= 0 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1 and lr positive")
        if self.beta_start < 0 or self.beta_end < self.beta_start:
            raise ValueError("beta range must satisfy 0 <= start <= end")

    @property
    def balance_classes(self) -> bool:
        if self.undersample is None:
            return self.task == "emotion"
        return self.undersample


class AttentionPooler(nn.Module):
    """Single-query attention over frame latents, scaled by 1/sqrt(d)."""

    def __init__(self, d: int):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(d))
        self.key_map = nn.Linear(d, d)
        self.d = d

    def initialize(self, rng: np.random.Generator) -> None:
        init_affine(self.key_map, rng)
        with torch.no_grad():
            q = rng.standard_normal(self.d) / math.sqrt(self.d)
            self.query.copy_(torch.from_numpy(q.astype(np.float32)))

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        if z.ndim != 2 or z.shape[0] < 1:
            raise ValueError(f"expected [frames, d] with frames >= 1, got {tuple(z.shape)}")
        scores = self.key_map(z) @ self.query / math.sqrt(self.d)
        weights = torch.softmax(scores, dim=0)
        return weights @ z, weights


def attention_pool(z: Tensor, pooler: AttentionPooler) -> tuple[Tensor, Tensor]:
    """Pooled vector and the softmax frame weights (sum to 1)."""
    return pooler(z)


class Stage2Model(nn.Module):
    """Acoustic bottleneck, attention pooling, and linear classifier."""

    def __init__(self, stage1: Stage1Model, layer_count: int, width: int,
                 class_count: int, config: Stage2Config):
        super().__init__()
        self.stage1 = stage1
        self.layer_logits = nn.Parameter(torch.zeros(layer_count))
        self.encoder = BottleneckEncoder(width, config.d)
        self.pooler = AttentionPooler(config.d)
        in_width = 2 * config.d if config.condition else config.d
        self.classifier = nn.Linear(in_width, class_count)
        self.config = config
        self.class_count = class_count
        self.layer_count = layer_count
        self.width = width
        self.history: list[dict] = []
        self.stage1.requires_grad_(False)

    def initialize(self, rng: np.random.Generator) -> None:
        for layer in (self.encoder.shared1, self.encoder.shared2,
                      self.encoder.head_mean, self.encoder.head_logvar,
                      self.classifier):
            init_affine(layer, rng)
        self.pooler.initialize(rng)

    def trainable_parameters(self) -> list[nn.Parameter]:
        frozen = {id(p) for p in self.stage1.parameters()}
        params = [p for n, p in self.named_parameters()
                  if id(p) not in frozen
                  and (self.config.layer is None or n != "layer_logits")]
        return params

    def mix(self, hidden: Tensor) -> Tensor:
        if self.config.layer is None:
            return layer_mix(hidden, self.layer_logits)
        return select_layer(hidden, self.config.layer)

    def layer_weights(self) -> np.ndarray:
        return torch.softmax(self.layer_logits.detach(), dim=0).numpy()

    def conditioning(self, record: UtteranceRecord) -> Tensor:
        """Mean over frames of the frozen stage-1 posterior means."""
        means = textual_latents(self.stage1, record)
        return torch.from_numpy(means.mean(axis=0).astype(np.float32))


def _task_records(records: Sequence[UtteranceRecord], task: str
                  ) -> list[tuple[UtteranceRecord, int]]:
    labeled = []
    for record in records:
        if task not in record.labels:
            warnings.warn(f"record {record.id}: no {task!r} label; skipped")
            continue
        labeled.append((record, int(record.labels[task])))
    return labeled


def _undersample(pairs: list[tuple[UtteranceRecord, int]],
                 rng: np.random.Generator) -> list[tuple[UtteranceRecord, int]]:
    by_class: dict[int, list[int]] = {}
    for idx, (_, label) in enumerate(pairs):
        by_class.setdefault(label, []).append(idx)
    floor = min(len(v) for v in by_class.values())
    keep: list[int] = []
    for label in sorted(by_class):
        members = np.asarray(by_class[label])
        chosen = rng.choice(members, size=floor, replace=False)
        keep.extend(int(i) for i in chosen)
    return [pairs[i] for i in sorted(keep)]


def train_stage2(records: Sequence[UtteranceRecord], stage1: Stage1Model,
                 config: Stage2Config) -> Stage2Model:
    """Train the acoustic bottleneck; stage-1 parameters stay untouched."""
    pairs = _task_records(records, config.task)
    if not pairs:
        raise ValueError(f"no records carry a {config.task!r} label")
    class_count = max(label for _, label in pairs) + 1
    if class_count < 2:
        raise ValueError("need at least two classes")
    if config.balance_classes:
        pairs = _undersample(
            pairs, np.random.default_rng(derive_seed(config.seed, "stage2-balance"))
        )

    hidden0 = _hidden_tensor(pairs[0][0])
    layer_count, width = hidden0.shape[0], hidden0.shape[2]
    if config.layer is not None and not 0 <= config.layer < layer_count:
        raise ValueError(f"fixed layer {config.layer} out of range [0, {layer_count})")
    model = Stage2Model(stage1, layer_count, width, class_count, config)
    model.initialize(np.random.default_rng(derive_seed(config.seed, "stage2-init")))

    prepared = []
    with torch.no_grad():
        for record, label in pairs:
            prepared.append((
                _hidden_tensor(record),
                model.conditioning(record) if config.condition else None,
                label,
                record.id,
            ))

    trainable = model.trainable_parameters()
    optimizer = make_adamw(trainable, config.lr, config.weight_decay)
    steps_per_epoch = math.ceil(len(prepared) / config.batch)
    total_steps = config.epochs * steps_per_epoch
    scheduler = make_scheduler(optimizer, total_steps, config.warmup_ratio)
    betas = BetaSchedule(config.beta_start, config.beta_end, total_steps)
    ce = nn.CrossEntropyLoss()

    order_rng = np.random.default_rng(derive_seed(config.seed, "stage2-order"))
    noise_rng = np.random.default_rng(derive_seed(config.seed, "stage2-noise"))
    step = 0
    for epoch in range(config.epochs):
        order = shuffled_indices(order_rng, len(prepared))
        epoch_loss = epoch_ce = epoch_kl = 0.0
        for batch_start in range(0, len(order), config.batch):
            batch = order[batch_start:batch_start + config.batch]
            beta = beta_at(step, betas)
            optimizer.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                hidden, conditioning, label, record_id = prepared[idx]
                try:
                    frames = model.mix(hidden)
                    latent = model.encoder(frames)
                    eps = torch.from_numpy(
                        noise_rng.standard_normal((latent.frames, config.d))
                        .astype(np.float32)
                    )
                    pooled, _ = model.pooler(reparameterize(latent, eps))
                    if conditioning is not None:
                        pooled = torch.cat([pooled, conditioning])
                    logits = model.classifier(pooled)
                    kl = gaussian_kl(latent)
                except ValueError as exc:
                    # Inputs were validated before the loop, so a forward-pass
                    # validation failure after the first update means the
                    # weights collapsed (e.g. std driven to zero).
                    if step > 0:
                        raise DivergenceError(
                            f"stage 2 collapsed at epoch {epoch}, "
                            f"record {record_id}: {exc}"
                        ) from exc
                    raise
                loss = ce(logits.unsqueeze(0),
                          torch.tensor([label])) + beta * kl
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"stage 2 diverged at epoch {epoch}, record {record_id}: "
                        f"loss={loss.item()!r}"
                    )
                (loss / len(batch)).backward()
                batch_loss += loss.item()
                epoch_ce += (loss - beta * kl).item()
                epoch_kl += kl.item()
            clip_gradients(trainable, config.grad_clip)
            optimizer.step()
            scheduler.step()
            step += 1
            epoch_loss += batch_loss
        n = len(prepared)
        model.history.append({
            "epoch": epoch,
            "loss": epoch_loss / n,
            "ce": epoch_ce / n,
            "kl": epoch_kl / n,
            "beta": beta_at(min(step, total_steps - 1), betas),
        })
    model.eval()
    model.requires_grad_(False)
    return model


def acoustic_latents(model: Stage2Model, record: UtteranceRecord) -> np.ndarray:
    """Frozen per-frame acoustic posterior means, [T, d]."""
    with torch.no_grad():
        latent = model.encoder(model.mix(_hidden_tensor(record)))
    return latent.mean.numpy()


def predict(model: Stage2Model, record: UtteranceRecord
            ) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and attention weights, deterministic (means only)."""
    with torch.no_grad():
        latent = model.encoder(model.mix(_hidden_tensor(record)))
        pooled, weights = model.pooler(latent.mean)
        if model.config.condition:
            pooled = torch.cat([pooled, model.conditioning(record)])
        probs = torch.softmax(model.classifier(pooled), dim=0)
    return probs.numpy(), weights.numpy()


def eval_stage2(model: Stage2Model, records: Sequence[UtteranceRecord]) -> dict:
    """Held-out accuracy plus mean KL of the acoustic latents."""
    pairs = _task_records(records, model.config.task)
    if not pairs:
        raise ValueError(f"no records carry a {model.config.task!r} label")
    correct = 0
    kl_sum = 0.0
    with torch.no_grad():
        for record, label in pairs:
            latent = model.encoder(model.mix(_hidden_tensor(record)))
            kl_sum += gaussian_kl(latent).item()
            probs, _ = predict(model, record)
            correct += int(np.argmax(probs)) == label
    return {
        "accuracy": correct / len(pairs),
        "kl": kl_sum / len(pairs),
        "count": len(pairs),
    }


def save_stage2(path, model: Stage2Model, corpus: str = "",
                stage1_fingerprint: str = "") -> None:
    """Checkpoint the model (embedded frozen stage-1 included).

    ``stage1_fingerprint`` records the hash of the stage-1 checkpoint file
    this model was conditioned on; ``corpus`` fingerprints its training data.
    """
    meta = {
        "kind": "stage2",
        "config": asdict(model.config),
        "class_count": model.class_count,
        "layer_count": model.layer_count,
        "width": model.width,
        "corpus": corpus,
        "stage1_fingerprint": stage1_fingerprint,
        "stage1": {
            "config": asdict(model.stage1.config),
            "vocab": {"symbols": list(model.stage1.vocab.symbols),
                      "blank_index": model.stage1.vocab.blank_index},
            "layer_count": model.stage1.layer_count,
            "width": model.stage1.width,
        },
        "history": model.history,
    }
    save_checkpoint(path, module_tensors(model), meta)


def load_stage2(path) -> tuple[Stage2Model, dict]:
    """Rebuild a frozen stage-2 model (with its embedded stage-1) and metadata."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "stage2":
        raise FormatError(f"{path}: not a stage-2 checkpoint")
    stage1 = _stage1_from_meta(meta["stage1"])
    raw = dict(meta["config"])
    config = Stage2Config(**raw)
    model = Stage2Model(stage1, meta["layer_count"], meta["width"],
                        meta["class_count"], config)
    load_module_tensors(model, tensors)
    model.history = list(meta.get("history", []))
    model.eval()
    model.requires_grad_(False)
    return model, meta
