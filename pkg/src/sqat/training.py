"""Teacher-forced training of the recognizer."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .dataset import Dataset
from .metrics import mean_cer
from .model import ModelConfig, Recognizer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-2
    warmup_steps: int = 100
    grad_clip: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class TrainReport:
    train_cer: float
    test_cer: float
    final_loss: float
    losses: list


class TrainingDiverged(RuntimeError):
    pass


def _targets(texts, model: Recognizer):
    """Decoder inputs ``[bos]+text`` and label rows ``text+[eos]`` padded to max_len."""
    cs = model.charset
    L = model.config.max_len
    inp = np.full((len(texts), L), cs.pad, dtype=np.int64)
    lab = np.full((len(texts), L), -100, dtype=np.int64)
    for i, text in enumerate(texts):
        ids = [cs.index(c) for c in text]
        if len(ids) + 1 > L:
            raise ValueError(f"text longer than max_len - 1: {text!r}")
        inp[i, : len(ids) + 1] = [cs.bos] + ids
        lab[i, : len(ids) + 1] = ids + [cs.eos]
    return torch.as_tensor(inp), torch.as_tensor(lab)


def evaluate_cer(model: Recognizer, samples, batch: int = 100) -> float:
    hyps = []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        gens = model.generate_batch(np.stack([s.image for s in chunk]))
        hyps.extend(g.text for g in gens)
    return mean_cer([s.text for s in samples], hyps)


def train(dataset: Dataset, config: TrainConfig | None = None, seed: int = 0,
          eval_train: int = 200) -> tuple[Recognizer, TrainReport]:
    """Fit a fresh recognizer on ``dataset.train``.

    Cross-entropy is summed over label positions and averaged over the batch;
    AdamW with linear warmup and cosine decay.  Deterministic for a fixed
    seed.  ``eval_train`` caps the number of train lines decoded for the
    reported train CER.
    """
    config = config or TrainConfig()
    if not dataset.train:
        raise ValueError("empty training split")
    model = Recognizer(dataset.charset, config.model, seed=seed)
    if config.epochs == 0:
        return model, TrainReport(float("nan"), float("nan"), float("nan"), [])

    images = torch.as_tensor(np.stack([s.image for s in dataset.train]))
    inp, lab = _targets([s.text for s in dataset.train], model)
    n = len(images)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs

    def lr_at(step):
        if step < config.warmup_steps:
            return (step + 1) / config.warmup_steps
        frac = (step - config.warmup_steps) / max(1, total - config.warmup_steps)
        return 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))

    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    rng = np.random.default_rng([seed, 1])
    model.train()
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            logits = model(images[idx], inp[idx])
            loss = nn.functional.cross_entropy(
                logits.reshape(-1, logits.shape[-1]), lab[idx].reshape(-1),
                ignore_index=-100, reduction="sum") / len(idx)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sched.step()
            total_loss += loss.item() * len(idx)
        losses.append(total_loss / n)
        log.info("epoch %d loss %.4f", epoch, losses[-1])
    model.eval()

    train_cer = evaluate_cer(model, dataset.train[:eval_train])
    test_cer = evaluate_cer(model, dataset.test)
    return model, TrainReport(train_cer, test_cer, losses[-1], losses)
