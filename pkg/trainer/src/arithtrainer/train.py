"""Training loop: AdamW, linear warmup, early stopping on validation loss.

Cross-entropy is computed over the shifted character stream (PAD
ignored).  Processed tokens are accumulated so the run's compute
budget can be reported as 6 * params * tokens.  A non-finite loss
aborts immediately rather than silently producing a junk model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .data import TaskExample, batches, encode_specs, encode_targets
from .model import ModelConfig, SpecToProgramModel, estimate_flops
from .vocab import PAD, Vocab

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    warmup_steps: int = 100
    patience: int = 5
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class TrainResult:
    model: SpecToProgramModel
    vocab: Vocab
    epochs: int = 0
    steps: int = 0
    tokens: int = 0
    best_val_loss: float = math.inf
    history: list = field(default_factory=list)

    @property
    def flops(self) -> float:
        return estimate_flops(self.model.n_params(), self.tokens)


def _epoch_loss(model, spec, targets, idx_batches, optimizer=None, scheduler=None,
                grad_clip=1.0, counter=None):
    loss_fn = nn.CrossEntropyLoss(ignore_index=PAD)
    total, count = 0.0, 0
    for idx in idx_batches:
        inp, out = targets[idx, :-1], targets[idx, 1:]
        logits = model(spec[idx], inp)
        loss = loss_fn(logits.reshape(-1, logits.shape[-1]), out.reshape(-1))
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {count}")
        if optimizer is not None:
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
            optimizer.step()
            scheduler.step()
            if counter is not None:
                counter["steps"] += 1
                counter["tokens"] += int((out != PAD).sum())
        n_tok = int((out != PAD).sum())
        total += float(loss.detach()) * n_tok
        count += n_tok
    return total / max(count, 1)


def train(
    train_tasks: list[TaskExample],
    val_tasks: list[TaskExample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    vocab: Vocab | None = None,
) -> TrainResult:
    vocab = vocab or Vocab.default()
    if model_cfg.vocab_size != vocab.size:
        raise ValueError(
            f"model vocab_size {model_cfg.vocab_size} != vocabulary size {vocab.size}"
        )
    torch.manual_seed(train_cfg.seed)
    model = SpecToProgramModel(model_cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: min(1.0, (step + 1) / max(train_cfg.warmup_steps, 1))
    )
    spec_tr = encode_specs(train_tasks, model_cfg.n_pairs)
    tgt_tr = encode_targets(train_tasks, vocab, model_cfg.max_len)
    spec_va = encode_specs(val_tasks, model_cfg.n_pairs)
    tgt_va = encode_targets(val_tasks, vocab, model_cfg.max_len)
    gen = torch.Generator().manual_seed(train_cfg.seed)

    result = TrainResult(model, vocab)
    best_state = None
    bad_epochs = 0
    counter = {"steps": 0, "tokens": 0}
    for epoch in range(train_cfg.max_epochs):
        model.train()
        tr_loss = _epoch_loss(
            model, spec_tr, tgt_tr,
            batches(len(train_tasks), train_cfg.batch_size, gen),
            optimizer, scheduler, train_cfg.grad_clip, counter,
        )
        model.eval()
        with torch.no_grad():
            va_loss = _epoch_loss(
                model, spec_va, tgt_va,
                batches(len(val_tasks), train_cfg.batch_size, gen),
            )
        result.epochs = epoch + 1
        result.steps = counter["steps"]
        result.tokens = counter["tokens"]
        result.history.append({"epoch": epoch, "train_loss": tr_loss, "val_loss": va_loss})
        log.info("epoch %d: train %.4f val %.4f", epoch, tr_loss, va_loss)
        if va_loss < result.best_val_loss - 1e-6:
            result.best_val_loss = va_loss
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                log.info("early stop at epoch %d", epoch)
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return result
