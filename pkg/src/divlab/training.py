"""Training loop: Adam, token-count batching, patience-based lr schedule.

The schedule mirrors the usual recipe: evaluate dev perplexity every
checkpoint_every updates, multiply the learning rate by lr_reduce_factor
after `patience` checkpoints without improvement, and stop after
`stop_after` checkpoints without improvement. The best checkpoint by dev
perplexity is restored at the end.
"""

from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass, field

import torch

from .model import (FactoredTransformer, ModelConfig, ModelError,
                    divergent_aware_loss, make_batch, unfactored_loss)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    learning_rate: float = 3e-4
    batch_tokens: int = 512
    checkpoint_every: int = 50
    lr_reduce_factor: float = 0.7
    patience: int = 4
    stop_after: int = 20
    max_updates: int = 2000
    seed: int = 1


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    CSV_HEADER = "checkpoint,updates,mt_loss,factor_loss,dev_ppl,lr"

    def add(self, checkpoint, updates, mt_loss, factor_loss, dev_ppl, lr):
        self.rows.append((checkpoint, updates, mt_loss, factor_loss,
                          dev_ppl, lr))

    def to_csv(self):
        lines = [self.CSV_HEADER]
        for ck, up, mt, fac, ppl, lr in self.rows:
            lines.append(f"{ck},{up},{mt:.6f},{fac:.6f},{ppl:.6f},{lr:.6g}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def make_batches(examples, batch_tokens, rng):
    """Group examples into batches of roughly batch_tokens target tokens.

    Examples are bucketed by target length to limit padding, then batch
    order is shuffled.
    """
    order = sorted(range(len(examples)),
                   key=lambda i: (len(examples[i]["tgt_ids"]), i))
    batches = []
    cur, cur_tokens = [], 0
    for i in order:
        n = len(examples[i]["tgt_ids"]) + 1
        if cur and cur_tokens + n > batch_tokens:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(examples[i])
        cur_tokens += n
    if cur:
        batches.append(cur)
    rng.shuffle(batches)
    return batches


def dev_perplexity(model, dev_examples, batch_tokens=1024):
    """Teacher-forced token perplexity (no label smoothing) on a dev set."""
    model.eval()
    total_nll, total_tokens = 0.0, 0
    rng = random.Random(0)
    with torch.no_grad():
        for group in make_batches(dev_examples, batch_tokens, rng):
            batch = make_batch(group)
            token_logits, _ = model.forward(batch, train_mode=False)
            nll = unfactored_loss(token_logits, batch, label_smoothing=0.0)
            count = int((~batch.tgt_pad_mask).sum())
            total_nll += float(nll) * count
            total_tokens += count
    return math.exp(total_nll / max(total_tokens, 1))


def train(train_examples, dev_examples, config: ModelConfig,
          optim_config: OptimConfig = None, seed=None):
    """Train a factored (or unfactored) transformer.

    train/dev examples are encoded id dicts as produced by
    bpe.encode_corpus. Returns (model, TrainingLog); the model carries the
    best dev-perplexity parameters.
    """
    if not train_examples:
        raise ValueError("empty training set")
    if not dev_examples:
        raise ValueError("a dev set is required for checkpoint selection")
    optim_config = optim_config or OptimConfig()
    if seed is None:
        seed = optim_config.seed

    torch.manual_seed(seed)
    rng = random.Random(seed)
    model = FactoredTransformer(config)
    opt = torch.optim.Adam(model.parameters(),
                           lr=optim_config.learning_rate)
    log = TrainingLog()

    best_ppl = float("inf")
    best_state = None
    checkpoints_since_best = 0
    updates = 0
    checkpoint = 0
    mt_acc, fac_acc, acc_n = 0.0, 0.0, 0
    stop = False

    while not stop and updates < optim_config.max_updates:
        for group in make_batches(train_examples, optim_config.batch_tokens,
                                  rng):
            batch = make_batch(group)
            model.train()
            token_logits, factor_logits = model.forward(batch,
                                                        train_mode=True)
            loss = divergent_aware_loss(token_logits, factor_logits, batch,
                                        config.label_smoothing)
            total = loss.total
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at update {updates} "
                    f"(checkpoint {checkpoint})")
            opt.zero_grad()
            total.backward()
            opt.step()
            updates += 1
            mt_acc += float(loss.mt_loss.detach())
            fac_acc += float(loss.factor_loss.detach())
            acc_n += 1

            if updates % optim_config.checkpoint_every == 0:
                checkpoint += 1
                ppl = dev_perplexity(model, dev_examples)
                lr = opt.param_groups[0]["lr"]
                log.add(checkpoint, updates, mt_acc / acc_n, fac_acc / acc_n,
                        ppl, lr)
                mt_acc, fac_acc, acc_n = 0.0, 0.0, 0
                if ppl < best_ppl:
                    best_ppl = ppl
                    best_state = copy.deepcopy(model.state_dict())
                    checkpoints_since_best = 0
                else:
                    checkpoints_since_best += 1
                    if checkpoints_since_best % optim_config.patience == 0:
                        for group_ in opt.param_groups:
                            group_["lr"] *= optim_config.lr_reduce_factor
                    if checkpoints_since_best >= optim_config.stop_after:
                        stop = True
            if stop or updates >= optim_config.max_updates:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, log


def train_unfactored(train_examples, dev_examples, config: ModelConfig,
                     optim_config: OptimConfig = None, seed=None):
    """Baseline objective: same pipeline with the factor stream disabled."""
    cfg_dict = config.to_dict()
    cfg_dict.update(factored=False,
                    d_token_embed=config.d_model,
                    d_factor_embed=0)
    plain = ModelConfig.from_dict(cfg_dict)
    return train(train_examples, dev_examples, plain, optim_config, seed)


def save_checkpoint(model, path):
    torch.save({"config": model.config.to_dict(),
                "state_dict": model.state_dict()}, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = FactoredTransformer(ModelConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
