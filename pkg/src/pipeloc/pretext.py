"""Stage 1: momentum-contrast pretraining of the frame-sequence encoder."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugConfig, random_aug
from .datamodel import VideoSample, pad_batch
from .encoders import PretextModel, momentum_update
from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)


@dataclass
class PretextConfig:
    lr: float = 0.06
    momentum_sgd: float = 0.95
    weight_decay: float = 0.02
    tau: float = 0.01
    queue_size: int = 256
    epochs: int = 5
    batch_size: int = 8
    m: float = 0.99  # key-encoder momentum
    grad_clip: float = 1.0

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"pretext.tau={self.tau} must be positive")
        if self.queue_size < self.batch_size:
            raise ConfigError("pretext.queue_size must be >= pretext.batch_size")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("pretext.batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.m <= 1.0:
            raise ConfigError("pretext.m must be in [0, 1]")

    @classmethod
    def full_scale(cls) -> "PretextConfig":
        """Published full-scale values (queue of 2200)."""
        return cls(queue_size=2200)


@dataclass(frozen=True, eq=False)
class NegativeQueue:
    buffer: torch.Tensor  # [Q_size, d]
    head: int = 0  # next write position
    filled: int = 0

    @property
    def size(self) -> int:
        return self.buffer.shape[0]

    @classmethod
    def empty(cls, size: int, dim: int, dtype=torch.float32) -> "NegativeQueue":
        return cls(torch.zeros(size, dim, dtype=dtype), 0, 0)

    @classmethod
    def random(cls, size: int, dim: int, generator: Optional[torch.Generator] = None, dtype=torch.float32):
        """Random unit rows, all counted as usable negatives."""
        buf = F.normalize(torch.randn(size, dim, generator=generator, dtype=dtype), dim=-1)
        return cls(buf, 0, size)

    def negatives(self) -> torch.Tensor:
        """Usable rows (any order)."""
        return self.buffer if self.filled == self.size else self.buffer[: self.filled]

    def ordered(self) -> torch.Tensor:
        """Usable rows from oldest to newest."""
        if self.filled < self.size:
            return self.buffer[: self.filled]
        return torch.cat([self.buffer[self.head :], self.buffer[: self.head]])


def queue_push(queue: NegativeQueue, keys: torch.Tensor) -> NegativeQueue:
    """FIFO insert of ``keys`` [B, d], replacing the oldest rows."""
    keys = keys.detach()
    B = keys.shape[0]
    if B > queue.size:
        raise ValueError(f"cannot push {B} keys into a queue of size {queue.size}")
    if B == 0:
        return queue
    buf = queue.buffer.clone()
    idx = (queue.head + torch.arange(B)) % queue.size
    buf[idx] = keys.to(buf.dtype)
    return NegativeQueue(buf, int((queue.head + B) % queue.size), min(queue.filled + B, queue.size))


def info_nce_loss(
    q: torch.Tensor,
    pos: torch.Tensor,
    negatives: Union[NegativeQueue, torch.Tensor],
    tau: float,
    reduction: str = "mean",
) -> torch.Tensor:
    """-log S(q,pos) / (S(q,pos) + sum_i S(q,neg_i)),  S = exp(cos / tau).

    Evaluated in log space, so tiny temperatures do not overflow.
    """
    if tau <= 0:
        raise ConfigError(f"temperature tau={tau} must be positive")
    negs = negatives.negatives() if isinstance(negatives, NegativeQueue) else negatives
    if negs.shape[0] == 0:
        raise ValueError("info_nce_loss needs at least one negative")
    single = q.ndim == 1
    q, pos = F.normalize(q.reshape(-1, q.shape[-1]), dim=-1), F.normalize(pos.reshape(-1, pos.shape[-1]), dim=-1)
    negs = F.normalize(negs.to(q.dtype), dim=-1)
    l_pos = (q * pos).sum(-1, keepdim=True) / tau
    l_neg = q @ negs.T / tau
    loss = torch.logsumexp(torch.cat([l_pos, l_neg], dim=1), dim=1) - l_pos.squeeze(1)
    if single:
        return loss[0]
    if reduction == "none":
        return loss
    return loss.mean()


def make_optimizer(model: PretextModel, cfg: PretextConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        model.q.parameters(), lr=cfg.lr, momentum=cfg.momentum_sgd, weight_decay=cfg.weight_decay
    )


def pretext_step(
    batch: Sequence[VideoSample],
    model: PretextModel,
    queue: NegativeQueue,
    optimizer: torch.optim.Optimizer,
    cfg: PretextConfig,
    aug_cfg: AugConfig,
    rng: np.random.Generator,
    input_fn: Callable[[VideoSample], np.ndarray] = lambda s: s.features.concat(),
) -> tuple[float, NegativeQueue]:
    """One contrastive update. Mutates ``model``; returns (mean loss, new queue)."""
    if len(batch) == 0:
        raise ValueError("pretext_step: empty batch")
    raw = [input_fn(s) for s in batch]
    views = []
    for _ in range(2):
        views.append([random_aug(x, s.features.valid_mask, aug_cfg, rng) for x, s in zip(raw, batch)])
    x_q, _, mask = pad_batch(batch, views[0])
    x_k, _, _ = pad_batch(batch, views[1])
    x_q, x_k, mask = torch.from_numpy(x_q), torch.from_numpy(x_k), torch.from_numpy(mask)

    model.q.train()
    f_q = model.q(x_q, mask)
    model.k.eval()
    with torch.no_grad():
        f_pos = model.k(x_k, mask)
    loss = info_nce_loss(f_q, f_pos, queue, cfg.tau)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite pretext loss {loss.item()}")

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.q.parameters(), cfg.grad_clip)
    optimizer.step()
    momentum_update(model.k, model.q, cfg.m)
    return float(loss.item()), queue_push(queue, f_pos)


def batches(items: Sequence, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(items))
    for i in range(0, len(items), batch_size):
        yield [items[j] for j in order[i : i + batch_size]]


def train_pretext(
    samples: Sequence[VideoSample],
    model: PretextModel,
    cfg: PretextConfig,
    aug_cfg: AugConfig,
    seed: int = 0,
    input_fn: Callable[[VideoSample], np.ndarray] = lambda s: s.features.concat(),
    on_step: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Run all epochs; returns per-step records ``{epoch, step, loss}``."""
    cfg.validate()
    aug_cfg.validate()
    rng = np.random.default_rng([seed, aug_cfg.seed, 11])
    gen = torch.Generator().manual_seed(seed)
    queue = NegativeQueue.random(cfg.queue_size, model.cfg.d_model, generator=gen)
    opt = make_optimizer(model, cfg)
    records, step = [], 0
    for epoch in range(cfg.epochs):
        for batch in batches(samples, cfg.batch_size, rng):
            loss, queue = pretext_step(batch, model, queue, opt, cfg, aug_cfg, rng, input_fn)
            rec = {"epoch": epoch, "step": step, "loss": loss}
            records.append(rec)
            if on_step:
                on_step(rec)
            step += 1
        ep = [r["loss"] for r in records if r["epoch"] == epoch]
        log.info("pretext epoch %d: mean loss %.4f", epoch, float(np.mean(ep)) if ep else math.nan)
    return records
