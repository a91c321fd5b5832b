"""Stage 2: point-supervised training with pseudo labels and prototype losses."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import VideoSample, pad_batch
from .encoders import LocalizationModel
from .errors import ConfigError, NumericError
from .pretext import batches
from .prototypes import PrototypeMemory, update_prototypes

log = logging.getLogger(__name__)

FOCAL_EPS = 1e-7


@dataclass
class PointSupConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    tau2: float = 0.85
    lambda_fd: float = 0.6
    lambda_fb: float = 0.4
    lambda_pd: float = 0.3
    lambda_pb: float = 0.75
    pseudo_thresh: float = 0.5
    focal_gamma: float = 2.0
    epochs: int = 20
    batch_size: int = 4
    k_d: int = 8
    k_b: int = 8
    bkg_stride: int = 30
    momentum_p: float = 0.99
    grad_clip: float = 1.0

    def validate(self) -> None:
        for name in ("lambda_fd", "lambda_fb", "lambda_pd", "lambda_pb"):
            if getattr(self, name) < 0:
                raise ConfigError(f"pointsup.{name} must be >= 0")
        if not 0.0 < self.pseudo_thresh < 1.0:
            raise ConfigError("pointsup.pseudo_thresh must be in (0, 1)")
        if self.tau2 <= 0:
            raise ConfigError("pointsup.tau2 must be positive")
        if self.k_d < 1 or self.k_b < 1 or self.batch_size < 1 or self.bkg_stride < 1:
            raise ConfigError("pointsup.k_d, k_b, batch_size, bkg_stride must be >= 1")
        if not 0.0 <= self.momentum_p <= 1.0:
            raise ConfigError("pointsup.momentum_p must be in [0, 1]")


@dataclass(frozen=True)
class PseudoLabels:
    defect_frames: tuple  # T+: annotated points and pseudo defect frames
    bkg_frames: tuple  # T-: pseudo background frames


def mine_pseudo_labels(points: Sequence[int], scores, thresh: float) -> PseudoLabels:
    """Grow each annotated point over neighbouring frames scoring >= ``thresh``.

    Growth stops at the first sub-threshold frame and never crosses the
    midpoint to the neighbouring point. Every other frame scoring below
    ``thresh`` is pseudo background.
    """
    s = np.asarray(scores, dtype=np.float64)
    T = len(s)
    pts = sorted(int(p) for p in points)
    pos = set(pts)
    for i, p in enumerate(pts):
        lo = pts[i - 1] if i > 0 else None
        hi = pts[i + 1] if i + 1 < len(pts) else None
        t = p - 1
        while t >= 0 and s[t] >= thresh and (lo is None or 2 * t > lo + p):
            pos.add(t)
            t -= 1
        t = p + 1
        while t < T and s[t] >= thresh and (hi is None or 2 * t < p + hi):
            pos.add(t)
            t += 1
    neg = tuple(t for t in range(T) if s[t] < thresh and t not in pos)
    return PseudoLabels(tuple(sorted(pos)), neg)


def focal_term(p, gamma: float = 2.0):
    """-(1 - p)^gamma * log(p); p is clamped to >= 1e-7."""
    if isinstance(p, torch.Tensor):
        p = p.clamp(min=FOCAL_EPS)
        return -((1.0 - p) ** gamma) * torch.log(p)
    p = max(float(p), FOCAL_EPS)
    return -((1.0 - p) ** gamma) * math.log(p)


def _gather(values: torch.Tensor, labels: Sequence[PseudoLabels], which: str) -> torch.Tensor:
    """Rows of ``values`` [B, T, ...] at each video's label frames, concatenated."""
    parts = []
    for b, lab in enumerate(labels):
        idx = getattr(lab, which)
        if idx:
            parts.append(values[b, list(idx)])
    if not parts:
        return values.new_zeros((0,) + tuple(values.shape[2:]))
    return torch.cat(parts)


def _batched(x: torch.Tensor, labels):
    if isinstance(labels, PseudoLabels):
        return x.unsqueeze(0), [labels]
    return x, list(labels)


def base_loss(s_defect: torch.Tensor, labels, cfg: PointSupConfig) -> torch.Tensor:
    """Focal loss on defect frames (S) and pseudo-background frames (1 - S),
    each averaged over its own set and pooled over the batch."""
    s_defect, labels = _batched(s_defect, labels)
    total = s_defect.new_zeros(())
    d = _gather(s_defect, labels, "defect_frames")
    if d.numel():
        total = total + cfg.lambda_fd * focal_term(d, cfg.focal_gamma).mean()
    b = _gather(s_defect, labels, "bkg_frames")
    if b.numel():
        total = total + cfg.lambda_fb * focal_term(1.0 - b, cfg.focal_gamma).mean()
    return total


def prototype_nce(feats: torch.Tensor, own: torch.Tensor, other: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean over ``feats`` of -log S(f, p*) / (S(f, p*) + sum_j S(f, other_j)),
    p* being the most cosine-similar row of ``own``."""
    if feats.shape[0] == 0:
        return feats.new_zeros(())
    f = F.normalize(feats, dim=-1)
    own_sim = f @ F.normalize(own.to(f.dtype), dim=-1).T / tau
    other_sim = f @ F.normalize(other.to(f.dtype), dim=-1).T / tau
    l_pos = own_sim.max(dim=1, keepdim=True).values
    return (torch.logsumexp(torch.cat([l_pos, other_sim], dim=1), dim=1) - l_pos.squeeze(1)).mean()


class ProtoLoss(NamedTuple):
    total: torch.Tensor
    defect: torch.Tensor
    bkg: torch.Tensor


def proto_contrastive_loss(
    embed: torch.Tensor, labels, memory: PrototypeMemory, cfg: PointSupConfig
) -> ProtoLoss:
    embed, labels = _batched(embed, labels)
    pd = torch.as_tensor(memory.defect_protos, dtype=embed.dtype)
    pb = torch.as_tensor(memory.bkg_protos, dtype=embed.dtype)
    l_def = prototype_nce(_gather(embed, labels, "defect_frames"), pd, pb, cfg.tau2)
    l_bkg = prototype_nce(_gather(embed, labels, "bkg_frames"), pb, pd, cfg.tau2)
    return ProtoLoss(cfg.lambda_pd * l_def + cfg.lambda_pb * l_bkg, l_def, l_bkg)


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    focal: torch.Tensor
    proto: torch.Tensor
    defect: torch.Tensor
    bkg: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(v.detach()) for k, v in self._asdict().items()}


def total_loss(
    s_defect: torch.Tensor,
    embed: torch.Tensor,
    labels,
    memory: Optional[PrototypeMemory],
    cfg: PointSupConfig,
    use_proto_loss: bool = True,
) -> LossBreakdown:
    focal = base_loss(s_defect, labels, cfg)
    if use_proto_loss and memory is not None:
        proto = proto_contrastive_loss(embed, labels, memory, cfg)
    else:
        z = focal.new_zeros(())
        proto = ProtoLoss(z, z, z)
    return LossBreakdown(focal + proto.total, focal, proto.total, proto.defect, proto.bkg)


def make_optimizer(model: LocalizationModel, cfg: PointSupConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def pointsup_step(
    batch: Sequence[VideoSample],
    model: LocalizationModel,
    memory: Optional[PrototypeMemory],
    optimizer: torch.optim.Optimizer,
    cfg: PointSupConfig,
    use_proto_loss: bool = True,
    input_fn: Callable[[VideoSample], np.ndarray] = lambda s: s.features.concat(),
) -> tuple[dict, Optional[PrototypeMemory]]:
    """Forward, mine pseudo labels on the gated scores, one optimizer step,
    then the prototype momentum update. Mutates ``model``."""
    if len(batch) == 0:
        raise ValueError("pointsup_step: empty batch")
    x, vo, mask = pad_batch(batch, [input_fn(s) for s in batch])
    x, vo, mask = torch.from_numpy(x), torch.from_numpy(vo), torch.from_numpy(mask)
    model.train()
    protos = memory.tensor(x.dtype) if memory is not None else None
    out = model(x, vo, mask, protos)

    scores = out.s_defect.detach().numpy()
    labels = [
        mine_pseudo_labels(s.points, scores[b, : s.length], cfg.pseudo_thresh) for b, s in enumerate(batch)
    ]
    # padded frames are never labelled
    labels = [
        PseudoLabels(
            tuple(t for t in lab.defect_frames if s.features.valid_mask[t]),
            tuple(t for t in lab.bkg_frames if s.features.valid_mask[t]),
        )
        for lab, s in zip(labels, batch)
    ]
    losses = total_loss(out.s_defect, out.embed, labels, memory, cfg, use_proto_loss)
    if not torch.isfinite(losses.total):
        raise NumericError(f"non-finite point-supervised loss {losses.total.item()}")

    # a batch with no labelled frame at all carries no gradient
    if losses.total.requires_grad:
        optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()

    if memory is not None:
        emb = F.normalize(out.embed.detach(), dim=-1)
        memory = update_prototypes(
            memory,
            _gather(emb, labels, "defect_frames").numpy(),
            _gather(emb, labels, "bkg_frames").numpy(),
        )
    rec = losses.as_floats()
    rec["n_defect_frames"] = sum(len(lab.defect_frames) for lab in labels)
    rec["n_bkg_frames"] = sum(len(lab.bkg_frames) for lab in labels)
    return rec, memory


@torch.no_grad()
def embed_video(model, sample: VideoSample, input_fn=lambda s: s.features.concat()) -> np.ndarray:
    """Frame embeddings [T, d] from a frame-sequence encoder (eval mode)."""
    was = model.training
    model.eval()
    x = torch.from_numpy(np.array(input_fn(sample), dtype=np.float32))[None]
    mask = torch.from_numpy(np.array(sample.features.valid_mask))[None]
    out = model(x, mask)[0].numpy()
    model.train(was)
    return out


class TrainResult(NamedTuple):
    model: LocalizationModel
    memory: Optional[PrototypeMemory]
    records: list
    best_epoch: int


def train_pointsup(
    samples: Sequence[VideoSample],
    model: LocalizationModel,
    memory: Optional[PrototypeMemory],
    cfg: PointSupConfig,
    seed: int = 0,
    use_proto_loss: bool = True,
    input_fn: Callable[[VideoSample], np.ndarray] = lambda s: s.features.concat(),
    validate_fn: Optional[Callable[[LocalizationModel, Optional[PrototypeMemory]], float]] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train for ``cfg.epochs``; if ``validate_fn`` is given, keep the state of
    the best-scoring epoch (earliest on ties)."""
    cfg.validate()
    rng = np.random.default_rng([seed, 22])
    opt = make_optimizer(model, cfg)
    records, step = [], 0
    best = (-math.inf, -1, None, None)
    for epoch in range(cfg.epochs):
        for batch in batches(samples, cfg.batch_size, rng):
            rec, memory = pointsup_step(batch, model, memory, opt, cfg, use_proto_loss, input_fn)
            rec.update(epoch=epoch, step=step)
            records.append(rec)
            if on_step:
                on_step(rec)
            step += 1
        ep = [r["total"] for r in records if r["epoch"] == epoch]
        msg = f"pointsup epoch {epoch}: mean loss {np.mean(ep):.4f}"
        if validate_fn is not None:
            score = validate_fn(model, memory)
            records.append({"epoch": epoch, "val_score": score})
            if on_step:
                on_step(records[-1])
            msg += f", val {score:.4f}"
            if score > best[0]:
                best = (score, epoch, copy.deepcopy(model.state_dict()), memory)
        log.info(msg)
    if validate_fn is not None and best[2] is not None:
        model.load_state_dict(best[2])
        memory = best[3]
        return TrainResult(model, memory, records, best[1])
    return TrainResult(model, memory, records, cfg.epochs - 1)
