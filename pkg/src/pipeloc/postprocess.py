"""Frame scores -> scored time intervals (multi-threshold proposals + temporal NMS)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import Interval
from .errors import ConfigError


def _default_thresholds():
    return [round(0.9 - 0.1 * i, 1) for i in range(9)]


@dataclass
class PostConfig:
    thresholds: list = field(default_factory=_default_thresholds)
    nms_iou: float = 0.5
    min_len_frames: int = 2
    merge_gap_frames: int = 1

    def validate(self) -> None:
        th = list(self.thresholds)
        if not th or any(not 0.0 < t < 1.0 for t in th):
            raise ConfigError("post.thresholds must be a non-empty list in (0, 1)")
        if any(b >= a for a, b in zip(th, th[1:])):
            raise ConfigError("post.thresholds must be strictly descending")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError("post.nms_iou must be in (0, 1]")
        if self.min_len_frames < 1 or self.merge_gap_frames < 0:
            raise ConfigError("post.min_len_frames >= 1 and post.merge_gap_frames >= 0 required")


def frame_runs(above: np.ndarray, merge_gap: int, min_len: int) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive (start, end) frame pairs, bridging
    gaps of at most ``merge_gap`` frames and dropping runs shorter than
    ``min_len``."""
    above = np.asarray(above, dtype=bool)
    if not above.any():
        return []
    d = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    runs = [[int(starts[0]), int(ends[0])]]
    for s, e in zip(starts[1:], ends[1:]):
        if s - runs[-1][1] - 1 <= merge_gap:
            runs[-1][1] = int(e)
        else:
            runs.append([int(s), int(e)])
    return [(s, e) for s, e in runs if e - s + 1 >= min_len]


def scores_to_intervals(scores, fps: float, cfg: PostConfig) -> list[Interval]:
    """Candidates pooled over all thresholds, before NMS."""
    s = np.asarray(scores, dtype=np.float64)
    out = []
    for th in cfg.thresholds:
        for a, b in frame_runs(s >= th, cfg.merge_gap_frames, cfg.min_len_frames):
            out.append(Interval(a / fps, (b + 1) / fps, float(s[a : b + 1].mean())))
    return out


def temporal_iou(a: Interval, b: Interval) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    if union <= 0:
        return 0.0
    return inter / union


def _rank_key(iv: Interval):
    return (-iv.score, iv.start, iv.end - iv.start)


def nms(candidates: list[Interval], nms_iou: float) -> list[Interval]:
    """Greedy temporal NMS; ties broken by earlier start, then shorter length."""
    pending = sorted(candidates, key=_rank_key)
    keep = []
    while pending:
        best = pending.pop(0)
        keep.append(best)
        pending = [c for c in pending if temporal_iou(best, c) <= nms_iou]
    return keep


def localize(scores, fps: float, cfg: PostConfig) -> list[Interval]:
    return nms(scores_to_intervals(scores, fps, cfg), cfg.nms_iou)
