"""AP@tIoU evaluation with exact (all-points, uninterpolated) precision-recall area."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import Interval, VideoSample
from .errors import DataError
from .postprocess import PostConfig, localize, temporal_iou

IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
RANGES = {"avg_01_05": (0.1, 0.5), "avg_03_07": (0.3, 0.7), "avg_01_07": (0.1, 0.7)}

Predictions = Mapping[str, Sequence[Interval]]


def _ranked(preds: Predictions):
    flat = [(iv, vid) for vid, ivs in preds.items() for iv in ivs]
    flat.sort(key=lambda p: (-p[0].score, p[1], p[0].start))
    return flat


def match_predictions(preds: Predictions, gts: Predictions, iou_thresh: float) -> list[tuple[str, bool]]:
    """Greedy matching in score order; returns ``(video_id, is_tp)`` per ranked prediction."""
    used = {vid: [False] * len(g) for vid, g in gts.items()}
    out = []
    for iv, vid in _ranked(preds):
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts.get(vid, ())):
            if used[vid][j]:
                continue
            o = temporal_iou(iv, g)
            if o >= iou_thresh and o > best_iou:
                best, best_iou = j, o
        if best >= 0:
            used[vid][best] = True
        out.append((vid, best >= 0))
    return out


def _n_gt(gts: Predictions) -> int:
    n = sum(len(g) for g in gts.values())
    if n == 0:
        raise DataError("empty ground truth")
    return n


def pr_curve(preds: Predictions, gts: Predictions, iou_thresh: float):
    n = _n_gt(gts)
    tp = np.array([t for _, t in match_predictions(preds, gts, iou_thresh)], dtype=float)
    if len(tp) == 0:
        return np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    return ctp / n, ctp / np.arange(1, len(tp) + 1)


def average_precision(preds: Predictions, gts: Predictions, iou_thresh: float) -> float:
    """Sum over true positives of the precision at their rank, divided by #GT."""
    recall, precision = pr_curve(preds, gts, iou_thresh)
    if len(recall) == 0:
        return 0.0
    dr = np.diff(np.concatenate([[0.0], recall]))
    return float((dr * precision).sum())


def point_average_precision(preds: Predictions, points: Mapping[str, Sequence[float]]) -> float:
    """AP where a prediction is correct if it contains an unmatched annotated
    time (seconds). Used for validation, where only points are known."""
    n = sum(len(p) for p in points.values())
    if n == 0:
        raise DataError("empty ground truth")
    used = {vid: [False] * len(p) for vid, p in points.items()}
    tps = []
    for iv, vid in _ranked(preds):
        mid = 0.5 * (iv.start + iv.end)
        best, dist = -1, np.inf
        for j, t in enumerate(points.get(vid, ())):
            if not used[vid][j] and iv.start <= t < iv.end and abs(t - mid) < dist:
                best, dist = j, abs(t - mid)
        if best >= 0:
            used[vid][best] = True
        tps.append(best >= 0)
    if not tps:
        return 0.0
    tp = np.array(tps, dtype=float)
    ctp = np.cumsum(tp)
    return float((tp * ctp / np.arange(1, len(tp) + 1)).sum() / n)


@dataclass
class EvalReport:
    ap_at_iou: dict
    avg_01_05: float
    avg_03_07: float
    avg_01_07: float
    per_video: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["ap_at_iou"] = {f"{k:.1f}": v for k, v in self.ap_at_iou.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["ap_at_iou"] = {float(k): v for k, v in d["ap_at_iou"].items()}
        return cls(**d)

    def table(self, name: str = "model") -> str:
        head = "AP@IoU (%)".ljust(14) + "".join(f"{t:>7.1f}" for t in IOU_THRESHOLDS)
        head += "  | " + "".join(f"{r:>11}" for r in ("(0.1:0.5)", "(0.3:0.7)", "(0.1:0.7)"))
        row = name[:14].ljust(14) + "".join(f"{100 * self.ap_at_iou[t]:>7.2f}" for t in IOU_THRESHOLDS)
        row += "  | " + "".join(f"{100 * v:>11.2f}" for v in (self.avg_01_05, self.avg_03_07, self.avg_01_07))
        return head + "\n" + row


def _range_mean(ap: dict, lo: float, hi: float) -> float:
    vals = [v for t, v in ap.items() if lo - 1e-9 <= t <= hi + 1e-9]
    return float(sum(vals) / len(vals))


def evaluate(preds: Predictions, gts: Predictions) -> EvalReport:
    _n_gt(gts)
    unknown = set(preds) - set(gts)
    if unknown:
        raise DataError(f"predictions for videos without ground truth: {sorted(unknown)[:5]}")
    ap = {t: average_precision(preds, gts, t) for t in IOU_THRESHOLDS}
    per_video = {
        vid: {"n_gt": len(gts[vid]), "n_pred": len(preds.get(vid, ())), "tp": {}} for vid in sorted(gts)
    }
    for t in IOU_THRESHOLDS:
        for vid in per_video:
            per_video[vid]["tp"][f"{t:.1f}"] = 0
        for vid, hit in match_predictions(preds, gts, t):
            per_video[vid]["tp"][f"{t:.1f}"] += int(hit)
    return EvalReport(
        ap_at_iou=ap,
        per_video=per_video,
        meta={"ap_method": "all-points (exact area, no interpolation)", "matching": "per-video greedy"},
        **{k: _range_mean(ap, lo, hi) for k, (lo, hi) in RANGES.items()},
    )


def ground_truth(samples: Sequence[VideoSample]) -> dict:
    """Interval ground truth in seconds; every sample must carry intervals."""
    out = {}
    for s in samples:
        if s.intervals is None:
            raise DataError(f"{s.id}: no interval annotations (evaluation needs the test split)")
        out[s.id] = [Interval(a / s.fps, b / s.fps, 1.0) for a, b in s.intervals]
    return out


def random_baseline(samples: Sequence[VideoSample], seed: int = 0, post: PostConfig | None = None) -> dict:
    """Uniform random frame scores pushed through the default post-processing."""
    post = post or PostConfig()
    rng = np.random.default_rng([seed, 33])
    preds = {}
    for s in samples:
        scores = rng.random(s.length) * s.features.valid_mask
        preds[s.id] = localize(scores, s.fps, post)
    return preds


def write_predictions(preds: Predictions, path) -> None:
    recs = [
        {
            "video_id": vid,
            "intervals": [{"start_s": iv.start, "end_s": iv.end, "score": iv.score} for iv in ivs],
        }
        for vid, ivs in sorted(preds.items())
    ]
    Path(path).write_text(json.dumps(recs, indent=1), encoding="utf-8")


def read_predictions(path) -> dict:
    recs = json.loads(Path(path).read_text(encoding="utf-8"))
    return {
        r["video_id"]: [Interval(i["start_s"], i["end_s"], i["score"]) for i in r["intervals"]] for r in recs
    }
