"""End-to-end glue: both training stages, inference and evaluation from a RunConfig."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .datamodel import Manifest, VideoSample, read_manifest
from .encoders import LocalizationModel, PretextModel
from .errors import ConfigError, DataError
from .evaluation import EvalReport, evaluate, ground_truth, point_average_precision, random_baseline
from .pointsup import TrainResult, embed_video, train_pointsup
from .postprocess import PostConfig, localize
from .pretext import train_pretext
from .prototypes import PrototypeMemory, init_prototype_memory

log = logging.getLogger(__name__)

OnStep = Optional[Callable[[dict], None]]


def open_manifest(path) -> Manifest:
    """Accept a manifest file or the directory holding ``manifest.json``."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return read_manifest(p)


def make_input_fn(cfg: RunConfig) -> Callable[[VideoSample], np.ndarray]:
    if cfg.ablation.use_dynamic:
        return lambda s: s.features.concat()

    def static_only(s: VideoSample) -> np.ndarray:
        x = s.features.concat().copy()
        x[:, s.features.dim :] = 0.0
        return x

    return static_only


def build_pretext_model(cfg: RunConfig, in_dim: int) -> PretextModel:
    torch.manual_seed(cfg.seed)
    return PretextModel(in_dim, cfg.encoder, use_pe=not cfg.ablation.disable_pe)


def run_pretext(cfg: RunConfig, manifest: Manifest, on_step: OnStep = None) -> tuple[PretextModel, list]:
    """Stage 1 over labeled and unlabeled training videos. With pretext
    disabled the freshly initialised model is returned untrained."""
    model = build_pretext_model(cfg, 2 * manifest.dim)
    if cfg.ablation.disable_pretext:
        return model, []
    samples = manifest.load_split("train_labeled", "train_unlabeled")
    if not samples:
        raise DataError("no training videos in manifest")
    records = train_pretext(
        samples, model, cfg.pretext, cfg.aug, seed=cfg.seed, input_fn=make_input_fn(cfg), on_step=on_step
    )
    return model, records


def build_localization_model(
    cfg: RunConfig, in_dim: int, vo_dim: int, seq_state: Optional[dict] = None
) -> LocalizationModel:
    torch.manual_seed(cfg.seed + 1)
    model = LocalizationModel(
        in_dim,
        vo_dim,
        cfg.encoder,
        use_pe=not cfg.ablation.disable_pe,
        use_vo_gate=not cfg.ablation.disable_vo_gate,
        use_proto_decoder=not cfg.ablation.disable_proto_decoder,
        vo_gate_mode=cfg.vo_gate_mode,
    )
    if seq_state is not None:
        mine = model.seq.state_dict()
        bad = [
            f"{k}: checkpoint {tuple(v.shape)} vs model {tuple(mine[k].shape)}"
            for k, v in seq_state.items()
            if k in mine and v.shape != mine[k].shape
        ]
        missing = sorted(set(mine) ^ set(seq_state))
        if bad or missing:
            raise ConfigError("pretext checkpoint does not fit this config: " + "; ".join(bad + missing))
        model.seq.load_state_dict(seq_state)
    return model


def seq_state_of(pretext_model: PretextModel) -> dict:
    return {k: v.clone() for k, v in pretext_model.q.seq.state_dict().items()}


@torch.no_grad()
def score_video(
    model: LocalizationModel, memory: Optional[PrototypeMemory], sample: VideoSample, input_fn
) -> tuple[np.ndarray, np.ndarray]:
    """Gated defect scores and gate values for one video, eval mode."""
    model.eval()
    x = torch.from_numpy(np.array(input_fn(sample), dtype=np.float32))[None]
    vo = torch.from_numpy(np.array(sample.features.vo_feat, dtype=np.float32))[None]
    mask = torch.from_numpy(np.array(sample.features.valid_mask))[None]
    protos = memory.tensor(torch.float32) if memory is not None else None
    out = model(x, vo, mask, protos)
    return out.s_defect[0].numpy().astype(np.float64), out.gate[0].numpy().astype(np.float64)


def predict(
    model: LocalizationModel,
    memory: Optional[PrototypeMemory],
    samples: Sequence[VideoSample],
    post: PostConfig,
    input_fn,
    keep_traces: bool = False,
):
    """Interval predictions per video id; optionally also the frame traces."""
    preds, traces = {}, {}
    for s in samples:
        scores, gate = score_video(model, memory, s, input_fn)
        preds[s.id] = localize(scores, s.fps, post)
        if keep_traces:
            traces[s.id] = {"score": scores, "gate": gate}
    return (preds, traces) if keep_traces else preds


def point_validation_fn(cfg: RunConfig, val: Sequence[VideoSample], input_fn):
    """Validation AP from point labels (val videos carry no intervals)."""
    points = {s.id: [p / s.fps for p in s.points] for s in val}
    if not any(points.values()):
        return None

    def fn(model, memory):
        return point_average_precision(predict(model, memory, val, cfg.post, input_fn), points)

    return fn


@dataclass
class StageTwo:
    model: LocalizationModel
    memory: Optional[PrototypeMemory]
    records: list
    best_epoch: int


def run_pointsup(
    cfg: RunConfig, manifest: Manifest, seq_state: Optional[dict], on_step: OnStep = None
) -> StageTwo:
    """Stage 2 on labeled training videos, best epoch picked on val points."""
    train = manifest.load_split("train_labeled")
    if not train:
        raise DataError("no labeled training videos in manifest")
    val = manifest.load_split("val")
    input_fn = make_input_fn(cfg)
    model = build_localization_model(cfg, 2 * manifest.dim, manifest.vo_dim, seq_state)
    ps = cfg.pointsup
    needs_memory = not (cfg.ablation.disable_proto_decoder and cfg.ablation.disable_proto_loss)
    memory = None
    if needs_memory:
        memory = init_prototype_memory(
            train,
            lambda s: embed_video(model.seq, s, input_fn),
            cfg.k_d,
            cfg.k_b,
            ps.bkg_stride,
            ps.momentum_p,
            seed=cfg.seed,
        )
    res: TrainResult = train_pointsup(
        train,
        model,
        memory,
        ps,
        seed=cfg.seed,
        use_proto_loss=not cfg.ablation.disable_proto_loss,
        input_fn=input_fn,
        validate_fn=point_validation_fn(cfg, val, input_fn) if val else None,
        on_step=on_step,
    )
    return StageTwo(res.model, res.memory, res.records, res.best_epoch)


def evaluate_model(
    cfg: RunConfig, model: LocalizationModel, memory: Optional[PrototypeMemory], test: Sequence[VideoSample],
    keep_traces: bool = False,
):
    gts = ground_truth(test)
    out = predict(model, memory, test, cfg.post, make_input_fn(cfg), keep_traces)
    preds, traces = out if keep_traces else (out, None)
    report = evaluate(preds, gts)
    report.meta["config_hash"] = cfg.hash()
    return report, preds, traces


@dataclass
class RunResult:
    report: EvalReport
    baseline: EvalReport
    stage_two: StageTwo
    pretext_records: list
    timings: dict = field(default_factory=dict)


def run_full(cfg: RunConfig, manifest: Manifest, pretext_seq_state: Optional[dict] = None) -> RunResult:
    """Both stages plus test evaluation. ``pretext_seq_state`` reuses an
    existing stage-1 encoder instead of retraining it."""
    timings = {}
    t0 = time.perf_counter()
    records: list = []
    if pretext_seq_state is None:
        pm, records = run_pretext(cfg, manifest)
        pretext_seq_state = seq_state_of(pm)
    timings["pretext_s"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    two = run_pointsup(cfg, manifest, pretext_seq_state)
    timings["pointsup_s"] = time.perf_counter() - t1
    test = manifest.load_split("test")
    report, _, _ = evaluate_model(cfg, two.model, two.memory, test)
    base = evaluate(random_baseline(test, cfg.eval.baseline_seed, cfg.post), ground_truth(test))
    timings["total_s"] = time.perf_counter() - t0
    report.meta["best_epoch"] = two.best_epoch
    return RunResult(report, base, two, records, timings)
