"""Feature-level simulator of pipe inspection videos.

The camera prior: the crawler drives forward at cruise speed with the camera
facing ahead, and stops and pans the camera while a defect is in view.
Static and dynamic features are class-conditioned Gaussian mixtures with a
controllable separation; VO features are a noisy linear embedding of the
simulated pose track.
"""

from __future__ import annotations

import dataclasses
import json
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    FeatureSequence,
    Manifest,
    ManifestEntry,
    VideoSample,
    write_feature_file,
    write_manifest,
)
from .errors import ConfigError, DataError


@dataclass
class GenConfig:
    n_videos: int = 500
    mean_duration_s: float = 180.0
    duration_spread: float = 0.6  # durations ~ U[(1-s), (1+s)] * mean
    fps: float = 3.0
    defect_fraction: float = 0.15
    mean_defects_per_video: float = 5.0  # over defect-containing videos
    p_single_defect: float = 0.49
    p_defect_free_video: float = 0.2
    interval_sigma: float = 0.5  # log-normal shape of defect durations
    min_gap_frames: int = 3
    false_stops_per_video: float = 1.0  # stops without a defect
    dim: int = 32
    vo_dim: int = 16
    n_defect_components: int = 3
    n_bkg_components: int = 4
    # 0.34 puts the frame-wise Bayes classifier at AUC ~0.90
    # (scripts/calibrate_separation.py, 120 videos: 0.32 -> 0.886, 0.36 -> 0.919).
    separation: float = 0.34
    drift_sigma: float = 0.6  # stationary std of the AR(1) feature drift
    drift_rho: float = 0.9
    noise_sigma: float = 1.0
    vo_noise_sigma: float = 0.5
    unlabeled_share: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        for name in ("defect_fraction", "p_single_defect", "p_defect_free_video", "unlabeled_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"gen.{name}={v} must be a probability in [0, 1]")
        if self.mean_duration_s <= 0 or self.fps <= 0:
            raise ConfigError("gen.mean_duration_s and gen.fps must be positive")
        if not 0.0 <= self.duration_spread < 1.0:
            raise ConfigError("gen.duration_spread must be in [0, 1)")
        if self.mean_duration_s * (1 - self.duration_spread) * self.fps < 1:
            raise ConfigError("gen: shortest possible video is shorter than one frame")
        if self.n_videos < 0 or self.dim < 1 or self.vo_dim < 1:
            raise ConfigError("gen.n_videos, gen.dim, gen.vo_dim must be non-negative / positive")
        if self.mean_defects_per_video < 1:
            raise ConfigError("gen.mean_defects_per_video must be >= 1")
        if not 0 <= self.drift_rho < 1:
            raise ConfigError("gen.drift_rho must be in [0, 1)")

    @property
    def median_defect_s(self) -> float:
        """Median defect duration that makes the pooled defect share hit ``defect_fraction``."""
        p_def = 1.0 - self.p_defect_free_video
        if p_def == 0 or self.defect_fraction == 0:
            return 0.0
        mean_len = self.defect_fraction * self.mean_duration_s / (self.mean_defects_per_video * p_def)
        return mean_len / math.exp(self.interval_sigma**2 / 2)


@dataclass
class PoseTrack:
    forward_velocity: np.ndarray  # m/s
    angular_rate: np.ndarray  # rad/s, magnitude


@dataclass
class _Components:
    """Dataset-wide mixture parameters, shared by every video of one config."""

    bkg_static: np.ndarray
    bkg_dynamic: np.ndarray
    def_static: np.ndarray  # offsets added to the scene background
    def_dynamic: np.ndarray
    vo_proj: np.ndarray

    @classmethod
    def build(cls, cfg: GenConfig) -> "_Components":
        rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
        D = cfg.dim

        def unit(n):
            u = rng.standard_normal((n, D))
            return u / np.linalg.norm(u, axis=1, keepdims=True)

        bkg_s = rng.standard_normal((cfg.n_bkg_components, D)) * 0.5
        bkg_d = rng.standard_normal((cfg.n_bkg_components, D)) * 0.5
        sep = cfg.separation * math.sqrt(D)
        def_s = sep * unit(cfg.n_defect_components)
        def_d = sep * unit(cfg.n_defect_components)
        vo_proj = rng.standard_normal((4, cfg.vo_dim))
        return cls(bkg_s, bkg_d, def_s, def_d, vo_proj)


_COMPONENT_CACHE: dict = {}


def _components(cfg: GenConfig) -> _Components:
    key = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    if key not in _COMPONENT_CACHE:
        _COMPONENT_CACHE[key] = _Components.build(cfg)
    return _COMPONENT_CACHE[key]


def _sample_defect_count(cfg: GenConfig, rng) -> int:
    if rng.random() < cfg.p_defect_free_video:
        return 0
    if rng.random() < cfg.p_single_defect or cfg.p_single_defect >= 1:
        return 1
    # mean over multi-defect videos is (mean - p_single) / (1 - p_single)
    lam = max(0.0, (cfg.mean_defects_per_video - cfg.p_single_defect) / (1 - cfg.p_single_defect) - 2)
    return 2 + int(rng.poisson(lam))


def _place_intervals(lengths: list[int], T: int, min_gap: int, rng) -> list[tuple[int, int]]:
    n = len(lengths)
    slack = T - sum(lengths) - (n - 1) * min_gap
    offsets = np.sort(rng.integers(0, slack + 1, size=n))
    out, cursor = [], 0
    for i, (o, L) in enumerate(zip(offsets, lengths)):
        s = int(o) + cursor
        out.append((s, s + L))
        cursor += L + min_gap
    return out


def _sample_intervals(cfg: GenConfig, T: int, rng) -> list[tuple[int, int]]:
    n = _sample_defect_count(cfg, rng)
    if n == 0:
        return []
    med = cfg.median_defect_s * cfg.fps
    lengths = np.maximum(2, np.rint(rng.lognormal(math.log(max(med, 1e-9)), cfg.interval_sigma, n)))
    # never let defects take more than 60% of a video
    cap = int(0.6 * T)
    while n > 0 and 2 * n + (n - 1) * cfg.min_gap_frames > cap:
        n -= 1
        lengths = lengths[:n]
    if n == 0:
        return []
    if lengths.sum() > cap - (n - 1) * cfg.min_gap_frames:
        budget = cap - (n - 1) * cfg.min_gap_frames
        lengths = np.maximum(2, np.floor(lengths * budget / lengths.sum()))
    return _place_intervals([int(x) for x in lengths], T, cfg.min_gap_frames, rng)


def _moving_average(x: np.ndarray, w: int) -> np.ndarray:
    if w <= 1:
        return x
    k = np.ones(w) / w
    pad = w // 2
    xp = np.pad(x, [(pad, w - 1 - pad)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    if x.ndim == 1:
        return np.convolve(xp, k, mode="valid")
    return np.stack([np.convolve(xp[:, j], k, mode="valid") for j in range(x.shape[1])], axis=1)


def _pose_track(cfg: GenConfig, T: int, stopped: np.ndarray, rng) -> PoseTrack:
    cruise = 0.12 * (1 + 0.1 * rng.standard_normal())
    v = np.where(stopped, 0.0, cruise) + 0.01 * rng.standard_normal(T)
    v = np.clip(_moving_average(v, 3), 0.0, None)
    t = np.arange(T) / cfg.fps
    pan = 0.25 + 0.1 * np.abs(np.sin(2 * math.pi * t / 6.0 + rng.uniform(0, 2 * math.pi)))
    w = np.where(stopped, pan, 0.0) + np.abs(0.03 * rng.standard_normal(T))
    w = np.clip(_moving_average(w, 3), 0.0, None)
    return PoseTrack(v, w)


def _vo_features(cfg: GenConfig, pose: PoseTrack, comps: _Components, rng) -> np.ndarray:
    v = pose.forward_velocity / 0.12
    w = pose.angular_rate / 0.25
    dv = np.diff(v, prepend=v[:1])
    dw = np.diff(w, prepend=w[:1])
    z = np.stack([v, w, dv, dw], axis=1) @ comps.vo_proj
    z = z + cfg.vo_noise_sigma * rng.standard_normal(z.shape)
    return _moving_average(z, 3)


def _ar1(T: int, D: int, rho: float, sigma: float, rng) -> np.ndarray:
    e = rng.standard_normal((T, D)) * sigma * math.sqrt(1 - rho**2)
    out = np.empty((T, D))
    out[0] = rng.standard_normal(D) * sigma
    for t in range(1, T):
        out[t] = rho * out[t - 1] + e[t]
    return out


def generate_video(cfg: GenConfig, video_seed: int, return_pose: bool = False):
    cfg.validate()
    comps = _components(cfg)
    rng = np.random.default_rng([cfg.seed, 1, video_seed])
    dur = cfg.mean_duration_s * rng.uniform(1 - cfg.duration_spread, 1 + cfg.duration_spread)
    T = int(round(dur * cfg.fps))
    if T < 1:
        raise ConfigError("gen: sampled video is shorter than one frame")

    intervals = _sample_intervals(cfg, T, rng)
    points = [int(rng.integers(s, e)) for s, e in intervals]

    is_defect = np.zeros(T, bool)
    for s, e in intervals:
        is_defect[s:e] = True

    # stops without a defect (joints, debris) keep the VO cue imperfect
    stopped = is_defect.copy()
    for _ in range(rng.poisson(cfg.false_stops_per_video)):
        L = max(2, int(round(rng.lognormal(math.log(max(cfg.median_defect_s * cfg.fps, 2)), 0.5))))
        if L >= T:
            continue
        s = int(rng.integers(0, T - L))
        stopped[s : s + L] = True
    pose = _pose_track(cfg, T, stopped, rng)

    D = cfg.dim
    scene = np.full(T, rng.integers(cfg.n_bkg_components))
    if rng.random() < 0.3:  # pipe material / lining changes once
        cut = int(rng.integers(0, T))
        scene[cut:] = rng.integers(cfg.n_bkg_components)
    static = comps.bkg_static[scene].copy()
    dynamic = comps.bkg_dynamic[scene].copy()
    for s, e in intervals:
        k = rng.integers(cfg.n_defect_components)
        static[s:e] += comps.def_static[k]
        dynamic[s:e] += comps.def_dynamic[k]
    static += _ar1(T, D, cfg.drift_rho, cfg.drift_sigma, rng) + cfg.noise_sigma * rng.standard_normal((T, D))
    dynamic += _ar1(T, D, cfg.drift_rho, cfg.drift_sigma, rng) + cfg.noise_sigma * rng.standard_normal((T, D))

    feats = FeatureSequence(
        static_feat=static,
        dynamic_feat=dynamic,
        vo_feat=_vo_features(cfg, pose, comps, rng),
        valid_mask=np.ones(T, bool),
    )
    sample = VideoSample(
        id=f"vid{video_seed:05d}",
        fps=cfg.fps,
        features=feats,
        points=points,
        intervals=intervals,
    )
    return (sample, pose) if return_pose else sample


def frame_labels(sample: VideoSample) -> np.ndarray:
    y = np.zeros(sample.length, bool)
    for s, e in sample.intervals or ():
        y[s:e] = True
    return y


def corpus_stats(samples) -> dict:
    n = len(samples)
    frames = sum(s.n_valid for s in samples)
    defect_frames = sum(int(frame_labels(s).sum()) for s in samples)
    counts = [len(s.intervals or ()) for s in samples]
    with_def = [c for c in counts if c > 0]
    return {
        "n_videos": n,
        "defect_fraction": defect_frames / frames if frames else 0.0,
        "defect_free_share": (n - len(with_def)) / n if n else 0.0,
        "defects_per_defect_video": float(np.mean(with_def)) if with_def else 0.0,
        "single_defect_share": float(np.mean([c == 1 for c in with_def])) if with_def else 0.0,
        "mean_duration_s": float(np.mean([s.length / s.fps for s in samples])) if n else 0.0,
    }


def _stratified_split(has_defect: list[bool], rng) -> list[str]:
    """8:1:1 split, stratified by defect presence, with exact global counts."""
    n = len(has_defect)
    ratios = {"train": 0.8, "val": 0.1, "test": 0.1}
    n_test = int(round(n * 0.1))
    n_val = int(round(n * 0.1))
    want = {"train": n - n_val - n_test, "val": n_val, "test": n_test}

    strata = {}
    for i, h in enumerate(has_defect):
        strata.setdefault(h, []).append(i)
    floors, rems = {}, []
    for h, idx in strata.items():
        rng.shuffle(idx)
        for sp, r in ratios.items():
            q = len(idx) * r
            floors[h, sp] = int(math.floor(q))
            rems.append((q - math.floor(q), h, sp))
    missing = {sp: want[sp] - sum(floors[h, sp] for h in strata) for sp in want}
    left = {h: len(idx) - sum(floors[h, sp] for sp in ratios) for h, idx in strata.items()}
    for _, h, sp in sorted(rems, key=lambda r: (-r[0], r[1], r[2])):
        if missing[sp] > 0 and left[h] > 0:
            floors[h, sp] += 1
            missing[sp] -= 1
            left[h] -= 1
    for h in strata:  # any remainder the ranking could not place
        for sp in ratios:
            while left[h] > 0 and missing[sp] > 0:
                floors[h, sp] += 1
                missing[sp] -= 1
                left[h] -= 1

    out = [""] * n
    for h, idx in strata.items():
        pos = 0
        for sp in ratios:
            for i in idx[pos : pos + floors[h, sp]]:
                out[i] = sp
            pos += floors[h, sp]
    return out


def generate_dataset(cfg: GenConfig, out_dir, force: bool = False) -> Manifest:
    cfg.validate()
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise DataError(f"{out_dir} exists and is not empty (use force to overwrite)")
        shutil.rmtree(out_dir)
    feat_dir = out_dir / "features"
    try:
        feat_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {feat_dir}: {exc}") from exc

    samples = [generate_video(cfg, i) for i in range(cfg.n_videos)]
    rng = np.random.default_rng([cfg.seed, 2])
    splits = _stratified_split([bool(s.intervals) for s in samples], rng)
    train_idx = [i for i, sp in enumerate(splits) if sp == "train"]
    n_unl = int(round(cfg.unlabeled_share * len(train_idx)))
    unlabeled = set(rng.choice(train_idx, size=n_unl, replace=False).tolist()) if n_unl else set()

    entries = []
    for i, (s, sp) in enumerate(zip(samples, splits)):
        rel = f"features/{s.id}.pspo"
        try:
            write_feature_file(s, out_dir / rel)
        except OSError as exc:
            raise DataError(f"cannot write {out_dir / rel}: {exc}") from exc
        if sp == "train":
            sp = "train_unlabeled" if i in unlabeled else "train_labeled"
        points = [] if sp == "train_unlabeled" else list(s.points)
        intervals = [list(iv) for iv in s.intervals] if sp == "test" else None
        entries.append(ManifestEntry(s.id, rel, s.fps, sp, points, intervals))

    manifest = Manifest(
        entries,
        cfg.dim,
        cfg.vo_dim,
        out_dir,
        meta={"gen": dataclasses.asdict(cfg), "stats": corpus_stats(samples)},
    )
    try:
        write_manifest(manifest, out_dir / "manifest.json")
    except OSError as exc:
        raise DataError(f"cannot write manifest in {out_dir}: {exc}") from exc
    return manifest
