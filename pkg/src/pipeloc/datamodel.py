"""Core domain types and the on-disk feature / manifest formats.

Annotations are frame indices throughout; seconds only appear at the
prediction boundary (:class:`Interval`), converted with the video's fps.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, TruncationError

MAGIC = b"PSPO"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")
SPLITS = ("train_labeled", "train_unlabeled", "val", "test")


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    static_feat: np.ndarray
    dynamic_feat: np.ndarray
    vo_feat: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "static_feat", _frozen(self.static_feat, np.float32))
        object.__setattr__(self, "dynamic_feat", _frozen(self.dynamic_feat, np.float32))
        object.__setattr__(self, "vo_feat", _frozen(self.vo_feat, np.float32))
        object.__setattr__(self, "valid_mask", _frozen(self.valid_mask, bool))

    @property
    def length(self) -> int:
        return int(self.valid_mask.shape[0])

    @property
    def dim(self) -> int:
        return int(self.static_feat.shape[1])

    @property
    def vo_dim(self) -> int:
        return int(self.vo_feat.shape[1])

    def concat(self) -> np.ndarray:
        """Static and dynamic features side by side, shape [T, 2D]."""
        return concat_features(self.static_feat, self.dynamic_feat)

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self._arrays(), other._arrays())
        )

    def _arrays(self):
        return (self.static_feat, self.dynamic_feat, self.vo_feat, self.valid_mask)


@dataclass(frozen=True, eq=False)
class VideoSample:
    id: str
    fps: float
    features: FeatureSequence
    points: tuple = ()
    intervals: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(int(p) for p in self.points))
        if self.intervals is not None:
            object.__setattr__(
                self, "intervals", tuple((int(s), int(e)) for s, e in self.intervals)
            )

    @property
    def length(self) -> int:
        return self.features.length

    @property
    def n_valid(self) -> int:
        return int(self.features.valid_mask.sum())

    def __eq__(self, other):
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.fps == other.fps
            and self.points == other.points
            and self.intervals == other.intervals
            and self.features == other.features
        )

    def replace(self, **changes) -> "VideoSample":
        kw = dict(
            id=self.id,
            fps=self.fps,
            features=self.features,
            points=self.points,
            intervals=self.intervals,
        )
        kw.update(changes)
        return VideoSample(**kw)


@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    score: float = 1.0

    @property
    def length(self) -> float:
        return self.end - self.start


def concat_features(static: np.ndarray, dynamic: np.ndarray) -> np.ndarray:
    return np.concatenate([static, dynamic], axis=-1)


def split_features(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = values.shape[-1] // 2
    return values[..., :d], values[..., d:]


def validate_sample(sample: VideoSample) -> list[str]:
    """Return a list of invariant violations; empty means valid. Never raises."""
    out: list[str] = []
    try:
        _check(sample, out)
    except Exception as exc:  # a validator reports, it does not throw
        out.append(f"sample: unreadable ({exc!r})")
    return out


def _check(sample: VideoSample, out: list[str]) -> None:
    if not isinstance(sample.id, str) or not sample.id:
        out.append("id: must be a non-empty string")
    if not (isinstance(sample.fps, (int, float)) and math.isfinite(sample.fps) and sample.fps > 0):
        out.append("fps: must be positive and finite")

    f = sample.features
    arrays = {
        "static_feat": f.static_feat,
        "dynamic_feat": f.dynamic_feat,
        "vo_feat": f.vo_feat,
    }
    T = f.valid_mask.shape[0] if f.valid_mask.ndim == 1 else -1
    if f.valid_mask.ndim != 1:
        out.append("valid_mask: must be one-dimensional")
    if T < 1:
        out.append("features: length T must be >= 1")
    for name, a in arrays.items():
        if a.ndim != 2:
            out.append(f"{name}: must be two-dimensional")
            continue
        if a.shape[0] != T:
            out.append(f"{name}: leading length {a.shape[0]} != T={T}")
        if not np.all(np.isfinite(a)):
            out.append(f"{name}: contains NaN/Inf")
        if a.shape[0] == T and T > 0 and np.any(a[~f.valid_mask] != 0):
            out.append(f"{name}: padded rows must be all-zero")
    if f.static_feat.ndim == 2 and f.dynamic_feat.ndim == 2:
        if f.static_feat.shape[1] != f.dynamic_feat.shape[1]:
            out.append("dynamic_feat: width must equal static_feat width D")

    pts = sample.points
    if any(b <= a for a, b in zip(pts, pts[1:])):
        out.append("points: points strictly increasing")
    if any(p < 0 or p >= T for p in pts):
        out.append("points: each point in [0, T)")

    if sample.intervals is not None:
        iv = sample.intervals
        for s, e in iv:
            if not s < e:
                out.append(f"intervals: start < end violated by ({s}, {e})")
            if s < 0 or e > T:
                out.append(f"intervals: ({s}, {e}) outside [0, T={T}]")
        if any(b[0] < a[1] for a, b in zip(iv, iv[1:])):
            out.append("intervals: sorted and non-overlapping")
        for p in pts:
            n = sum(s <= p < e for s, e in iv)
            if n != 1:
                out.append(f"points: point {p} lies inside {n} intervals, expected exactly one")


# -- binary feature file ---------------------------------------------------------


def write_feature_file(features: FeatureSequence | VideoSample, path) -> None:
    if isinstance(features, VideoSample):
        features = features.features
    T, D, Dvo = features.length, features.dim, features.vo_dim
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, T, D, Dvo))
        for a in (features.static_feat, features.dynamic_feat, features.vo_feat):
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        fh.write(features.valid_mask.astype(np.uint8).tobytes())


def read_feature_file(path) -> FeatureSequence:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise TruncationError(f"{path}: {len(buf)} bytes, header needs {_HEADER.size}")
    magic, version, T, D, Dvo = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    if T < 1 or D < 1 or Dvo < 1:
        raise FormatError(f"{path}: invalid shape T={T} D={D} D_vo={Dvo}", 6)
    sizes = [T * D * 4, T * D * 4, T * Dvo * 4, T]
    need = _HEADER.size + sum(sizes)
    if len(buf) < need:
        raise TruncationError(f"{path}: payload has {len(buf)} bytes, header implies {need}")
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} trailing bytes", need)
    off = _HEADER.size
    blocks = []
    for n, shape in zip(sizes[:3], [(T, D), (T, D), (T, Dvo)]):
        blocks.append(np.frombuffer(buf, dtype="<f4", count=n // 4, offset=off).reshape(shape))
        off += n
    mask = np.frombuffer(buf, dtype=np.uint8, count=T, offset=off)
    if np.any(mask > 1):
        raise FormatError(f"{path}: mask bytes must be 0/1", off)
    return FeatureSequence(blocks[0], blocks[1], blocks[2], mask.astype(bool))


# -- manifest --------------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    path: str
    fps: float
    split: str
    points: list = field(default_factory=list)
    intervals: Optional[list] = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "fps": self.fps,
            "split": self.split,
            "points": [int(p) for p in self.points],
            "intervals": None
            if self.intervals is None
            else [[int(s), int(e)] for s, e in self.intervals],
        }


@dataclass
class Manifest:
    entries: list
    dim: int
    vo_dim: int
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def split(self, *names: str) -> list:
        return [e for e in self.entries if e.split in names]

    def load(self, entry: ManifestEntry) -> VideoSample:
        feats = read_feature_file(self.root / entry.path)
        if feats.dim != self.dim or feats.vo_dim != self.vo_dim:
            raise DataError(
                f"{entry.path}: dims D={feats.dim}, D_vo={feats.vo_dim} do not match "
                f"manifest D={self.dim}, D_vo={self.vo_dim}"
            )
        return VideoSample(
            id=entry.id,
            fps=entry.fps,
            features=feats,
            points=entry.points,
            intervals=entry.intervals,
        )

    def load_split(self, *names: str) -> list:
        return [self.load(e) for e in self.split(*names)]


def write_manifest(manifest: Manifest, path) -> None:
    doc = {
        "version": FORMAT_VERSION,
        "dim": manifest.dim,
        "vo_dim": manifest.vo_dim,
        "meta": manifest.meta,
        "videos": [e.to_json() for e in manifest.entries],
    }
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = []
        for v in doc["videos"]:
            if v["split"] not in SPLITS:
                raise DataError(f"{path}: unknown split {v['split']!r} for {v['id']}")
            entries.append(
                ManifestEntry(
                    id=v["id"],
                    path=v["path"],
                    fps=float(v["fps"]),
                    split=v["split"],
                    points=list(v["points"]),
                    intervals=v["intervals"],
                )
            )
        return Manifest(entries, int(doc["dim"]), int(doc["vo_dim"]), path.parent, doc.get("meta", {}))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc!r})") from exc


def pad_batch(samples: Sequence[VideoSample], inputs: Optional[Iterable[np.ndarray]] = None):
    """Stack samples into zero-padded arrays.

    Returns ``(x [B, T_max, 2D], vo [B, T_max, D_vo], mask [B, T_max])``. If
    ``inputs`` is given it replaces each sample's concatenated features
    (used for augmented views).
    """
    if inputs is None:
        inputs = [s.features.concat() for s in samples]
    inputs = list(inputs)
    T = max(s.length for s in samples)
    B = len(samples)
    x = np.zeros((B, T, inputs[0].shape[1]), np.float32)
    vo = np.zeros((B, T, samples[0].features.vo_dim), np.float32)
    mask = np.zeros((B, T), bool)
    for i, (s, xi) in enumerate(zip(samples, inputs)):
        n = s.length
        x[i, :n] = xi
        vo[i, :n] = s.features.vo_feat
        mask[i, :n] = s.features.valid_mask
    return x, vo, mask
