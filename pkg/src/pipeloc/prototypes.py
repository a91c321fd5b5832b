"""Multi-prototype memory: cosine k-means initialization and momentum updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .datamodel import VideoSample
from .errors import ConfigError


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero vector")
    return x / n


@dataclass(frozen=True)
class PrototypeMemory:
    defect_protos: np.ndarray  # [K_d, d], unit rows
    bkg_protos: np.ndarray  # [K_b, d], unit rows
    momentum_p: float = 0.99

    def __post_init__(self):
        for name in ("defect_protos", "bkg_protos"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 2 or a.shape[0] < 1:
                raise ValueError(f"{name}: need at least one prototype row")
            object.__setattr__(self, name, a)

    @property
    def k_d(self) -> int:
        return self.defect_protos.shape[0]

    @property
    def k_b(self) -> int:
        return self.bkg_protos.shape[0]

    def stacked(self) -> np.ndarray:
        """Defect then background prototypes, [K_d + K_b, d]."""
        return np.concatenate([self.defect_protos, self.bkg_protos], axis=0)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.stacked(), dtype=dtype)

    def to_dict(self) -> dict:
        return {
            "defect_protos": self.defect_protos.tolist(),
            "bkg_protos": self.bkg_protos.tolist(),
            "momentum_p": self.momentum_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeMemory":
        return cls(np.array(d["defect_protos"]), np.array(d["bkg_protos"]), d["momentum_p"])


def similarity_kernel(a, b, tau: float) -> float:
    """exp(cos(a, b) / tau)."""
    if tau <= 0:
        raise ConfigError(f"temperature tau={tau} must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("similarity of a zero vector is undefined")
    return math.exp(float(a @ b) / (na * nb) / tau)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    N = x.shape[0]
    chosen = [int(rng.integers(N))]
    best = x @ x[chosen[0]]
    for _ in range(1, k):
        d = np.clip(1.0 - best, 0.0, None) ** 2
        d[chosen] = 0.0
        if d.sum() <= 0:  # only duplicates of chosen centres remain
            rest = np.setdiff1d(np.arange(N), chosen)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(N, p=d / d.sum()))
        chosen.append(nxt)
        best = np.maximum(best, x @ x[nxt])
    return x[chosen].copy()


def spherical_kmeans(
    points: np.ndarray,
    k: int,
    max_iter: int = 100,
    seed: int = 0,
    return_history: bool = False,
):
    """Cosine k-means with k-means++ seeding.

    Returns ``(centroids [k, d], assignments [N])`` and, if requested, the
    objective sum_i cos(x_i, c_assign(i)) after each assignment step. An empty
    (or zero-sum) cluster is re-seeded at the point currently farthest from its
    centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be a 2-D array")
    N = x.shape[0]
    if k < 1 or N < k:
        raise ValueError(f"spherical_kmeans needs N >= k >= 1, got N={N}, k={k}")
    x = _normalize_rows(x)
    rng = np.random.default_rng(seed)
    c = _kmeanspp(x, k, rng)

    history = []
    assign = None
    for _ in range(max_iter):
        sims = x @ c.T
        new = sims.argmax(axis=1)
        history.append(float(sims[np.arange(N), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = x[assign == j]
            s = members.sum(axis=0) if len(members) else np.zeros(x.shape[1])
            n = np.linalg.norm(s)
            if n > 1e-12:
                c[j] = s / n
                continue
            own = (x * c[assign]).sum(axis=1)
            far = int(own.argmin())
            c[j] = x[far]
            assign = assign.copy()
            assign[far] = j
    sims = x @ c.T
    assign = sims.argmax(axis=1)
    if history[-1] != float(sims[np.arange(N), assign].sum()):
        history.append(float(sims[np.arange(N), assign].sum()))
    if return_history:
        return c, assign, history
    return c, assign


def _pools(samples: Sequence[VideoSample], embed_fn: Callable, bkg_stride: int):
    d_pool, b_pool = [], []
    for s in samples:
        if not s.points and s.n_valid < bkg_stride:
            continue
        emb = np.asarray(embed_fn(s))
        if s.points:
            d_pool.append(emb[list(s.points)])
        else:
            valid = np.flatnonzero(s.features.valid_mask)
            b_pool.append(emb[valid[bkg_stride - 1 :: bkg_stride]])
    d_pool = np.concatenate(d_pool) if d_pool else np.zeros((0, 1))
    b_pool = np.concatenate(b_pool) if b_pool else np.zeros((0, 1))
    return d_pool, b_pool


def init_prototype_memory(
    samples: Sequence[VideoSample],
    embed_fn: Callable[[VideoSample], np.ndarray],
    k_d: int,
    k_b: int,
    bkg_stride: int = 30,
    momentum_p: float = 0.99,
    seed: int = 0,
) -> PrototypeMemory:
    """Cluster embeddings at annotated points (defect) and at every
    ``bkg_stride``-th frame of defect-free videos (background)."""
    if bkg_stride < 1:
        raise ConfigError("bkg_stride must be >= 1")
    d_pool, b_pool = _pools(samples, embed_fn, bkg_stride)
    if len(d_pool) < k_d:
        raise ValueError(f"insufficient defect pool: {len(d_pool)} features < k_d={k_d}")
    if len(b_pool) < k_b:
        raise ValueError(f"insufficient background pool: {len(b_pool)} features < k_b={k_b}")
    cd, _ = spherical_kmeans(d_pool, k_d, seed=seed)
    cb, _ = spherical_kmeans(b_pool, k_b, seed=seed + 1)
    return PrototypeMemory(_normalize_rows(cd), _normalize_rows(cb), momentum_p)


def _update(protos: np.ndarray, feats: np.ndarray, m: float) -> np.ndarray:
    if len(feats) == 0 or m == 1.0:
        return protos
    assign = (feats @ protos.T).argmax(axis=1)
    out = protos.copy()
    for j in np.unique(assign):
        mean = feats[assign == j].mean(axis=0)
        v = m * protos[j] + (1.0 - m) * mean
        n = np.linalg.norm(v)
        if n > 1e-12:
            out[j] = v / n
    return out


def update_prototypes(memory: PrototypeMemory, defect_feats, bkg_feats) -> PrototypeMemory:
    """EMA of each prototype toward the mean of the batch features assigned to it."""
    df = np.asarray(defect_feats, dtype=np.float64).reshape(-1, memory.defect_protos.shape[1])
    bf = np.asarray(bkg_feats, dtype=np.float64).reshape(-1, memory.bkg_protos.shape[1])
    m = memory.momentum_p
    return replace(
        memory,
        defect_protos=_update(memory.defect_protos, df, m),
        bkg_protos=_update(memory.bkg_protos, bf, m),
    )
