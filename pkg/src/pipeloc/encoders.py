"""Neural components: frame-sequence encoder, video-level encoder,
prototype-aware decoder, classifier heads and the VO attention gate.

Every module takes batch-first tensors and a boolean ``mask`` [B, T] where
True marks a real frame. Padded positions never act as keys and their outputs
are zeroed.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers_seq: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    n_latents_video: int = 4
    n_layers_decoder: int = 2
    dropout: float = 0.1

    def validate(self) -> None:
        for name in ("d_model", "n_layers_seq", "n_heads", "ffn_dim", "n_latents_video", "n_layers_decoder"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"encoder.d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("encoder.d_model must be even for sinusoidal position encoding")
        if not 0 <= self.dropout < 1:
            raise ConfigError("encoder.dropout must be in [0, 1)")


def positional_encoding(T: int, d_model: int, dtype=torch.float32) -> torch.Tensor:
    if T < 1 or d_model < 1:
        raise ConfigError("positional_encoding needs T, d_model >= 1")
    if d_model % 2:
        raise ConfigError(f"positional_encoding needs an even d_model, got {d_model}")
    t = torch.arange(T, dtype=torch.float64)[:, None]
    freq = torch.pow(10000.0, -torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    pe = torch.zeros(T, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(t * freq)
    pe[:, 1::2] = torch.cos(t * freq)
    return pe.to(dtype)


def _check_mask(mask: torch.Tensor) -> None:
    if not bool(mask.any(dim=1).all()):
        raise DataError("empty video: every frame is padding")


class MultiHeadAttention(nn.Module):
    """Multi-head attention on ``scaled_dot_product_attention``.

    ``key_mask`` [B, S] marks keys that may be attended to (True = real).
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x):
        B, L, d = x.shape
        return x.view(B, L, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, query, key, value, key_mask: Optional[torch.Tensor] = None):
        q, k, v = self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        attn_mask = None
        if key_mask is not None and not bool(key_mask.all()):
            attn_mask = key_mask[:, None, None, :]
        h = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        B, H, L, dh = h.shape
        return self.out_proj(h.transpose(1, 2).reshape(B, L, H * dh))

    def attention_weights(self, query, key, key_mask: Optional[torch.Tensor] = None):
        """Explicit softmax weights [B, heads, L, S] (for inspection)."""
        q, k = self._split(self.q_proj(query)), self._split(self.k_proj(key))
        logits = q @ k.transpose(-1, -2) / (q.shape[-1] ** 0.5)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        return torch.softmax(logits, dim=-1)


class _FeedForward(nn.Sequential):
    def __init__(self, cfg: EncoderConfig):
        super().__init__(
            nn.Linear(cfg.d_model, cfg.ffn_dim),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.ffn_dim, cfg.d_model),
        )


class SelfAttentionBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = _FeedForward(cfg)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        h = self.attn(h, h, h, key_mask=mask)
        x = x + self.drop(h)
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x * mask[..., None]


class FrameSeqEncoder(nn.Module):
    """Projects [B, T, 2D] input features to [B, T, d_model] embeddings."""

    def __init__(self, in_dim: int, cfg: EncoderConfig, use_pe: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.use_pe = use_pe
        self.d_model = cfg.d_model
        self.proj = nn.Linear(in_dim, cfg.d_model)
        self.blocks = nn.ModuleList(SelfAttentionBlock(cfg) for _ in range(cfg.n_layers_seq))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, x, mask):
        if x.shape[-1] != self.in_dim or x.shape[:2] != mask.shape:
            raise DataError(
                f"frame encoder expected input [B, T, {self.in_dim}] with mask [B, T], "
                f"got {tuple(x.shape)} and {tuple(mask.shape)}"
            )
        _check_mask(mask)
        h = self.proj(x)
        if self.use_pe:
            h = h + positional_encoding(x.shape[1], self.d_model, h.dtype).to(h.device)
        h = h * mask[..., None]
        for blk in self.blocks:
            h = blk(h, mask)
        return self.norm(h) * mask[..., None]


class VideoLevelEncoder(nn.Module):
    """Learned latent queries cross-attend to the sequence; pooled and L2-normalized."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.latents = nn.Parameter(torch.randn(cfg.n_latents_video, cfg.d_model) * 0.2)
        self.layers = nn.ModuleList()
        for _ in range(cfg.n_layers_decoder):
            self.layers.append(
                nn.ModuleDict(
                    {
                        "norm_q": nn.LayerNorm(cfg.d_model),
                        "attn": MultiHeadAttention(cfg.d_model, cfg.n_heads),
                        "norm_f": nn.LayerNorm(cfg.d_model),
                        "ffn": _FeedForward(cfg),
                    }
                )
            )

    def forward(self, embed, mask):
        _check_mask(mask)
        z = self.latents.expand(embed.shape[0], -1, -1)
        for layer in self.layers:
            h = layer["attn"](layer["norm_q"](z), embed, embed, key_mask=mask)
            z = z + h
            z = z + layer["ffn"](layer["norm_f"](z))
        return F.normalize(z.mean(dim=1), dim=-1)


class VideoEncoder(nn.Module):
    """Frame-sequence encoder followed by the video-level encoder."""

    def __init__(self, in_dim: int, cfg: EncoderConfig, use_pe: bool = True):
        super().__init__()
        self.seq = FrameSeqEncoder(in_dim, cfg, use_pe)
        self.video = VideoLevelEncoder(cfg)

    def forward(self, x, mask):
        return self.video(self.seq(x, mask), mask)


class ProtoAwareDecoder(nn.Module):
    """Self-attention over frames, then frames query the prototype memory."""

    def __init__(self, cfg: EncoderConfig, use_prototypes: bool = True):
        super().__init__()
        self.use_prototypes = use_prototypes
        self.layers = nn.ModuleList()
        for _ in range(cfg.n_layers_decoder):
            self.layers.append(
                nn.ModuleDict(
                    {
                        "self_norm": nn.LayerNorm(cfg.d_model),
                        "self_attn": MultiHeadAttention(cfg.d_model, cfg.n_heads),
                        "cross_norm": nn.LayerNorm(cfg.d_model),
                        "cross_attn": MultiHeadAttention(cfg.d_model, cfg.n_heads),
                        "ffn_norm": nn.LayerNorm(cfg.d_model),
                        "ffn": _FeedForward(cfg),
                    }
                )
            )
        self.drop = nn.Dropout(cfg.dropout)
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, embed, prototypes: Optional[torch.Tensor], mask):
        _check_mask(mask)
        use_protos = self.use_prototypes and prototypes is not None
        if use_protos:
            if prototypes.ndim != 2 or prototypes.shape[0] == 0:
                raise ValueError("empty prototype memory")
            kv = prototypes.to(embed.dtype).expand(embed.shape[0], -1, -1)
        x = embed
        for layer in self.layers:
            h = layer["self_norm"](x)
            h = layer["self_attn"](h, h, h, key_mask=mask)
            x = x + self.drop(h)
            if use_protos:
                h = layer["cross_attn"](layer["cross_norm"](x), kv, kv)
                x = x + self.drop(h)
            x = x + self.drop(layer["ffn"](layer["ffn_norm"](x)))
            x = x * mask[..., None]
        return self.norm(x) * mask[..., None]


class ClassifierHeads(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_model), nn.GELU(), nn.Linear(cfg.d_model, 2))

    def forward(self, percept):
        """Returns ``(s_bkg, s_defect)``, each [B, T], summing to one per frame."""
        p = torch.softmax(self.mlp(percept), dim=-1)
        return p[..., 0], p[..., 1]


class VOGateEncoder(nn.Module):
    """Maps VO features [B, T, D_vo] to one gate logit per frame."""

    def __init__(self, vo_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.proj = nn.Linear(vo_dim, cfg.d_model)
        self.block = SelfAttentionBlock(cfg)
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_model // 2), nn.GELU(), nn.Linear(cfg.d_model // 2, 1)
        )

    def forward(self, vo, mask):
        h = self.proj(vo) * mask[..., None]
        h = self.norm(self.block(h, mask))
        return self.head(h).squeeze(-1)


def apply_vo_gate(logits, s_defect, mask, mode: str = "rescaled"):
    """Gate frame scores with a softmax over valid frames.

    ``rescaled`` multiplies the softmax by the number of valid frames so the
    gate has mean one; ``literal`` uses the bare softmax. Returns
    ``(gated, gate)``.
    """
    a = torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)
    if mode == "rescaled":
        g = a * mask.sum(dim=-1, keepdim=True).to(a.dtype)
    elif mode == "literal":
        g = a
    else:
        raise ConfigError(f"unknown VO gate mode {mode!r}")
    g = g * mask
    return torch.clamp(s_defect * g, 0.0, 1.0), g


class LocalizationOutput(NamedTuple):
    embed: torch.Tensor
    percept: torch.Tensor
    s_bkg: torch.Tensor
    s_defect_raw: torch.Tensor
    s_defect: torch.Tensor  # after the VO gate
    gate: torch.Tensor


class LocalizationModel(nn.Module):
    """Second-stage network: embed, perceive prototypes, score, gate."""

    def __init__(
        self,
        in_dim: int,
        vo_dim: int,
        cfg: EncoderConfig,
        use_pe: bool = True,
        use_vo_gate: bool = True,
        use_proto_decoder: bool = True,
        vo_gate_mode: str = "rescaled",
    ):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seq = FrameSeqEncoder(in_dim, cfg, use_pe)
        self.decoder = ProtoAwareDecoder(cfg, use_proto_decoder)
        self.heads = ClassifierHeads(cfg)
        self.vo_gate_mode = vo_gate_mode
        self.vo = VOGateEncoder(vo_dim, cfg) if use_vo_gate else None

    def forward(self, x, vo, mask, prototypes=None) -> LocalizationOutput:
        embed = self.seq(x, mask)
        percept = self.decoder(embed, prototypes, mask)
        s_bkg, s_def = self.heads(percept)
        s_bkg = s_bkg * mask
        s_def = s_def * mask
        if self.vo is None:
            gate = mask.to(s_def.dtype)
            gated = s_def
        else:
            gated, gate = apply_vo_gate(self.vo(vo, mask), s_def, mask, self.vo_gate_mode)
        return LocalizationOutput(embed, percept, s_bkg, s_def, gated, gate)


class PretextModel(nn.Module):
    """Query / key video encoders; the key side is a gradient-free copy."""

    def __init__(self, in_dim: int, cfg: EncoderConfig, use_pe: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.q = VideoEncoder(in_dim, cfg, use_pe)
        self.k = copy.deepcopy(self.q)
        for p in self.k.parameters():
            p.requires_grad_(False)


ParamSource = Union[nn.Module, Iterable[torch.Tensor]]


def _params(src: ParamSource) -> list:
    return list(src.parameters()) if isinstance(src, nn.Module) else list(src)


@torch.no_grad()
def momentum_update(k_params: ParamSource, q_params: ParamSource, m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q, in place."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum m={m} must be in [0, 1]")
    ks, qs = _params(k_params), _params(q_params)
    if len(ks) != len(qs) or any(k.shape != q.shape for k, q in zip(ks, qs)):
        raise ValueError("momentum_update: key and query parameters are not shape-congruent")
    for k, q in zip(ks, qs):
        if m == 1.0:
            continue
        if m == 0.0:
            k.copy_(q)
        else:
            k.mul_(m).add_(q, alpha=1.0 - m)


def save_checkpoint(path, kind: str, model: nn.Module, encoder_cfg: EncoderConfig, **extra) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "encoder": asdict(encoder_cfg),
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, kind: Optional[str] = None) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    if kind is not None and payload.get("kind") != kind:
        raise DataError(f"{path}: expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    payload["encoder"] = EncoderConfig(**payload["encoder"])
    return payload


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

