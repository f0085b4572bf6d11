"""Backbone, transformer encoder/decoder, and prediction heads.

A small strided conv stack extracts an h x w x D feature grid; flattened
tokens (plus 2-D sinusoidal position embeddings, added or concatenated) pass
through projection-free self-attention encoder layers into a global feature
map f_g. Learned keypoint and segment queries are decoded against f_g, and
the embeddings are multiplied back onto the feature map to produce keypoint
heatmaps (sigmoid, then normalized to a distribution per map) and segment
logits (softmaxed per pixel elsewhere).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from . import motion
from .errors import ConfigurationError
from .reid import weighted_pool

HEATMAP_EPS = 1e-8


@dataclass
class NetConfig:
    image_size: tuple[int, int] = (64, 32)       # (H, W)
    in_channels: int = 3
    backbone_channels: tuple[int, ...] = (32, 64, 128)  # one stride-2 block each
    embed_dim: int = 64                          # d_g, transformer width
    num_heads: int = 4
    ffn_dim: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 1
    num_keypoints: int = 10                      # K
    pos_mode: str = "concat"                     # "concat" | "add"
    pos_dim: int = 32                            # used by concat mode only
    num_classes: int = 0                         # 0 disables classifier heads

    def __post_init__(self):
        if self.pos_mode not in ("concat", "add"):
            raise ConfigurationError(f"pos_mode must be concat|add, got {self.pos_mode!r}")
        if self.num_keypoints < 1:
            raise ConfigurationError("num_keypoints must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must divide evenly into heads")

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.image_size[0] // self.stride,
                self.image_size[1] // self.stride)


def self_attention(tokens: Tensor) -> Tensor:
    """Projection-free scaled dot-product self-attention.

    tokens: (..., n, d). Row i of the output is sum_j w_ij * token_j with
    w_ij = softmax_j(token_i . token_j / sqrt(d)); every output row is a
    convex combination of the input rows.
    """
    return cross_attention(tokens, tokens)


def cross_attention(queries: Tensor, tokens: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V with K = V = tokens."""
    d = tokens.shape[-1]
    logits = queries @ tokens.transpose(-2, -1) / math.sqrt(d)
    return torch.softmax(logits, dim=-1) @ tokens


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = x.transpose(-3, -2)
    *lead, n, heads, dh = x.shape
    return x.reshape(*lead, n, heads * dh)


def multihead_attention(queries: Tensor, tokens: Tensor, heads: int) -> Tensor:
    """Channel-chunked multi-head variant of the projection-free attention."""
    out = cross_attention(_split_heads(queries, heads), _split_heads(tokens, heads))
    return _merge_heads(out)


def sinusoidal_positions(h: int, w: int, dim: int, *,
                         dtype: torch.dtype = torch.float64) -> Tensor:
    """Fixed 2-D sin/cos position table, shape (h*w, dim)."""
    if dim % 4:
        raise ConfigurationError("position dim must be a multiple of 4")
    quarter = dim // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=dtype) / max(quarter, 1))
    ys = torch.arange(h, dtype=dtype)[:, None] * freqs       # (h, q)
    xs = torch.arange(w, dtype=dtype)[:, None] * freqs       # (w, q)
    y_emb = torch.cat([ys.sin(), ys.cos()], dim=-1)          # (h, dim/2)
    x_emb = torch.cat([xs.sin(), xs.cos()], dim=-1)          # (w, dim/2)
    table = torch.cat([
        y_emb[:, None, :].expand(h, w, dim // 2),
        x_emb[None, :, :].expand(h, w, dim // 2),
    ], dim=-1)
    return table.reshape(h * w, dim)


class ConvBackbone(nn.Module):
    """Strided conv stack: one stride-2 block per entry of ``channels``,
    then a stride-1 block to the transformer width."""

    def __init__(self, in_channels: int, channels: tuple[int, ...], out_dim: int):
        super().__init__()
        blocks = []
        prev = in_channels
        for ch in channels:
            blocks += [nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                       nn.GroupNorm(_groups(ch), ch), nn.GELU()]
            prev = ch
        blocks += [nn.Conv2d(prev, out_dim, 3, stride=1, padding=1),
                   nn.GroupNorm(_groups(out_dim), out_dim), nn.GELU()]
        self.blocks = nn.Sequential(*blocks)
        self.stride = 2 ** len(channels)

    def forward(self, images: Tensor) -> Tensor:
        h, w = images.shape[-2:]
        if h < self.stride or w < self.stride or h % self.stride or w % self.stride:
            raise ValueError(
                f"image size {h}x{w} is not a positive multiple of the "
                f"backbone stride {self.stride}")
        return self.blocks(images)


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(),
                                 nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    """Post-norm block: chunked self-attention, then a feed-forward net."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + multihead_attention(x, x, self.heads))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    """Query self-attention, cross-attention over tokens, feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, queries: Tensor, tokens: Tensor) -> Tensor:
        q = self.norm1(queries + multihead_attention(queries, queries, self.heads))
        q = self.norm2(q + multihead_attention(q, tokens, self.heads))
        return self.norm3(q + self.ffn(q))


class MapHead(nn.Module):
    """Two-layer MLP projecting query embeddings before the feature-map dot."""

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, emb: Tensor) -> Tensor:
        return self.net(emb)


@dataclass
class HeadOutputs:
    heatmaps: Tensor        # (B, K, h, w), each map sums to 1
    segmap_logits: Tensor   # (B, K+1, h, w), unbounded


@dataclass
class NetOutputs:
    """Everything one forward pass produces."""

    featmap: Tensor           # (B, D, h, w) backbone features
    f_g: Tensor               # (B, d_g, h, w) encoded global feature map
    heatmaps: Tensor          # (B, K, h, w)
    segmap_logits: Tensor     # (B, K+1, h, w)
    parts: Tensor             # (B, K+1, h, w) per-pixel simplex
    coords: Tensor            # (B, K, 2)
    jacobians: Tensor         # (B, K, 2, 2)
    global_vec: Tensor        # (B, d_g) raw pooled global feature
    part_vecs: Tensor         # (B, K, d_g) raw pooled part features
    part_masses: Tensor       # (B, K) foreground mass per part
    global_logits: Tensor | None = None   # (B, C)
    part_logits: Tensor | None = None     # (K, B, C)

    def keypoints(self) -> "motion.KeypointState":
        return motion.KeypointState(coords=self.coords, jacobians=self.jacobians)


class MotionAwareNet(nn.Module):
    """Full network: backbone -> encoder -> decoder -> two map heads."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.backbone = ConvBackbone(cfg.in_channels, cfg.backbone_channels, d)
        token_dim = d + cfg.pos_dim if cfg.pos_mode == "concat" else d
        self.input_proj = nn.Linear(token_dim, d)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, cfg.num_heads, cfg.ffn_dim)
            for _ in range(cfg.encoder_layers))
        self.decoder = nn.ModuleList(
            DecoderLayer(d, cfg.num_heads, cfg.ffn_dim)
            for _ in range(cfg.decoder_layers))
        k = cfg.num_keypoints
        self.keypoint_queries = nn.Parameter(torch.randn(k, d) * 0.1)
        self.segment_queries = nn.Parameter(torch.randn(k + 1, d) * 0.1)
        self.keypoint_head = MapHead(d)
        self.segment_head = MapHead(d)
        self.jacobian_head = motion.JacobianHead(d, k)
        if cfg.num_classes > 0:
            self.global_classifier = nn.Linear(d, cfg.num_classes)
            self.part_classifiers = nn.ModuleList(
                nn.Linear(d, cfg.num_classes) for _ in range(k))
        else:
            self.global_classifier = None
            self.part_classifiers = None
        pos_dim = cfg.pos_dim if cfg.pos_mode == "concat" else d
        h, w = cfg.grid_size
        self.register_buffer("pos_table",
                             sinusoidal_positions(h, w, pos_dim), persistent=False)

    # -- spec surface -------------------------------------------------------

    def extract_features(self, images: Tensor) -> Tensor:
        """(B, C, H, W) -> (B, D, h, w) with h = H/stride, w = W/stride."""
        return self.backbone(images)

    def attach_positions(self, featmap: Tensor) -> Tensor:
        """Flatten a feature map into tokens and add/concat positions."""
        b, d, h, w = featmap.shape
        tokens = featmap.flatten(2).transpose(1, 2)          # (B, hw, D)
        pos = self.pos_table.to(tokens.dtype)
        if pos.shape[0] != h * w:
            pos = sinusoidal_positions(h, w, pos.shape[1], dtype=tokens.dtype)
        pos = pos.to(tokens.device)
        if self.cfg.pos_mode == "concat":
            return torch.cat([tokens, pos.expand(b, -1, -1)], dim=-1)
        return tokens + pos

    def encode(self, tokens: Tensor, grid_hw: tuple[int, int] | None = None) -> Tensor:
        """Project tokens and run the encoder stack; returns f_g (B, d_g, h, w)."""
        h, w = grid_hw or self.cfg.grid_size
        x = self.input_proj(tokens)
        for layer in self.encoder:
            x = layer(x)
        return x.transpose(1, 2).reshape(x.shape[0], -1, h, w)

    def decode_queries(self, f_g: Tensor,
                       queries: tuple[Tensor, Tensor] | None = None
                       ) -> tuple[Tensor, Tensor]:
        """Cross-attend learned queries over f_g tokens.

        Returns (keypoint_embeddings (B, K, d_g), segment_embeddings
        (B, K+1, d_g)). ``queries`` overrides the learned parameters.
        """
        kp_q, seg_q = queries if queries is not None else (
            self.keypoint_queries, self.segment_queries)
        b = f_g.shape[0]
        tokens = f_g.flatten(2).transpose(1, 2)
        q = torch.cat([kp_q, seg_q], dim=0).to(tokens.dtype).expand(b, -1, -1)
        for layer in self.decoder:
            q = layer(q, tokens)
        return q[:, :kp_q.shape[0]], q[:, kp_q.shape[0]:]

    def project_maps(self, kp_emb: Tensor, seg_emb: Tensor, f_g: Tensor) -> HeadOutputs:
        """Multiply projected embeddings onto f_g.

        Keypoint maps pass through a sigmoid and are normalized to sum to 1
        over the grid; segment maps stay as raw logits. Dot products are
        scaled by 1/sqrt(d_g) to keep the sigmoid out of saturation.
        """
        scale = 1.0 / math.sqrt(f_g.shape[1])
        kp_dot = torch.einsum("bkc,bchw->bkhw", self.keypoint_head(kp_emb), f_g) * scale
        raw = torch.sigmoid(kp_dot)
        heatmaps = raw / (raw.sum(dim=(-2, -1), keepdim=True) + HEATMAP_EPS)
        seg_logits = torch.einsum("bkc,bchw->bkhw", self.segment_head(seg_emb), f_g) * scale
        return HeadOutputs(heatmaps=heatmaps, segmap_logits=seg_logits)

    # -- full pass ----------------------------------------------------------

    def forward(self, images: Tensor, *, detach_keypoints: bool = False) -> NetOutputs:
        featmap = self.extract_features(images)
        h, w = featmap.shape[-2:]
        f_g = self.encode(self.attach_positions(featmap), (h, w))
        kp_emb, seg_emb = self.decode_queries(f_g)
        heads = self.project_maps(kp_emb, seg_emb, f_g)
        parts = torch.softmax(heads.segmap_logits, dim=1)
        heatmaps = heads.heatmaps
        jacobians = self.jacobian_head(f_g, heatmaps)
        if detach_keypoints:
            heatmaps = heatmaps.detach()
            jacobians = jacobians.detach()
        coords = motion.soft_argmax(heatmaps)
        k = self.cfg.num_keypoints
        masses = parts[:, :k].sum(dim=(-2, -1))
        part_vecs = weighted_pool(f_g, parts)
        global_vec = f_g.mean(dim=(-2, -1))
        global_logits = part_logits = None
        if self.global_classifier is not None:
            global_logits = self.global_classifier(global_vec)
            part_logits = torch.stack(
                [clf(part_vecs[:, i]) for i, clf in enumerate(self.part_classifiers)])
        return NetOutputs(featmap=featmap, f_g=f_g, heatmaps=heatmaps,
                          segmap_logits=heads.segmap_logits, parts=parts,
                          coords=coords, jacobians=jacobians,
                          global_vec=global_vec, part_vecs=part_vecs,
                          part_masses=masses, global_logits=global_logits,
                          part_logits=part_logits)


