"""Multi-view token fusion into a coordinate-grounded memory.

Flattened per-view feature cells are tagged with an absolute coordinate
embedding and run through a small pre-norm transformer encoder. Rotary
phases driven by the continuous 3D world coordinate of each token are
applied to the attention queries and keys only, so attention logits see
relative Euclidean offsets while values stay untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import unproject_grid
from .nn.layers import LayerNorm, Linear
from .nn.params import ParamStore
from .nn.tensor import Tensor, as_tensor, pair_rotate, softmax
from .scene import MultiViewObservation

ROPE_BASE = 10000.0


@dataclass
class Rope3DConfig:
    head_dim: int
    base: float = ROPE_BASE
    coord_scale: float = 10.0  # rad per meter; raw meters give near-zero phases

    def __post_init__(self):
        if self.head_dim % 6:
            raise ValueError(f"head_dim={self.head_dim} must be divisible by 6")

    @property
    def d_axis(self) -> int:
        return self.head_dim // 3


def rope_phases(coords: np.ndarray, cfg: Rope3DConfig):
    """cos/sin tables of shape (N, head_dim) for per-axis pairwise rotation."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    d_axis = cfg.d_axis
    n_pairs = d_axis // 2
    freqs = cfg.base ** (-2.0 * np.arange(n_pairs) / d_axis)   # (n_pairs,)
    angles = coords[:, :, None] * cfg.coord_scale * freqs      # (N, 3, n_pairs)
    angles = np.repeat(angles, 2, axis=2).reshape(len(coords), 3 * d_axis)
    return np.cos(angles), np.sin(angles)


def rope3d(x: Tensor, coords: np.ndarray, cfg: Rope3DConfig,
           tables: tuple | None = None) -> Tensor:
    """Rotate channel pairs of x (..., N, head_dim) by coordinate-driven phases.

    The three axes occupy consecutive channel blocks of size head_dim/3; within
    a block, channels (2i, 2i+1) form one rotation pair. Precomputed phase
    tables may be passed to amortize them across layers.
    """
    x = as_tensor(x)
    if x.shape[-1] != cfg.head_dim:
        raise ValueError(f"last dim {x.shape[-1]} != head_dim {cfg.head_dim}")
    cos, sin = tables if tables is not None else rope_phases(coords, cfg)
    return pair_rotate(x, cos, sin)


@dataclass
class SpatialMemory:
    tokens: Tensor            # (N, C)
    coords: np.ndarray        # (N, 3) world meters
    view_ids: np.ndarray      # (N,)
    layout: tuple             # (V, H, W) flattening provenance

    def __post_init__(self):
        v, h, w = self.layout
        if self.tokens.shape[0] != v * h * w:
            raise ValueError("token count does not match layout")
        if not np.isfinite(self.coords).all():
            raise ValueError("memory coordinates must be finite")


@dataclass
class FusionConfig:
    channels: int = 16
    heads: int = 4
    head_dim: int = 24
    depth: int = 2
    ffn_ratio: int = 4
    rope_scale: float = 10.0
    token_stride: int = 1   # memory cells per image pixel step; must divide 8

    def __post_init__(self):
        if self.token_stride not in (1, 2, 4, 8):
            raise ValueError("token_stride must be one of 1, 2, 4, 8")


class CoordinateEncoder:
    """Two-layer GELU projection of raw world coordinates, layer-normalized."""

    def __init__(self, store: ParamStore, name: str, channels: int, hidden: int | None = None):
        hidden = hidden or 2 * channels
        self.l1 = Linear(store, f"{name}.proj1", 3, hidden)
        self.l2 = Linear(store, f"{name}.proj2", hidden, channels)
        self.ln = LayerNorm(store, f"{name}.ln", channels)

    def __call__(self, coords) -> Tensor:
        p = as_tensor(coords)
        return self.ln(self.l2(self.l1(p).gelu()))


class EncoderLayer:
    def __init__(self, store: ParamStore, name: str, cfg: FusionConfig):
        c, m, d = cfg.channels, cfg.heads, cfg.head_dim
        self.cfg = cfg
        self.rope = Rope3DConfig(head_dim=d, coord_scale=cfg.rope_scale)
        self.ln_attn = LayerNorm(store, f"{name}.ln_attn", c)
        self.wq = Linear(store, f"{name}.q", c, m * d)
        self.wk = Linear(store, f"{name}.k", c, m * d)
        self.wv = Linear(store, f"{name}.v", c, m * d)
        self.wo = Linear(store, f"{name}.out", m * d, c)
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", c)
        self.ffn1 = Linear(store, f"{name}.ffn1", c, cfg.ffn_ratio * c)
        self.ffn2 = Linear(store, f"{name}.ffn2", cfg.ffn_ratio * c, c)

    def _split_heads(self, x: Tensor, n: int) -> Tensor:
        m, d = self.cfg.heads, self.cfg.head_dim
        return x.reshape(n, m, d).swapaxes(0, 1)  # (M, N, d)

    def attention(self, x: Tensor, tables: tuple) -> Tensor:
        n = x.shape[0]
        h = self.ln_attn(x)
        q = rope3d(self._split_heads(self.wq(h), n), None, self.rope, tables)
        k = rope3d(self._split_heads(self.wk(h), n), None, self.rope, tables)
        v = self._split_heads(self.wv(h), n)
        logits = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.cfg.head_dim))
        attn = softmax(logits, axis=-1)
        out = (attn @ v).swapaxes(0, 1).reshape(n, -1)
        return self.wo(out)

    def __call__(self, x: Tensor, tables: tuple) -> Tensor:
        x = x + self.attention(x, tables)
        return x + self.ffn2(self.ffn1(self.ln_ffn(x)).gelu())


class SpatialFusion:
    """Coordinate encoder plus rotary-attention transformer over all tokens."""

    def __init__(self, store: ParamStore, cfg: FusionConfig, name: str = "fusion"):
        self.cfg = cfg
        self.coord_enc = CoordinateEncoder(store, f"{name}.coord", cfg.channels)
        self.layers = [EncoderLayer(store, f"{name}.layer{i}", cfg)
                       for i in range(cfg.depth)]

    def encode_coordinates(self, coords) -> Tensor:
        return self.coord_enc(coords)

    def encode(self, tokens: Tensor, coords: np.ndarray) -> Tensor:
        """Encoder over an arbitrary token set (used on masked subsets too)."""
        x = tokens + self.encode_coordinates(coords)
        tables = rope_phases(coords, self.layers[0].rope) if self.layers else None
        for layer in self.layers:
            x = layer(x, tables)
        return x

    def fuse_tokens(self, tokens: Tensor, coords: np.ndarray, view_ids: np.ndarray,
                    layout: tuple) -> SpatialMemory:
        x = self.encode(tokens, coords)
        return SpatialMemory(tokens=x, coords=coords, view_ids=view_ids, layout=layout)

    def tokenize(self, obs: MultiViewObservation):
        """Token features, world coords and view ids for an observation.

        At token_stride 1 every feature cell is a token; at larger strides the
        feature maps are sampled at cell-center pixels so tokens and their
        unprojected coordinates refer to the same image location.
        """
        v, c, h, w = obs.features.shape
        s = self.cfg.token_stride
        if c != self.cfg.channels:
            raise ValueError(f"observation has {c} channels, model expects "
                             f"{self.cfg.channels}")
        if h % s or w % s:
            raise ValueError(f"token_stride {s} does not divide {(h, w)}")
        if s == 1:
            feats = obs.features
        else:
            from .camera import _bilinear_np, cell_center_pixels

            gx, gy = cell_center_pixels(h, w, s)
            feats = np.stack([
                np.stack([_bilinear_np(view[ch], gx.reshape(-1), gy.reshape(-1))
                          .reshape(gx.shape) for ch in range(c)])
                for view in obs.features
            ])
        th, tw = h // s, w // s
        tokens = feats.transpose(0, 2, 3, 1).reshape(v * th * tw, c)
        grids = [unproject_grid(d, cam, stride=s)
                 for d, cam in zip(obs.depths, obs.cameras)]
        coords = np.concatenate([g.reshape(-1, 3) for g in grids], axis=0)
        view_ids = np.repeat(np.arange(v), th * tw)
        return tokens, coords, view_ids, (v, th, tw)

    def __call__(self, obs: MultiViewObservation) -> SpatialMemory:
        """Flatten an observation view-major / row-major and fuse it."""
        tokens, coords, view_ids, layout = self.tokenize(obs)
        return self.fuse_tokens(Tensor(tokens), coords, view_ids, layout)
