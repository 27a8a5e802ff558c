"""Coordinate-driven feature prediction for masked and occluded regions.

Training masks out block-structured token regions independently per view and
asks a light cross/self-attention predictor to regress the fused features at
the masked coordinates from the remaining context, distilled against an EMA
teacher that sees the full scene. The same predictor answers free-space
completion queries placed on the hidden side of partially observed objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .fusion import Rope3DConfig, SpatialMemory, rope3d, rope_phases
from .nn.layers import LayerNorm, Linear, sinusoid_features
from .nn.params import ParamStore
from .nn.tensor import Tensor, as_tensor, softmax, where
from .rng import Stream
from .scene import Scene

MASK_BLOCK = 4            # token block edge for structured masking
DENOISE_RADIUS = 0.05     # meters
DENOISE_MIN_PTS = 4
KEEP_FARTHEST = 64        # candidate pool size before final FPS
QUERIES_PER_INSTANCE = 5
MAX_COMPLETION_INSTANCES = 6
LOW_NOVELTY_DIST = 0.02   # meters; queries closer to observed geometry are flagged
DISTILL_LAMBDAS = {"recon": 1.0, "cos": 0.1, "var": 10.0}


class EmptyContextError(ValueError):
    pass


# ---- masking -------------------------------------------------------------------


@dataclass
class MaskPlan:
    masks: np.ndarray    # (V, H, W) bool, True = masked
    ratio: float

    @property
    def per_view_ratio(self) -> np.ndarray:
        v = self.masks.shape[0]
        return self.masks.reshape(v, -1).mean(axis=1)

    def masked_indices(self) -> np.ndarray:
        return np.where(self.masks.reshape(-1))[0]

    def visible_indices(self) -> np.ndarray:
        return np.where(~self.masks.reshape(-1))[0]


def plan_masks(layout: tuple, ratio: float, stream: Stream,
               block: int = MASK_BLOCK) -> MaskPlan:
    """Blockwise random masks drawn independently per view.

    Whole blocks are taken in random order and the final block is trimmed
    tokenwise, so every view masks exactly round(ratio * tokens) tokens while
    keeping the block structure that prevents trivial interpolation.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio {ratio} outside (0, 1)")
    v, h, w = layout
    masks = np.zeros((v, h, w), dtype=bool)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    block_id = (rows // block) * ((w + block - 1) // block) + cols // block
    n_blocks = block_id.max() + 1
    target = int(round(ratio * h * w))
    for view in range(v):
        s = stream.child(f"mask/{view}")
        order = s.permutation(n_blocks)
        flat = masks[view].reshape(-1)
        taken = 0
        for b in order:
            members = np.where(block_id.reshape(-1) == b)[0]
            if taken + len(members) <= target:
                flat[members] = True
                taken += len(members)
            else:
                need = target - taken
                if need > 0:
                    pick = s.child(f"trim/{b}").choice(len(members), need)
                    flat[members[pick]] = True
                    taken = target
                break
            if taken == target:
                break
    return MaskPlan(masks=masks, ratio=ratio)


# ---- completion coordinates -----------------------------------------------------


@dataclass
class CompletionQuery:
    coord: np.ndarray
    view_id: int
    instance_id: int
    novelty: float
    low_novelty: bool


def farthest_point_sample(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection of k indices, beginning at ``start``."""
    points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    if k > len(points):
        raise ValueError(f"cannot sample {k} of {len(points)} points")
    chosen = [start]
    dists = np.linalg.norm(points - points[start], axis=1)
    for _ in range(k - 1):
        nxt = int(dists.argmax())
        chosen.append(nxt)
        dists = np.minimum(dists, np.linalg.norm(points - points[nxt], axis=1))
    return np.asarray(chosen)


def density_denoise(points: np.ndarray, radius: float = DENOISE_RADIUS,
                    min_pts: int = DENOISE_MIN_PTS) -> np.ndarray:
    """Drop points with fewer than min_pts neighbors (self excluded) within radius."""
    if len(points) == 0:
        return points
    tree = cKDTree(points)
    counts = np.array([len(n) - 1 for n in tree.query_ball_point(points, radius)])
    return points[counts >= min_pts]


def observed_instance_cloud(scene: Scene, k: int, max_points: int = 400,
                            stream: Stream | None = None) -> np.ndarray:
    """Unprojected world points of instance k across all views' visible pixels."""
    from .camera import unproject

    bags = []
    for v, (depth, cam) in enumerate(zip(scene.observation.depths,
                                         scene.observation.cameras)):
        sel = scene.observation.features[v, 4 + k] > 0.5
        if not sel.any():
            continue
        ys, xs = np.where(sel)
        pix = np.stack([xs, ys], axis=-1).astype(np.float64)
        bags.append(unproject(pix, depth.depth[sel], cam))
    if not bags:
        return np.zeros((0, 3))
    cloud = np.concatenate(bags, axis=0)
    if len(cloud) > max_points:
        picker = stream if stream is not None else Stream(0)
        cloud = cloud[picker.child(f"cloud/{k}").choice(len(cloud), max_points)]
    return cloud


def generate_completion_coords(scene: Scene, stream: Stream,
                               queries_per_instance: int = QUERIES_PER_INSTANCE,
                               keep_farthest: int = KEEP_FARTHEST,
                               observed_clouds: dict[int, np.ndarray] | None = None
                               ) -> list[CompletionQuery]:
    """Place completion queries on the unobserved side of each instance.

    Pipeline per instance: unproject its visible pixels, density-denoise the
    cloud, score the analytic dense surface samples by distance to the nearest
    observed point, keep the farthest pool, then run farthest point sampling
    down to exactly the query budget.
    """
    truth = scene.truth
    queries: list[CompletionQuery] = []
    for k in range(min(truth.num_instances, MAX_COMPLETION_INSTANCES)):
        if not truth.vis[:, k].any():
            continue
        if observed_clouds is not None:
            if k not in observed_clouds:
                continue
            cloud = observed_clouds[k]
        else:
            cloud = observed_instance_cloud(scene, k, stream=stream)
        cloud = density_denoise(cloud)
        if len(cloud) == 0:
            continue
        candidates = truth.dense_points[k]
        dist, _ = cKDTree(cloud).query(candidates)
        pool = min(keep_farthest, len(candidates))
        keep = np.argsort(-dist, kind="stable")[:pool]
        cand, score = candidates[keep], dist[keep]
        sel = farthest_point_sample(cand, queries_per_instance, start=0)
        counts = truth.masks[:, k].reshape(truth.masks.shape[0], -1).sum(axis=1)
        view_id = int(counts.argmax())
        for i in sel:
            queries.append(CompletionQuery(
                coord=cand[i].copy(), view_id=view_id,
                instance_id=int(truth.instance_ids[k]),
                novelty=float(score[i]),
                low_novelty=bool(score[i] < LOW_NOVELTY_DIST),
            ))
    return queries


# ---- predictor network -----------------------------------------------------------


@dataclass
class PredictorConfig:
    channels: int = 16
    heads: int = 4
    head_dim: int = 24
    blocks: int = 2
    ffn_ratio: int = 4
    pos_freqs: int = 8
    max_views: int = 4
    rope_scale: float = 10.0


class _HybridAttention:
    """Attention with rotary phases on queries and keys only."""

    def __init__(self, store: ParamStore, name: str, cfg: PredictorConfig):
        c, m, d = cfg.channels, cfg.heads, cfg.head_dim
        self.cfg = cfg
        self.rope = Rope3DConfig(head_dim=d, coord_scale=cfg.rope_scale)
        self.wq = Linear(store, f"{name}.q", c, m * d)
        self.wk = Linear(store, f"{name}.k", c, m * d)
        self.wv = Linear(store, f"{name}.v", c, m * d)
        self.wo = Linear(store, f"{name}.out", m * d, c)

    def __call__(self, xq: Tensor, q_tables: tuple,
                 xkv: Tensor, kv_tables: tuple) -> Tensor:
        m, d = self.cfg.heads, self.cfg.head_dim
        nq, nk = xq.shape[0], xkv.shape[0]
        q = rope3d(self.wq(xq).reshape(nq, m, d).swapaxes(0, 1), None, self.rope, q_tables)
        k = rope3d(self.wk(xkv).reshape(nk, m, d).swapaxes(0, 1), None, self.rope, kv_tables)
        v = self.wv(xkv).reshape(nk, m, d).swapaxes(0, 1)
        attn = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d)), axis=-1)
        return self.wo((attn @ v).swapaxes(0, 1).reshape(nq, m * d))


class _PredictorBlock:
    def __init__(self, store: ParamStore, name: str, cfg: PredictorConfig):
        c = cfg.channels
        self.ln_cross_q = LayerNorm(store, f"{name}.ln_cq", c)
        self.ln_cross_kv = LayerNorm(store, f"{name}.ln_ckv", c)
        self.cross = _HybridAttention(store, f"{name}.cross", cfg)
        self.ln_self = LayerNorm(store, f"{name}.ln_self", c)
        self.self_attn = _HybridAttention(store, f"{name}.self", cfg)
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", c)
        self.ffn1 = Linear(store, f"{name}.ffn1", c, cfg.ffn_ratio * c)
        self.ffn2 = Linear(store, f"{name}.ffn2", cfg.ffn_ratio * c, c)

    def __call__(self, z, tgt_tables, ctx, ctx_tables):
        z = z + self.cross(self.ln_cross_q(z), tgt_tables,
                           self.ln_cross_kv(ctx), ctx_tables)
        zn = self.ln_self(z)
        z = z + self.self_attn(zn, tgt_tables, zn, tgt_tables)
        return z + self.ffn2(self.ffn1(self.ln_ffn(z)).gelu())


class Predictor:
    def __init__(self, store: ParamStore, cfg: PredictorConfig, name: str = "predictor"):
        c = cfg.channels
        self.cfg = cfg
        self.start = store.add(f"{name}.start", (c,))
        self.pos_proj = Linear(store, f"{name}.pos", 6 * cfg.pos_freqs, c)
        self.view_embed = store.add(f"{name}.view_embed", (cfg.max_views, c))
        self.blocks = [_PredictorBlock(store, f"{name}.block{i}", cfg)
                       for i in range(cfg.blocks)]
        self.ln_out = LayerNorm(store, f"{name}.ln_out", c)
        self.head = Linear(store, f"{name}.head", c, c)

    def positional(self, coords: np.ndarray) -> Tensor:
        return self.pos_proj(sinusoid_features(Tensor(np.atleast_2d(coords)),
                                               self.cfg.pos_freqs))

    def inject(self, tokens: Tensor, coords: np.ndarray, views: np.ndarray) -> Tensor:
        return tokens + self.positional(coords) + self.view_embed[np.asarray(views)]

    def predict(self, ctx_tokens: Tensor, ctx_coords: np.ndarray, ctx_views: np.ndarray,
                tgt_coords: np.ndarray, tgt_views: np.ndarray) -> Tensor:
        """Feature estimates at target coordinates, ordered as given
        (masked coordinates first, completion queries after)."""
        if ctx_tokens.shape[0] == 0:
            raise EmptyContextError("predictor needs at least one visible token")
        n_tgt = len(tgt_coords)
        ctx = self.inject(as_tensor(ctx_tokens), ctx_coords, ctx_views)
        z = self.start.reshape(1, -1) * Tensor(np.ones((n_tgt, 1)))
        z = self.inject(z, tgt_coords, tgt_views)
        rope_cfg = self.blocks[0].cross.rope if self.blocks else None
        tgt_tables = rope_phases(tgt_coords, rope_cfg) if self.blocks else None
        ctx_tables = rope_phases(ctx_coords, rope_cfg) if self.blocks else None
        for block in self.blocks:
            z = block(z, tgt_tables, ctx, ctx_tables)
        return self.head(self.ln_out(z))


# ---- EMA teacher ------------------------------------------------------------------


@dataclass
class TeacherState:
    store: ParamStore
    momentum: float

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("EMA momentum must be in [0, 1]")
        self.store.set_trainable(lambda name: False)


def ema_update(teacher: TeacherState, student: ParamStore) -> None:
    """theta_T <- m * theta_T + (1 - m) * theta_S, elementwise."""
    m = teacher.momentum
    student_state = {n: student.get(n).data for n in student.names()}
    for name in teacher.store.names():
        t = teacher.store.get(name)
        s = student_state.get(name)
        if s is None:
            raise KeyError(f"student is missing parameter '{name}'")
        if s.shape != t.data.shape:
            raise ValueError(f"shape mismatch for '{name}'")
        t.data = m * t.data + (1.0 - m) * s


# ---- distillation objective --------------------------------------------------------


@dataclass
class DistillReport:
    terms: dict[str, float]
    lambdas: dict[str, float]
    total: float
    tensors: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def total_tensor(self) -> Tensor:
        out = None
        for name in ("recon", "cos", "var"):
            piece = self.tensors[name] * self.lambdas[name]
            out = piece if out is None else out + piece
        return out


def _channel_std(x: Tensor) -> Tensor:
    mu = x.mean(axis=0, keepdims=True)
    d = x - mu
    return ((d * d).mean(axis=0) + 1e-12).sqrt()


def distill_loss(pred: Tensor, teacher_targets: np.ndarray,
                 lambdas: dict[str, float] | None = None) -> DistillReport:
    """Smooth-L1 + cosine-distance + variance-floor objective.

    ``teacher_targets`` is a constant (stop-gradient) array. With no masked
    tokens all terms are zero; the variance term needs at least two tokens.
    """
    lambdas = dict(DISTILL_LAMBDAS if lambdas is None else lambdas)
    y = np.asarray(teacher_targets, dtype=np.float64)
    n = len(y)
    if n == 0:
        zero = Tensor(0.0)
        tensors = {"recon": zero, "cos": zero, "var": zero}
        return DistillReport(terms={k: 0.0 for k in tensors}, lambdas=lambdas,
                             total=0.0, tensors=tensors)
    pred = as_tensor(pred)
    diff = pred - Tensor(y)
    adiff = diff.abs()
    recon = where(adiff.data < 1.0, 0.5 * diff * diff, adiff - 0.5).mean()

    pn = (pred * pred).sum(axis=-1).sqrt() + 1e-8
    yn = np.linalg.norm(y, axis=-1) + 1e-8
    cos_sim = (pred * Tensor(y)).sum(axis=-1) / (pn * Tensor(yn))
    cos = 1.0 - cos_sim.mean()

    if n >= 2:
        std_t = y.std(axis=0)
        gap = Tensor(std_t) - _channel_std(pred)
        var = gap.relu().mean()
    else:
        var = Tensor(0.0)

    tensors = {"recon": recon, "cos": cos, "var": var}
    values = {k: float(t.data) for k, t in tensors.items()}
    total = sum(lambdas[k] * values[k] for k in values)
    return DistillReport(terms=values, lambdas=lambdas, total=total, tensors=tensors)


def teacher_targets_for(memory: SpatialMemory, masked_idx: np.ndarray) -> np.ndarray:
    """Teacher features at masked token coordinates (teacher sees all tokens)."""
    return memory.tokens.data[masked_idx]
