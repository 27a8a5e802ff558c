"""Object-centric 3D instance extraction.

State probes carry a semantic vector and a 3D reference point. Each decoder
layer projects the point into every camera, samples a multi-scale feature
pyramid around the projected pivot with predicted offsets and weights, fuses
the per-view results through an occlusion gate, and nudges the reference
point by a tanh-bounded step. Final probes decode a confidence logit plus
per-view boxes and mask logits conditioned on the view-specific projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraView, project_tensor
from .fusion import SpatialMemory
from .nn.layers import MLP, Linear, PatchConv, TransposedConv2x, sinusoid_features
from .nn.params import ParamStore
from .nn.tensor import Tensor, bilinear_sample, concat, maximum, softmax, stack

PYRAMID_STRIDES = (8, 16, 32)
GATE_SUM_FLOOR = 1e-6
PE_FREQS = 16  # 32 dims per image axis


@dataclass
class InstanceConfig:
    channels: int = 16
    num_probes: int = 32
    layers: int = 3
    heads: int = 4            # deformable heads M
    points: int = 4           # sampled keys K per head and scale
    scales: tuple = PYRAMID_STRIDES
    alpha: float = 0.1        # per-layer displacement bound, meters
    tau_view_init: float = 1.0
    workspace: np.ndarray | None = None


@dataclass
class FeaturePyramid:
    levels: dict[int, Tensor]   # stride -> (V, C, H/s, W/s)
    mask_map: Tensor            # (V, C, H/4, W/4)

    @property
    def num_scales(self) -> int:
        return len(self.levels)


class PyramidBuilder:
    """Strided convolutions for the semantic levels; the quarter-scale mask map
    is a transposed-conv upsampling of the stride-8 level plus a lateral skip
    from the memory grid (FPN-style, keeps fine detail for mask supervision).

    Level strides are image-plane strides; when the memory grid itself sits at
    ``token_stride`` pixels per cell the convolution strides shrink to match.
    """

    MASK_STRIDE = 4

    def __init__(self, store: ParamStore, channels: int, token_stride: int = 1,
                 name: str = "pyramid"):
        if any(s % token_stride for s in PYRAMID_STRIDES):
            raise ValueError(f"token_stride {token_stride} must divide the "
                             f"pyramid strides {PYRAMID_STRIDES}")
        self.channels = channels
        self.token_stride = token_stride
        self.convs = {s: PatchConv(store, f"{name}.s{s}", channels, channels,
                                   s // token_stride)
                      for s in PYRAMID_STRIDES}
        self.up = TransposedConv2x(store, f"{name}.mask_up", channels, channels)
        if token_stride <= self.MASK_STRIDE:
            self.lateral = PatchConv(store, f"{name}.mask_skip", channels, channels,
                                     self.MASK_STRIDE // token_stride)
        else:  # memory coarser than the mask grid: upsample the skip too
            self.lateral = TransposedConv2x(store, f"{name}.mask_skip", channels,
                                            channels)

    def __call__(self, mem: SpatialMemory) -> FeaturePyramid:
        v, h, w = mem.layout
        img_h, img_w = h * self.token_stride, w * self.token_stride
        if img_h % 32 or img_w % 32:
            raise ValueError(f"image grid {(img_h, img_w)} must be divisible by 32")
        grid = mem.tokens.reshape(v, h, w, self.channels).transpose((0, 3, 1, 2))
        levels = {s: conv(grid).gelu() for s, conv in self.convs.items()}
        mask_map = self.up(levels[8]) + self.lateral(grid)
        return FeaturePyramid(levels=levels, mask_map=mask_map)


@dataclass
class ProbeOutputs:
    class_logits: Tensor      # (N_q,)
    boxes: Tensor             # (V, N_q, 4) corner form, in [0, 1]
    mask_logits: Tensor       # (V, N_q, hm, wm)
    points: Tensor            # (N_q, 3)
    semantics: Tensor         # (N_q, C)
    gates: Tensor             # (V, N_q) from the last decoder layer

    def detached(self) -> "ProbeOutputs":
        return ProbeOutputs(*(t.detach() for t in
                              (self.class_logits, self.boxes, self.mask_logits,
                               self.points, self.semantics, self.gates)))


def probe_grid(n: int, workspace: np.ndarray) -> np.ndarray:
    """Reference-point lattice of exactly n cells spanning the workspace."""
    best = (n, 1, 1)
    for a in range(1, n + 1):
        if n % a:
            continue
        for b in range(1, n // a + 1):
            if (n // a) % b:
                continue
            c = n // (a * b)
            if max(a, b, c) - min(a, b, c) < max(best) - min(best):
                best = (a, b, c)
    dims = sorted(best, reverse=True)
    axes = [lo + (hi - lo) * (np.arange(d) + 0.5) / d
            for d, (lo, hi) in zip(dims, workspace)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=-1)


def encode_pivot(uv: Tensor) -> Tensor:
    """Sinusoidal positional encoding of a normalized image point, 32 dims/axis."""
    return sinusoid_features(uv, PE_FREQS)


def _radial_offset_init(heads: int, points: int, scales: int,
                        base: float = 0.05) -> np.ndarray:
    """Offset bias spreading the initial samples on rings around the pivot,
    one direction per head and growing radius per point; without it every
    sample starts at the pivot pixel and probes are blind to their
    surroundings."""
    angles = 2.0 * np.pi * np.arange(heads) / heads
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (M, 2)
    radii = base * (np.arange(points) + 1.0)                    # (K,)
    grid = dirs[:, None, None, :] * radii[None, :, None, None]
    return np.broadcast_to(grid, (heads, points, scales, 2)).reshape(-1)


class InstanceDecoder:
    def __init__(self, store: ParamStore, cfg: InstanceConfig, name: str = "probe"):
        c, m, k, s = cfg.channels, cfg.heads, cfg.points, len(cfg.scales)
        self.cfg = cfg
        self.num_scales = s
        workspace = cfg.workspace if cfg.workspace is not None else \
            np.array([[-0.5, 0.5], [-0.5, 0.5], [0.0, 1.0]])
        self.c0 = store.add(f"{name}.c0", (cfg.num_probes, c))
        self.p0 = probe_grid(cfg.num_probes, workspace)
        n_layers = max(cfg.layers, 1)  # one weight set per decoder layer
        self.off = [Linear(store, f"{name}.l{i}.offsets", c, m * k * s * 2,
                           b_init=_radial_offset_init(m, k, s))
                    for i in range(n_layers)]
        self.att = [Linear(store, f"{name}.l{i}.weights", c, m * k * s)
                    for i in range(n_layers)]
        self.val = [Linear(store, f"{name}.l{i}.value", c, c, bias=False)
                    for i in range(n_layers)]
        self.head_mix = [store.add(f"{name}.l{i}.head_mix", (m, c, c))
                         for i in range(n_layers)]
        self.gate = [MLP(store, f"{name}.l{i}.gate", [c, c, 1])
                     for i in range(n_layers)]
        self.coord = [MLP(store, f"{name}.l{i}.coord", [c, 4 * c, 3])
                      for i in range(n_layers)]
        self.tau_view = store.add(f"{name}.tau_view", (),
                                  init=("const", cfg.tau_view_init))
        pe_dim = 4 * PE_FREQS
        self.box_head = MLP(store, f"{name}.box", [c + pe_dim, 4 * c, 4])
        self.mask_head = MLP(store, f"{name}.mask", [c + pe_dim, 4 * c, c])
        self.cls_head = Linear(store, f"{name}.cls", c, 1)

    # ---- single operations ------------------------------------------------

    def deformable_attend(self, c: Tensor, point: Tensor, pyr: FeaturePyramid,
                          cam: CameraView, layer: int = 0) -> Tensor:
        """Sample the pyramid of one view around the projected reference point."""
        cfg = self.cfg
        nq, m, k, s = c.shape[0], cfg.heads, cfg.points, self.num_scales
        uv, _ = project_tensor(point, cam)
        offsets = self.off[layer](c).reshape(nq, m, k, s, 2)
        pts = uv.reshape(nq, 1, 1, 1, 2) + offsets
        weights = softmax(self.att[layer](c).reshape(nq, m, k * s), axis=-1) \
            .reshape(nq, m, k, s)
        v = cam.view_id
        sampled = []
        for si, stride in enumerate(cfg.scales):
            fmap = pyr.levels[stride][v]
            sampled.append(bilinear_sample(fmap, pts[:, :, :, si, :]))
        samples = stack(sampled, axis=3)                      # (N_q, M, K, S, C)
        values = samples @ self.val[layer].w                  # shared value proj
        weighted = (values * weights.reshape(nq, m, k, s, 1)).sum(axis=3).sum(axis=2)
        mixed = weighted.swapaxes(0, 1) @ self.head_mix[layer]  # (M, N_q, C)
        return mixed.sum(axis=0)

    def view_gates(self, per_view_h: list[Tensor], layer: int = 0) -> Tensor:
        """Normalized occlusion gates, shape (V, N_q, 1)."""
        logits = [self.gate[layer](h) / self.tau_view.reshape(1, 1)
                  for h in per_view_h]
        g = stack(logits, axis=0).sigmoid()
        total = maximum(g.sum(axis=0, keepdims=True), GATE_SUM_FLOOR)
        return g / total

    def gate_and_update(self, c: Tensor, per_view_h: list[Tensor],
                        layer: int = 0) -> tuple[Tensor, Tensor]:
        gates = self.view_gates(per_view_h, layer)
        update = (stack(per_view_h, axis=0) * gates).sum(axis=0)
        return c + update, gates

    def refine_coordinate(self, c: Tensor, point: Tensor, layer: int = 0) -> Tensor:
        return point + self.cfg.alpha * self.coord[layer](c).tanh()

    def decode_heads(self, c: Tensor, point: Tensor, pyr: FeaturePyramid,
                     cams: list[CameraView]):
        nq = c.shape[0]
        logits = self.cls_head(c).reshape(nq)
        boxes, masks = [], []
        v_count, ch, hm, wm = pyr.mask_map.shape
        for cam in cams:
            uv, _ = project_tensor(point, cam)
            feat = concat([c, encode_pivot(uv)], axis=-1)
            raw = self.box_head(feat)
            # centers anchored at the projected reference point: the head
            # predicts a logit-space offset, so a zero-init head decodes a
            # half-extent box centered on the anchor
            anchor = np.clip(uv.data, 1e-4, 1.0 - 1e-4)
            anchor_logit = np.log(anchor / (1.0 - anchor))
            cx = (raw[:, 0] + anchor_logit[:, 0]).sigmoid()
            cy = (raw[:, 1] + anchor_logit[:, 1]).sigmoid()
            w2 = 0.5 * raw[:, 2].sigmoid()
            h2 = 0.5 * raw[:, 3].sigmoid()
            corners = stack([(cx - w2).clip(0.0, 1.0), (cy - h2).clip(0.0, 1.0),
                             (cx + w2).clip(0.0, 1.0), (cy + h2).clip(0.0, 1.0)],
                            axis=-1)
            boxes.append(corners)
            embed = self.mask_head(feat)                   # (N_q, C)
            flat = pyr.mask_map[cam.view_id].reshape(ch, hm * wm)
            masks.append((embed @ flat).reshape(nq, hm, wm))
        return logits, stack(boxes, axis=0), stack(masks, axis=0)

    # ---- full decoder -------------------------------------------------------

    def run(self, pyr: FeaturePyramid, cams: list[CameraView],
            layers: int | None = None) -> ProbeOutputs:
        cfg = self.cfg
        layers = cfg.layers if layers is None else layers
        c = self.c0 + 0.0  # graph node so probe params receive grads
        point = Tensor(self.p0.copy())
        gates = None
        for li in range(layers):
            wi = min(li, len(self.off) - 1)
            # sampling pivots and head conditioning treat the current point as
            # a fixed anchor; only the absolute 3D loss trains the refinement
            per_view = [self.deformable_attend(c, point.detach(), pyr, cam, wi)
                        for cam in cams]
            c, gates = self.gate_and_update(c, per_view, wi)
            point = self.refine_coordinate(c, point, wi)
        logits, boxes, masks = self.decode_heads(c, point.detach(), pyr, cams)
        if gates is None:
            gates = Tensor(np.full((len(cams), cfg.num_probes, 1),
                                   1.0 / len(cams)))
        return ProbeOutputs(class_logits=logits, boxes=boxes, mask_logits=masks,
                            points=point, semantics=c,
                            gates=gates.reshape(len(cams), cfg.num_probes))
