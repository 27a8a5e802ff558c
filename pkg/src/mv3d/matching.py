"""Global 3D bipartite matching and the joint optimization objective.

Costs are computed per view, averaged over each target's valid views, and
assigned once with the Hungarian algorithm, so one probe owns one physical
object across all cameras. The objective combines focal classification,
box L1 and generalized-IoU terms, mask cross-entropy and Dice terms, and an
absolute 3D L1 anchor against view-averaged unprojected centroids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .instance import ProbeOutputs
from .nn.tensor import Tensor, as_tensor, maximum, minimum
from .scene import SceneTruth

DEFAULT_LAMBDAS = {
    "cls": 2.0, "box": 5.0, "giou": 2.0, "mask": 5.0, "dice": 5.0, "l1_3d": 5.0,
}
LOSS_TERMS = ("cls", "box", "giou", "mask", "dice", "l1_3d")


@dataclass
class MatchCostConfig:
    w_cls: float = 2.0
    w_box: float = 5.0
    w_giou: float = 2.0
    w_3d: float = 5.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0

    def __post_init__(self):
        if min(self.w_cls, self.w_box, self.w_giou, self.w_3d) < 0:
            raise ValueError("cost weights must be non-negative")


@dataclass
class Assignment:
    probe_idx: np.ndarray    # (K,) probe matched to each target
    target_idx: np.ndarray   # (K,)
    num_probes: int

    def matched_mask(self) -> np.ndarray:
        out = np.zeros(self.num_probes, dtype=bool)
        out[self.probe_idx] = True
        return out


def giou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Generalized IoU of corner boxes; degenerate boxes count as area-0 points."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    ix1 = np.maximum(a[:, 0], b[:, 0])
    iy1 = np.maximum(a[:, 1], b[:, 1])
    ix2 = np.minimum(a[:, 2], b[:, 2])
    iy2 = np.minimum(a[:, 3], b[:, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a + area_b - inter
    hull = ((np.maximum(a[:, 2], b[:, 2]) - np.minimum(a[:, 0], b[:, 0]))
            * (np.maximum(a[:, 3], b[:, 3]) - np.minimum(a[:, 1], b[:, 1])))
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    excess = np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1.0), 0.0)
    return iou - excess


def pairwise_cost(probe_box: np.ndarray, probe_prob: float, probe_point: np.ndarray,
                  target_box: np.ndarray, target_centroid: np.ndarray,
                  cfg: MatchCostConfig) -> float:
    """Single-view matching cost between one probe and one visible target."""
    l1 = float(np.abs(probe_box - target_box).sum())
    giou = float(giou_np(probe_box, target_box)[0])
    d3 = float(np.abs(probe_point - target_centroid).sum())
    return (cfg.w_cls * (-probe_prob) + cfg.w_box * l1
            + cfg.w_giou * (1.0 - giou) + cfg.w_3d * d3)


def global_cost_matrix(outputs: ProbeOutputs, truth: SceneTruth,
                       cfg: MatchCostConfig) -> np.ndarray:
    """View-averaged cost (N_q, K); empty valid-view sets contribute zero."""
    boxes = outputs.boxes.data            # (V, N_q, 4)
    probs = 1.0 / (1.0 + np.exp(-outputs.class_logits.data))
    points = outputs.points.data
    nq, k_count = len(probs), truth.num_instances
    pseudo = truth.pseudo_centroids()
    cost = np.zeros((nq, k_count))
    for k in range(k_count):
        views = np.where(truth.vis[:, k])[0]
        if len(views) == 0:
            continue
        acc = np.zeros(nq)
        for v in views:
            tb = truth.boxes[v, k]
            l1 = np.abs(boxes[v] - tb).sum(axis=1)
            giou = giou_np(boxes[v], np.broadcast_to(tb, boxes[v].shape))
            d3 = np.abs(points - pseudo[k]).sum(axis=1)
            acc += (cfg.w_cls * (-probs) + cfg.w_box * l1
                    + cfg.w_giou * (1.0 - giou) + cfg.w_3d * d3)
        cost[:, k] = acc / len(views)
    return cost


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost injective assignment of all columns (targets)."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    n, m = cost.shape
    if n < m:
        raise ValueError(f"need at least as many probes ({n}) as targets ({m})")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    return Assignment(probe_idx=rows[order], target_idx=cols[order], num_probes=n)


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Exhaustive assignment minimum, for verifying the Hungarian path."""
    from itertools import permutations

    n, m = cost.shape
    best = np.inf
    for perm in permutations(range(n), m):
        total = sum(cost[p, t] for t, p in enumerate(perm))
        best = min(best, total)
    return best


# ---- differentiable loss terms -------------------------------------------------


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0,
               alpha: float = 0.25) -> Tensor:
    """Mean focal binary cross-entropy over probes."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    p = logits.sigmoid()
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    # -log(p_t) without saturation: softplus(-l) for y=1, softplus(l) for y=0
    nll = (-logits).softplus() * y + logits.softplus() * (1.0 - y)
    return (alpha_t * (1.0 - p_t) ** gamma * nll).mean()


def giou_loss(box_a: Tensor, box_b: Tensor) -> Tensor:
    """1 - GIoU for corner boxes of shape (..., 4), averaged."""
    a, b = as_tensor(box_a), as_tensor(box_b)
    ix1 = maximum(a[..., 0], b[..., 0])
    iy1 = maximum(a[..., 1], b[..., 1])
    ix2 = minimum(a[..., 2], b[..., 2])
    iy2 = minimum(a[..., 3], b[..., 3])
    inter = maximum(ix2 - ix1, 0.0) * maximum(iy2 - iy1, 0.0)
    area_a = maximum(a[..., 2] - a[..., 0], 0.0) * maximum(a[..., 3] - a[..., 1], 0.0)
    area_b = maximum(b[..., 2] - b[..., 0], 0.0) * maximum(b[..., 3] - b[..., 1], 0.0)
    union = area_a + area_b - inter
    hull = ((maximum(a[..., 2], b[..., 2]) - minimum(a[..., 0], b[..., 0]))
            * (maximum(a[..., 3], b[..., 3]) - minimum(a[..., 1], b[..., 1])))
    iou = inter / maximum(union, 1e-12)
    excess = (hull - union) / maximum(hull, 1e-12)
    return (1.0 - (iou - excess)).mean()


def mask_losses(mask_logits: Tensor, target: np.ndarray,
                smooth: float = 1.0) -> tuple[Tensor, Tensor]:
    """(cross-entropy, Dice) between logits and a binary target of equal shape."""
    logits = as_tensor(mask_logits)
    q = np.asarray(target, dtype=np.float64)
    if logits.shape != q.shape:
        raise ValueError(f"mask shapes differ: {logits.shape} vs {q.shape}")
    ce = (logits.softplus() - logits * q).mean()
    p = logits.sigmoid()
    dice = 1.0 - (2.0 * (p * q).sum() + smooth) / (p.sum() + q.sum() + smooth)
    return ce, dice


@dataclass
class LossReport:
    terms: dict[str, float]
    lambdas: dict[str, float]
    total: float
    tensors: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def total_tensor(self) -> Tensor:
        out = None
        for name in LOSS_TERMS:
            piece = self.tensors[name] * self.lambdas[name]
            out = piece if out is None else out + piece
        return out

    def row(self) -> list[float]:
        return [self.terms[t] for t in LOSS_TERMS] + [self.total]


def joint_loss(outputs: ProbeOutputs, truth: SceneTruth, assignment: Assignment,
               lambdas: dict[str, float] | None = None,
               cost_cfg: MatchCostConfig | None = None) -> LossReport:
    """Six-term objective over one scene given a fixed assignment.

    Geometry terms average over matched pairs and their valid views; the
    classification term covers every probe with matched probes as positives.
    """
    lambdas = dict(DEFAULT_LAMBDAS if lambdas is None else lambdas)
    cfg = cost_cfg or MatchCostConfig()
    nq = outputs.class_logits.shape[0]
    labels = np.zeros(nq)
    labels[assignment.probe_idx] = 1.0
    terms: dict[str, Tensor] = {
        "cls": focal_loss(outputs.class_logits, labels,
                          gamma=cfg.focal_gamma, alpha=cfg.focal_alpha)
    }

    zero = Tensor(0.0)
    box_t, giou_t, ce_t, dice_t, d3_t = zero, zero, zero, zero, zero
    pairs = 0
    pseudo = truth.pseudo_centroids()
    for probe, target in zip(assignment.probe_idx, assignment.target_idx):
        views = np.where(truth.vis[:, target])[0]
        if len(views) == 0:
            continue
        pairs += 1
        pb_box, pb_ce, pb_dice, pb_giou = zero, zero, zero, zero
        for v in views:
            pred_box = outputs.boxes[int(v), int(probe)]
            tgt_box = truth.boxes[v, target]
            pb_box = pb_box + (pred_box - Tensor(tgt_box)).abs().sum()
            pb_giou = pb_giou + giou_loss(pred_box.reshape(1, 4),
                                          Tensor(tgt_box.reshape(1, 4)))
            ce, dice = mask_losses(outputs.mask_logits[int(v), int(probe)],
                                   truth.masks[v, target], smooth=cfg.dice_smooth)
            pb_ce = pb_ce + ce
            pb_dice = pb_dice + dice
        inv = 1.0 / len(views)
        box_t = box_t + pb_box * inv
        giou_t = giou_t + pb_giou * inv
        ce_t = ce_t + pb_ce * inv
        dice_t = dice_t + pb_dice * inv
        d3_t = d3_t + (outputs.points[int(probe)] - Tensor(pseudo[target])).abs().sum()
    inv_pairs = 1.0 / max(pairs, 1)
    terms["box"] = box_t * inv_pairs
    terms["giou"] = giou_t * inv_pairs
    terms["mask"] = ce_t * inv_pairs
    terms["dice"] = dice_t * inv_pairs
    terms["l1_3d"] = d3_t * inv_pairs

    values = {k: float(t.data) for k, t in terms.items()}
    total = sum(lambdas[k] * values[k] for k in LOSS_TERMS)
    return LossReport(terms=values, lambdas=lambdas, total=total, tensors=terms)
