"""Geometric evaluation metrics and the inference-time completion path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import CompletionToken, select_instances
from .camera import _bilinear_np, cell_center_pixels, project, unproject
from .instance import ProbeOutputs
from .matching import Assignment
from .model import Pipeline
from .nn.tensor import Tensor
from .predictor import generate_completion_coords, plan_masks
from .rng import Stream
from .scene import Scene, raycast

VISIBILITY_TOL = 1e-4
ASSOC_RADIUS = 0.25  # meters; instance-token to truth association for completion


def centroid_l1(points: np.ndarray, assignment: Assignment, truth_centroids) -> float:
    """Mean L1 distance between matched probe points and true centroids."""
    if len(assignment.target_idx) == 0:
        return float("nan")
    errs = [np.abs(points[p] - truth_centroids[t]).sum()
            for p, t in zip(assignment.probe_idx, assignment.target_idx)]
    return float(np.mean(errs))


def mask_iou(mask_logits: np.ndarray, assignment: Assignment, truth) -> float:
    """Mean IoU of thresholded predicted masks over matched pairs and valid views."""
    scores = []
    for p, t in zip(assignment.probe_idx, assignment.target_idx):
        for v in np.where(truth.vis[:, t])[0]:
            pred = mask_logits[v, p] > 0.0  # sigmoid(x) > 0.5
            gt = truth.masks[v, t]
            union = np.logical_or(pred, gt).sum()
            scores.append(np.logical_and(pred, gt).sum() / union if union else 1.0)
    return float(np.mean(scores)) if scores else float("nan")


def point_visible(scene: Scene, point: np.ndarray, view: int) -> bool:
    """A surface point is visible when it is inside the frustum and nothing
    closer intersects the camera ray first."""
    cam = scene.observation.cameras[view]
    cam_pt = cam.r @ point + cam.t
    z = cam_pt[2]
    if z <= 0:
        return False
    pix = (cam.k @ cam_pt)[:2] / z
    if not (0 <= pix[0] <= cam.width - 1 and 0 <= pix[1] <= cam.height - 1):
        return False
    origin = cam.center
    direction = point - origin
    t_hit, _, _ = raycast(scene.primitives(), origin[None, :], direction[None, :])
    return bool(t_hit[0] >= 1.0 - VISIBILITY_TOL)


def hidden_fraction(scene: Scene, coords: np.ndarray) -> float:
    """Fraction of query points not visible from any camera."""
    if len(coords) == 0:
        return float("nan")
    hidden = 0
    for q in coords:
        seen = any(point_visible(scene, q, v)
                   for v in range(len(scene.observation.cameras)))
        hidden += not seen
    return hidden / len(coords)


def predicted_observed_clouds(pipeline: Pipeline, scene: Scene,
                              outputs: ProbeOutputs, stream: Stream,
                              threshold: float | None = None) -> dict[int, np.ndarray]:
    """Observed clouds per truth instance from thresholded predicted masks.

    Each selected instance token is associated with the nearest true centroid;
    its per-view predicted mask pixels are unprojected with the view's depth.
    """
    threshold = pipeline.cfg.model.conf_threshold if threshold is None else threshold
    tokens = select_instances(outputs, threshold=threshold)
    truth = scene.truth
    clouds: dict[int, np.ndarray] = {}
    if truth.num_instances == 0:
        return clouds
    stride = scene.spec.mask_stride
    for tok in tokens:
        dists = np.linalg.norm(truth.centroids - tok.point, axis=1)
        k = int(dists.argmin())
        if dists[k] > ASSOC_RADIUS or k in clouds:
            continue
        bags = []
        for v, (depth, cam) in enumerate(zip(scene.observation.depths,
                                             scene.observation.cameras)):
            pred = outputs.mask_logits.data[v, tok.probe_index] > 0.0
            if not pred.any():
                continue
            rows, cols = np.where(pred)
            gx, gy = cell_center_pixels(depth.depth.shape[0], depth.depth.shape[1],
                                        stride)
            px, py = gx[rows, cols], gy[rows, cols]
            d = _bilinear_np(depth.filled(), px, py)
            bags.append(unproject(np.stack([px, py], axis=-1), d, cam))
        if bags:
            cloud = np.concatenate(bags)
            if len(cloud) > 400:
                cloud = cloud[stream.child(f"pred_cloud/{k}").choice(len(cloud), 400)]
            clouds[k] = cloud
    return clouds


def inference_completions(pipeline: Pipeline, scene: Scene, memory,
                          outputs: ProbeOutputs, stream: Stream,
                          use_truth_masks: bool = False):
    """Completion queries and predicted completion tokens (masking disabled).

    At inference the predictor consumes only the completion queries; the
    context is the full unmasked token set.
    """
    if use_truth_masks:
        queries = generate_completion_coords(scene, stream)
    else:
        clouds = predicted_observed_clouds(pipeline, scene, outputs, stream)
        queries = generate_completion_coords(scene, stream, observed_clouds=clouds)
    if not queries:
        return [], []
    coords = np.stack([q.coord for q in queries])
    views = np.array([q.view_id for q in queries], dtype=int)
    feats = pipeline.predictor.predict(memory.tokens.detach(), memory.coords,
                                       memory.view_ids, coords, views)
    tokens = [CompletionToken(feature=feats[i], coord=queries[i].coord,
                              view_id=queries[i].view_id,
                              instance_id=queries[i].instance_id)
              for i in range(len(queries))]
    return queries, tokens


def distill_cosine(pipeline: Pipeline, scene: Scene, stream: Stream,
                   ratio: float = 0.5) -> float:
    """Mean cosine similarity between predictions at freshly masked coords and
    the frozen fused features there (held-out evaluation masks)."""
    tokens, coords, view_ids, layout = pipeline.fusion.tokenize(scene.observation)
    full = pipeline.fusion.encode(Tensor(tokens), coords)
    plan = plan_masks(layout, ratio, stream, block=pipeline.cfg.model.mask_block)
    vis, masked = plan.visible_indices(), plan.masked_indices()
    ctx = pipeline.fusion.encode(Tensor(tokens[vis]), coords[vis])
    z = pipeline.predictor.predict(ctx.detach(), coords[vis], view_ids[vis],
                                   coords[masked], view_ids[masked])
    y = full.data[masked]
    num = (z.data * y).sum(axis=1)
    den = np.linalg.norm(z.data, axis=1) * np.linalg.norm(y, axis=1) + 1e-12
    return float((num / den).mean())


@dataclass
class SceneMetrics:
    centroid_l1: float
    mask_iou: float
    hidden_hit_rate: float
    distill_cos: float

    def row(self) -> list:
        return [self.centroid_l1, self.mask_iou, self.hidden_hit_rate,
                self.distill_cos]


def evaluate_scene(pipeline: Pipeline, scene: Scene, seed: int = 0) -> SceneMetrics:
    stream = Stream(seed).child("eval")
    memory, _, outputs = pipeline.forward_instances(scene)
    det = outputs.detached()
    if scene.truth.num_instances:
        assignment = pipeline.match(det, scene)
        c_err = centroid_l1(det.points.data, assignment, scene.truth.centroids)
        iou = mask_iou(det.mask_logits.data, assignment, scene.truth)
    else:
        c_err, iou = float("nan"), float("nan")
    queries, _ = inference_completions(pipeline, scene, memory, det, stream)
    hid = hidden_fraction(scene, np.array([q.coord for q in queries]).reshape(-1, 3))
    cos = distill_cosine(pipeline, scene, stream.child("mask"),
                         ratio=pipeline.cfg.model.mask_ratio)
    return SceneMetrics(centroid_l1=c_err, mask_iou=iou, hidden_hit_rate=hid,
                        distill_cos=cos)
