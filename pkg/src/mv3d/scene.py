"""Synthetic multi-view scene generation with analytic ground truth.

Scenes are collections of primitive solids (sphere, box, cylinder) above a
large ground slab, observed by pinhole cameras on a ring. Depth is exact
ray-cast geometry at feature-cell centers; "semantic" feature channels are
analytic descriptors (surface normal, depth, instance/class one-hots), so
every downstream quantity has a closed-form oracle. Masks, boxes, visibility
flags, per-view centroids and dense surface samples are produced alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .camera import CameraView, DepthMap, unproject
from .rng import Stream

SCENE_FORMAT_VERSION = 1
MIN_MASK_PIXELS = 8          # visibility threshold at mask resolution
CLASS_NAMES = ("ground", "sphere", "box", "cylinder")
WORKSPACE = np.array([[-0.5, 0.5], [-0.5, 0.5], [0.0, 1.0]])


@dataclass
class PrimitiveObject:
    kind: str                 # sphere | box | cylinder
    rotation: np.ndarray      # 3x3, object-to-world
    center: np.ndarray        # (3,) meters
    size: np.ndarray          # (3,) full extents, meters
    instance_id: int
    class_id: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if (self.size <= 0).any():
            raise ValueError("object size components must be positive")

    @property
    def bound_radius(self) -> float:
        return float(np.linalg.norm(self.size) / 2.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rotation": self.rotation.tolist(),
                "center": self.center.tolist(), "size": self.size.tolist(),
                "instance_id": self.instance_id, "class_id": self.class_id}

    @staticmethod
    def from_dict(d: dict) -> "PrimitiveObject":
        return PrimitiveObject(d["kind"], np.array(d["rotation"]), np.array(d["center"]),
                               np.array(d["size"]), int(d["instance_id"]), int(d["class_id"]))


@dataclass
class SceneSpec:
    num_objects: int = 2
    num_views: int = 2
    feat_hw: int = 64
    c_channels: int = 16
    mask_stride: int = 4      # mask maps live at feat_hw / mask_stride
    dense_points: int = 512
    focal_scale: float = 1.3  # focal length as a multiple of image width
    camera_arc: float = 0.26  # radians of azimuth the camera rig spans; a
    #                           clustered rig keeps per-view surface centroids
    #                           consistent and leaves real hidden regions

    def validate(self) -> None:
        if not 0 <= self.num_objects <= 6:
            raise ValueError(f"num_objects={self.num_objects} outside [0, 6]")
        if self.num_views not in (2, 3, 4):
            raise ValueError(f"num_views={self.num_views} not in {{2, 3, 4}}")
        if self.feat_hw % self.mask_stride:
            raise ValueError("mask stride must divide feature resolution")
        if self.c_channels < 15:
            raise ValueError("need at least 15 feature channels for the descriptors")


@dataclass
class SceneTruth:
    instance_ids: np.ndarray   # (K,)
    class_ids: np.ndarray      # (K,)
    boxes: np.ndarray          # (V, K, 4) normalized x1,y1,x2,y2 at mask scale
    masks: np.ndarray          # (V, K, hm, wm) bool
    vis: np.ndarray            # (V, K) bool
    centroids: np.ndarray      # (K, 3) mean of visible surface points (all views)
    view_centroids: np.ndarray  # (V, K, 3), NaN where the view sees nothing
    dense_points: np.ndarray   # (K, n, 3) analytic surface samples
    p_ee: np.ndarray           # (3,)

    @property
    def num_instances(self) -> int:
        return len(self.instance_ids)

    def pseudo_centroids(self) -> np.ndarray:
        """Per-instance centroid averaged over the valid views."""
        out = np.zeros((self.num_instances, 3))
        for k in range(self.num_instances):
            views = np.where(self.vis[:, k])[0]
            if len(views):
                out[k] = self.view_centroids[views, k].mean(axis=0)
            else:
                out[k] = self.centroids[k]
        return out


@dataclass
class MultiViewObservation:
    features: np.ndarray           # (V, C, H, W)
    depths: list[DepthMap]
    cameras: list[CameraView]

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise ValueError("observations need at least two views")


@dataclass
class Scene:
    spec: SceneSpec
    objects: list[PrimitiveObject]
    observation: MultiViewObservation
    truth: SceneTruth
    seed: int = 0

    def primitives(self) -> list[PrimitiveObject]:
        """Task objects plus the ground slab, for ray queries."""
        return [_ground_slab()] + self.objects


def _ground_slab() -> PrimitiveObject:
    return PrimitiveObject("box", np.eye(3), np.array([0.0, 0.0, -0.02]),
                           np.array([4.0, 4.0, 0.04]), instance_id=-1, class_id=0)


# ---- ray casting -------------------------------------------------------------


def _ray_sphere(o, d, radius):
    b = 2.0 * (o * d).sum(axis=1)
    a = (d * d).sum(axis=1)
    c = (o * o).sum(axis=1) - radius * radius
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 1e-9, t0, t1)
    t = np.where(hit & (t > 1e-9), t, np.inf)
    return t


def _ray_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (-half - o) * inv
        t_hi = (half - o) * inv
    near = np.minimum(t_lo, t_hi)
    far = np.maximum(t_lo, t_hi)
    parallel_out = (np.abs(d) < 1e-12) & (np.abs(o) > half)
    near = np.where(np.abs(d) < 1e-12, -np.inf, near)
    far = np.where(np.abs(d) < 1e-12, np.inf, far)
    tn = near.max(axis=1)
    tf = far.min(axis=1)
    ok = (tf >= np.maximum(tn, 1e-9)) & ~parallel_out.any(axis=1)
    t = np.where(tn > 1e-9, tn, tf)
    entry_axis = near.argmax(axis=1)
    return np.where(ok & (t > 1e-9), t, np.inf), entry_axis


def _ray_cylinder(o, d, radius, half_h):
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius * radius
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-16)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    best = np.full(len(o), np.inf)
    surf = np.zeros(len(o), dtype=np.int8)  # 0 side, 1 top cap, 2 bottom cap
    with np.errstate(divide="ignore", invalid="ignore"):
        for root in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = o[:, 2] + root * d[:, 2]
            good = ok & (root > 1e-9) & (np.abs(z) <= half_h) & (root < best)
            best = np.where(good, root, best)
        for sign, tag in ((1.0, 1), (-1.0, 2)):
            tc = (sign * half_h - o[:, 2]) / d[:, 2]
            x = o[:, 0] + tc * d[:, 0]
            y = o[:, 1] + tc * d[:, 1]
            good = (np.abs(d[:, 2]) > 1e-12) & (tc > 1e-9) & \
                   (x * x + y * y <= radius * radius) & (tc < best)
            best = np.where(good, tc, best)
            surf = np.where(good, tag, surf)
    return best, surf


def raycast(primitives: list[PrimitiveObject], origins: np.ndarray, dirs: np.ndarray):
    """First-hit query. Returns (t, primitive index or -1, world normal)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -1, dtype=np.int64)
    normals = np.zeros((n, 3))

    for idx, prim in enumerate(primitives):
        o = (origins - prim.center) @ prim.rotation
        d = dirs @ prim.rotation
        if prim.kind == "sphere":
            t = _ray_sphere(o, d, prim.size[0] / 2.0)
            closer = t < best_t
            if closer.any():
                local = o[closer] + t[closer, None] * d[closer]
                n_loc = local / np.linalg.norm(local, axis=1, keepdims=True)
                normals[closer] = n_loc @ prim.rotation.T
        elif prim.kind == "box":
            t, axis = _ray_box(o, d, prim.size / 2.0)
            closer = t < best_t
            if closer.any():
                n_loc = np.zeros((int(closer.sum()), 3))
                ax = axis[closer]
                local = o[closer] + t[closer, None] * d[closer]
                n_loc[np.arange(len(n_loc)), ax] = np.sign(local[np.arange(len(n_loc)), ax])
                normals[closer] = n_loc @ prim.rotation.T
        elif prim.kind == "cylinder":
            t, surf = _ray_cylinder(o, d, prim.size[0] / 2.0, prim.size[2] / 2.0)
            closer = t < best_t
            if closer.any():
                local = o[closer] + t[closer, None] * d[closer]
                n_loc = np.zeros_like(local)
                side = surf[closer] == 0
                n_loc[side, :2] = local[side, :2]
                n_loc[~side, 2] = np.where(surf[closer][~side] == 1, 1.0, -1.0)
                norms = np.linalg.norm(n_loc, axis=1, keepdims=True)
                n_loc = n_loc / np.where(norms > 0, norms, 1.0)
                normals[closer] = n_loc @ prim.rotation.T
        else:
            raise ValueError(f"unknown primitive kind '{prim.kind}'")
        best_idx = np.where(t < best_t, idx, best_idx)
        best_t = np.minimum(best_t, t)

    return best_t, best_idx, normals


def rays_for_pixels(cam: CameraView, pix_xy: np.ndarray):
    """World-space rays through pixel coords; the direction has unit camera z,
    so the ray parameter equals camera depth."""
    pix = np.asarray(pix_xy, dtype=np.float64).reshape(-1, 2)
    ones = np.ones((len(pix), 1))
    d_cam = np.concatenate([pix, ones], axis=1) @ np.linalg.inv(cam.k).T
    d_world = d_cam @ cam.r
    origin = np.broadcast_to(cam.center, d_world.shape)
    return origin, d_world


def depth_at(primitives, cam: CameraView, pix_xy: np.ndarray):
    """Exact first-hit camera depth at arbitrary (possibly fractional) pixels."""
    o, d = rays_for_pixels(cam, pix_xy)
    t, idx, _ = raycast(primitives, o, d)
    return t, idx


# ---- dense surface sampling ---------------------------------------------------


def dense_surface(obj: PrimitiveObject, n: int, stream: Stream) -> np.ndarray:
    """Uniform-area samples on the primitive surface, in world coordinates."""
    if n < 1:
        raise ValueError("need at least one sample")
    if obj.kind == "sphere":
        r = obj.size[0] / 2.0
        v = stream.normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        local = r * v
    elif obj.kind == "box":
        hx, hy, hz = obj.size / 2.0
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4
        face = np.searchsorted(np.cumsum(areas / areas.sum()), stream.uniform(n))
        u = stream.uniform((n, 2), -1.0, 1.0)
        local = np.zeros((n, 3))
        for f in range(6):
            sel = face == f
            axis, sign = divmod(f, 2)
            half = obj.size / 2.0
            others = [i for i in range(3) if i != axis]
            local[sel, axis] = half[axis] * (1.0 if sign == 0 else -1.0)
            local[sel, others[0]] = u[sel, 0] * half[others[0]]
            local[sel, others[1]] = u[sel, 1] * half[others[1]]
    elif obj.kind == "cylinder":
        r, h = obj.size[0] / 2.0, obj.size[2]
        side_area = 2 * np.pi * r * h
        cap_area = np.pi * r * r
        total = side_area + 2 * cap_area
        pick = stream.uniform(n)
        theta = stream.uniform(n, 0.0, 2 * np.pi)
        z = stream.uniform(n, -h / 2.0, h / 2.0)
        rad = r * np.sqrt(stream.uniform(n))
        local = np.zeros((n, 3))
        on_side = pick < side_area / total
        on_top = (pick >= side_area / total) & (pick < (side_area + cap_area) / total)
        local[on_side] = np.stack([r * np.cos(theta[on_side]), r * np.sin(theta[on_side]),
                                   z[on_side]], axis=1)
        for capsel, sign in ((on_top, 1.0), (~on_side & ~on_top, -1.0)):
            local[capsel] = np.stack([rad[capsel] * np.cos(theta[capsel]),
                                      rad[capsel] * np.sin(theta[capsel]),
                                      np.full(int(capsel.sum()), sign * h / 2.0)], axis=1)
    else:
        raise ValueError(f"unknown primitive kind '{obj.kind}'")
    return local @ obj.rotation.T + obj.center


# ---- rendering ---------------------------------------------------------------


def _render_buffers(primitives, cam: CameraView, res_h: int, res_w: int, stride: float):
    """Ray-cast instance index / depth / normal buffers at cell centers."""
    ys = np.arange(res_h) * stride + (stride - 1) / 2.0
    xs = np.arange(res_w) * stride + (stride - 1) / 2.0
    gx, gy = np.meshgrid(xs, ys)
    pix = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)
    o, d = rays_for_pixels(cam, pix)
    t, idx, normal = raycast(primitives, o, d)
    shape = (res_h, res_w)
    return (t.reshape(shape), idx.reshape(shape), normal.reshape(res_h, res_w, 3),
            gx, gy)


def render_scene(objects: list[PrimitiveObject], cameras: list[CameraView],
                 spec: SceneSpec, stream: Stream) -> tuple[MultiViewObservation, SceneTruth]:
    """Render observation tensors and exact ground truth for fixed geometry."""
    prims = [_ground_slab()] + list(objects)
    v_count = len(cameras)
    k_count = len(objects)
    hw = spec.feat_hw
    mask_hw = hw // spec.mask_stride

    feats = np.zeros((v_count, spec.c_channels, hw, hw))
    depths: list[DepthMap] = []
    masks = np.zeros((v_count, k_count, mask_hw, mask_hw), dtype=bool)
    boxes = np.zeros((v_count, k_count, 4))
    vis = np.zeros((v_count, k_count), dtype=bool)
    view_centroids = np.full((v_count, k_count, 3), np.nan)
    point_bags: list[list[np.ndarray]] = [[] for _ in range(k_count)]

    for v, cam in enumerate(cameras):
        t, idx, normal, gx, gy = _render_buffers(prims, cam, hw, hw, 1.0)
        valid = np.isfinite(t)
        depth = np.where(valid, t, 0.0)
        depths.append(DepthMap(np.where(valid, depth, 1.0), valid))

        ch = feats[v]
        ch[0:3] = normal.transpose(2, 0, 1)
        ch[3] = np.where(valid, depth * 0.5, 0.0)
        for k in range(k_count):
            ch[4 + k] = (idx == k + 1)
        for cls in range(4):
            sel = np.zeros((hw, hw), dtype=bool)
            for pi, prim in enumerate(prims):
                if prim.class_id == cls:
                    sel |= idx == pi
            ch[10 + cls] = sel
        ch[14] = valid.astype(np.float64)

        # per-view centroids from unprojected full-res instance pixels
        for k in range(k_count):
            sel = idx == k + 1
            if sel.any():
                pix = np.stack([gx[sel], gy[sel]], axis=-1)
                pts = unproject(pix, t[sel], cam)
                view_centroids[v, k] = pts.mean(axis=0)
                point_bags[k].append(pts)

        # masks, boxes and visibility at mask resolution
        _, m_idx, _, _, _ = _render_buffers(prims, cam, mask_hw, mask_hw,
                                            float(spec.mask_stride))
        for k in range(k_count):
            m = m_idx == k + 1
            masks[v, k] = m
            count = int(m.sum())
            vis[v, k] = count >= MIN_MASK_PIXELS
            if count:
                rows, cols = np.where(m)
                boxes[v, k] = [cols.min() / (mask_hw - 1), rows.min() / (mask_hw - 1),
                               cols.max() / (mask_hw - 1), rows.max() / (mask_hw - 1)]

    centroids = np.zeros((k_count, 3))
    for k in range(k_count):
        if point_bags[k]:
            centroids[k] = np.concatenate(point_bags[k]).mean(axis=0)
        else:
            centroids[k] = objects[k].center

    dense = np.zeros((k_count, spec.dense_points, 3))
    for k, obj in enumerate(objects):
        dense[k] = dense_surface(obj, spec.dense_points, stream.child(f"dense/{k}"))

    ee_stream = stream.child("ee")
    p_ee = np.array([ee_stream.uniform((), -0.3, 0.3), ee_stream.uniform((), -0.3, 0.3),
                     ee_stream.uniform((), 0.75, 0.95)])

    truth = SceneTruth(
        instance_ids=np.array([o.instance_id for o in objects], dtype=np.int64),
        class_ids=np.array([o.class_id for o in objects], dtype=np.int64),
        boxes=boxes, masks=masks, vis=vis, centroids=centroids,
        view_centroids=view_centroids, dense_points=dense, p_ee=p_ee,
    )
    obs = MultiViewObservation(features=feats, depths=depths, cameras=cameras)
    return obs, truth


# ---- sampling-based generation -------------------------------------------------


def _random_rotation(stream: Stream) -> np.ndarray:
    q = stream.normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=0)


def ring_cameras(stream: Stream, spec: SceneSpec,
                 azimuths: np.ndarray | None = None) -> list[CameraView]:
    """Cameras on an arc of a ring, looking at the workspace center.

    The rig direction is randomized per scene but the views stay within
    ``camera_arc`` radians of azimuth and a narrow elevation band.
    """
    hw = spec.feat_hw
    target = np.array([0.0, 0.0, 0.18])
    base_az = stream.child("rig").uniform((), 0.0, 2 * np.pi)
    cams = []
    for v in range(spec.num_views):
        s = stream.child(f"cam/{v}")
        if azimuths is None:
            frac = v / max(spec.num_views - 1, 1) - 0.5
            az = base_az + spec.camera_arc * frac + s.uniform((), -0.02, 0.02)
        else:
            az = float(azimuths[v])
        el = s.uniform((), 0.62, 0.70)
        radius = s.uniform((), 0.85, 1.0)
        center = target + radius * np.array([np.cos(az) * np.cos(el),
                                             np.sin(az) * np.cos(el),
                                             np.sin(el)])
        r = _look_at(center, target)
        t = -r @ center
        f = spec.focal_scale * hw
        k = np.array([[f, 0.0, (hw - 1) / 2.0], [0.0, f, (hw - 1) / 2.0], [0.0, 0.0, 1.0]])
        cams.append(CameraView(k, r, t, hw, hw, view_id=v))
    return cams


class PlacementError(RuntimeError):
    pass


def sample_objects(stream: Stream, num_objects: int) -> list[PrimitiveObject]:
    objects: list[PrimitiveObject] = []
    for k in range(num_objects):
        placed = False
        s = stream.child(f"obj/{k}")
        for _ in range(200):
            kind = ("sphere", "box", "cylinder")[s.integers(0, 3)]
            if kind == "sphere":
                d = s.uniform((), 0.14, 0.20)
                size = np.array([d, d, d])
                rot = np.eye(3)
            elif kind == "box":
                size = s.uniform(3, 0.12, 0.22)
                rot = _random_rotation(s)
            else:
                d = s.uniform((), 0.12, 0.18)
                size = np.array([d, d, s.uniform((), 0.14, 0.22)])
                rot = _random_rotation(s)
            center = np.array([s.uniform((), -0.22, 0.22), s.uniform((), -0.22, 0.22),
                               s.uniform((), 0.10, 0.32)])
            cand = PrimitiveObject(kind, rot, center, size, instance_id=k,
                                   class_id=CLASS_NAMES.index(kind))
            clear = all(np.linalg.norm(cand.center - o.center) >
                        cand.bound_radius + o.bound_radius + 0.01 for o in objects)
            if clear:
                objects.append(cand)
                placed = True
                break
        if not placed:
            raise PlacementError(f"could not place object {k} without overlap")
    return objects


def generate_scene(seed: int, spec: SceneSpec) -> Scene:
    """Deterministic scene synthesis: same seed and spec give identical bits."""
    spec.validate()
    stream = Stream(seed)
    objects = sample_objects(stream.child("objects"), spec.num_objects)
    cameras = ring_cameras(stream.child("cameras"), spec)
    obs, truth = render_scene(objects, cameras, spec, stream.child("render"))
    return Scene(spec=spec, objects=objects, observation=obs, truth=truth, seed=seed)


# ---- serialization -------------------------------------------------------------


def save_scene(scene: Scene, path) -> None:
    """Text container plus binary tensor sidecar (``<path>.bin``)."""
    path = Path(path)
    doc = {
        "format": "mv3d-scene",
        "version": SCENE_FORMAT_VERSION,
        "seed": scene.seed,
        "spec": {
            "num_objects": scene.spec.num_objects, "num_views": scene.spec.num_views,
            "feat_hw": scene.spec.feat_hw, "c_channels": scene.spec.c_channels,
            "mask_stride": scene.spec.mask_stride, "dense_points": scene.spec.dense_points,
            "focal_scale": scene.spec.focal_scale,
        },
        "cameras": [c.to_dict() for c in scene.observation.cameras],
        "objects": [o.to_dict() for o in scene.objects],
        "truth": {
            "instance_ids": scene.truth.instance_ids.tolist(),
            "class_ids": scene.truth.class_ids.tolist(),
            "boxes": scene.truth.boxes.tolist(),
            "vis": scene.truth.vis.tolist(),
            "centroids": scene.truth.centroids.tolist(),
            "view_centroids": np.nan_to_num(scene.truth.view_centroids,
                                            nan=1e30).tolist(),
            "p_ee": scene.truth.p_ee.tolist(),
        },
    }
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    tensors = {
        "features": scene.observation.features,
        "depth": np.stack([d.depth for d in scene.observation.depths]),
        "depth_valid": np.stack([d.valid.astype(np.float64)
                                 for d in scene.observation.depths]),
        "masks": scene.truth.masks.astype(np.float64),
        "dense_points": scene.truth.dense_points,
    }
    fileio.write_tensors(path.with_suffix(path.suffix + ".bin"), tensors)


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise fileio.FileFormatError(f"{path}: malformed scene file at char {e.pos}") from e
    if doc.get("format") != "mv3d-scene":
        raise fileio.FileFormatError(f"{path}: not a scene file")
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise fileio.UnsupportedVersionError(
            f"{path}: unsupported scene version {doc.get('version')}")
    spec = SceneSpec(**doc["spec"])
    cameras = [CameraView.from_dict(d) for d in doc["cameras"]]
    objects = [PrimitiveObject.from_dict(d) for d in doc["objects"]]
    tensors = fileio.read_tensors(path.with_suffix(path.suffix + ".bin"))
    depths = [DepthMap(d, v > 0.5) for d, v in zip(tensors["depth"], tensors["depth_valid"])]
    obs = MultiViewObservation(features=tensors["features"], depths=depths, cameras=cameras)
    tr = doc["truth"]
    view_centroids = np.array(tr["view_centroids"], dtype=np.float64).reshape(
        len(cameras), len(objects), 3)
    view_centroids[view_centroids >= 1e29] = np.nan
    truth = SceneTruth(
        instance_ids=np.array(tr["instance_ids"], dtype=np.int64),
        class_ids=np.array(tr["class_ids"], dtype=np.int64),
        boxes=np.array(tr["boxes"], dtype=np.float64).reshape(len(cameras), len(objects), 4),
        masks=tensors["masks"] > 0.5,
        vis=np.array(tr["vis"], dtype=bool).reshape(len(cameras), len(objects)),
        centroids=np.array(tr["centroids"], dtype=np.float64).reshape(len(objects), 3),
        view_centroids=view_centroids,
        dense_points=tensors["dense_points"],
        p_ee=np.array(tr["p_ee"], dtype=np.float64),
    )
    return Scene(spec=spec, objects=objects, observation=obs, truth=truth,
                 seed=int(doc["seed"]))
