"""Runtime invariant battery: gradient soundness, geometry identities,
matching optimality, bounded refinement, gate initialization, masking ratios
and determinism. Used by the CLI check command; the test suite exercises the
same functions at acceptance tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraView, project, unproject
from .config import RunConfig
from .fusion import Rope3DConfig, rope3d, rope_phases
from .matching import brute_force_min_cost, focal_loss, giou_loss, hungarian, \
    mask_losses
from .model import Pipeline
from .nn.gradcheck import grad_check
from .nn.tensor import Tensor, softmax
from .predictor import distill_loss, plan_masks
from .rng import Stream
from .scene import SceneSpec, generate_scene


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: measured {self.value:.3e} vs tolerance {self.tol:.3e}"


def _result(name, value, tol, larger_ok=False) -> CheckResult:
    ok = value >= tol if larger_ok else value <= tol
    return CheckResult(name, float(value), float(tol), bool(ok))


def random_camera(stream: Stream, hw: int = 64) -> CameraView:
    az = stream.uniform((), 0, 2 * np.pi)
    el = stream.uniform((), 0.4, 1.0)
    radius = stream.uniform((), 0.8, 1.2)
    center = np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el),
                       np.sin(el)]) * radius + np.array([0, 0, 0.2])
    target = np.array([0.0, 0.0, 0.2])
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    x /= np.linalg.norm(x)
    r = np.stack([x, np.cross(z, x), z])
    f = 1.3 * hw
    k = np.array([[f, 0, (hw - 1) / 2], [0, f, (hw - 1) / 2], [0, 0, 1.0]])
    return CameraView(k, r, -r @ center, hw, hw, view_id=0)


# ---- individual checks -----------------------------------------------------------


def check_loss_gradients(seeds: int = 50, tol: float = 1e-4) -> list[CheckResult]:
    """Finite-difference checks of every loss term on random small instances."""
    worst_joint, worst_distill = 0.0, 0.0
    for seed in range(seeds):
        s = Stream(1000 + seed)
        logits = Tensor(s.normal(4), requires_grad=True)
        labels = (s.uniform(4) < 0.5).astype(float)
        rep = grad_check(lambda: focal_loss(logits, labels), {"logits": logits})
        worst_joint = max(worst_joint, rep.max_rel_error)

        a = Tensor(np.sort(s.uniform((2, 4)), axis=-1), requires_grad=True)
        b = np.sort(s.uniform((2, 4)), axis=-1)
        rep = grad_check(lambda: giou_loss(a, Tensor(b)), {"boxes": a})
        worst_joint = max(worst_joint, rep.max_rel_error)

        ml = Tensor(s.normal((4, 4)), requires_grad=True)
        tgt = (s.uniform((4, 4)) < 0.5).astype(float)
        rep = grad_check(lambda: mask_losses(ml, tgt)[0] + mask_losses(ml, tgt)[1],
                         {"mask_logits": ml})
        worst_joint = max(worst_joint, rep.max_rel_error)

        p = Tensor(s.normal((3, 5)), requires_grad=True)
        y = s.normal((3, 5))
        rep = grad_check(lambda: distill_loss(p, y).total_tensor(), {"pred": p})
        worst_distill = max(worst_distill, rep.max_rel_error)
    return [_result("joint loss terms grad (focal/giou/mask/dice)", worst_joint, tol),
            _result("distillation loss grad (recon/cos/var)", worst_distill, tol)]


def check_softmax_rows(trials: int = 100, tol: float = 1e-12) -> CheckResult:
    worst = 0.0
    for seed in range(trials):
        x = Tensor(Stream(seed).normal((5, 7)) * 3)
        rows = softmax(x, axis=-1).data.sum(axis=-1)
        worst = max(worst, float(np.abs(rows - 1.0).max()))
    return _result("softmax rows sum to one", worst, tol)


def check_projection_roundtrip(trials: int = 1000, tol: float = 1e-9) -> CheckResult:
    s = Stream(7)
    cam = random_camera(s.child("cam"))
    pts = np.stack([s.uniform(trials, -0.4, 0.4), s.uniform(trials, -0.4, 0.4),
                    s.uniform(trials, 0.0, 0.5)], axis=-1)
    cam_pts = pts @ cam.r.T + cam.t
    pts = pts[cam_pts[:, 2] > 0.1]
    uv, z = project(pts, cam)
    inside = (uv > 1e-3).all(axis=1) & (uv < 1 - 1e-3).all(axis=1)
    pts, uv, z = pts[inside], uv[inside], z[inside]
    pix = np.stack([uv[:, 0] * (cam.width - 1), uv[:, 1] * (cam.height - 1)], axis=-1)
    back = unproject(pix, z, cam)
    worst = float(np.abs(back - pts).max())
    return _result("project-unproject round trip", worst, tol)


def check_rigid_equivariance(trials: int = 50, tol: float = 1e-9) -> CheckResult:
    """Moving scene and cameras by one rigid motion keeps projections fixed."""
    worst = 0.0
    for seed in range(trials):
        s = Stream(40 + seed)
        cam = random_camera(s.child("cam"))
        pts = np.stack([s.uniform(8, -0.3, 0.3), s.uniform(8, -0.3, 0.3),
                        s.uniform(8, 0.0, 0.4)], axis=-1)
        q = s.normal(4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
        shift = s.uniform(3, -0.5, 0.5)
        moved = CameraView(cam.k, cam.r @ rot.T, cam.t - cam.r @ rot.T @ shift,
                           cam.width, cam.height, cam.view_id)
        uv0, z0 = project(pts, cam)
        uv1, z1 = project(pts @ rot.T + shift, moved)
        worst = max(worst, float(np.abs(uv0 - uv1).max()),
                    float(np.abs(z0 - z1).max()))
    return _result("rigid-transform projection equivariance", worst, tol)


def check_rope_shift_invariance(trials: int = 1000, tol: float = 1e-9) -> CheckResult:
    cfg = Rope3DConfig(head_dim=24)
    worst = 0.0
    for seed in range(trials):
        s = Stream(2000 + seed)
        q = Tensor(s.normal((1, 24)))
        k = Tensor(s.normal((1, 24)))
        p1 = s.uniform((1, 3), -0.5, 0.5)
        p2 = s.uniform((1, 3), -0.5, 0.5)
        d = s.uniform((1, 3), -0.5, 0.5)
        dot0 = float((rope3d(q, p1, cfg).data * rope3d(k, p2, cfg).data).sum())
        dot1 = float((rope3d(q, p1 + d, cfg).data * rope3d(k, p2 + d, cfg).data).sum())
        worst = max(worst, abs(dot0 - dot1))
    return _result("rotary relative-shift logit invariance", worst, tol)


def check_hungarian_bruteforce(trials: int = 200, max_n: int = 7,
                               tol: float = 1e-9) -> CheckResult:
    worst = 0.0
    for seed in range(trials):
        s = Stream(3000 + seed)
        m = int(s.integers(1, max_n + 1))
        n = int(s.integers(m, max_n + 1))
        cost = s.uniform((n, m), 0.0, 10.0)
        asn = hungarian(cost)
        total = float(cost[asn.probe_idx, asn.target_idx].sum())
        worst = max(worst, abs(total - brute_force_min_cost(cost)))
    return _result("assignment total equals brute-force minimum", worst, tol)


def check_displacement_bound(trials: int = 10000, alpha: float = 0.1) -> list[CheckResult]:
    from .instance import InstanceConfig, InstanceDecoder
    from .nn.params import ParamStore

    store = ParamStore(5)
    cfg = InstanceConfig(channels=16, num_probes=1, alpha=alpha)
    dec = InstanceDecoder(store, cfg)
    s = Stream(11)
    c = Tensor(s.normal((trials, 16), std=3.0))
    p = Tensor(np.zeros((trials, 3)))
    moved = dec.refine_coordinate(c, p)
    worst = float(np.abs(moved.data).max())
    return [CheckResult("per-layer displacement strictly below alpha",
                        worst, alpha, worst < alpha),
            _result("cumulative displacement below layers*alpha",
                    cfg.layers * worst, cfg.layers * alpha)]


def check_gate_at_init() -> list[CheckResult]:
    from .aggregation import GeometryAggregator, InstanceToken
    from .nn.params import ParamStore

    store = ParamStore(9)
    agg = GeometryAggregator(store, channels=16)
    s = Stream(13)
    gates, ratio = [], []
    for seed in range(50):
        c = Tensor(s.normal(16))
        h = Tensor(s.normal(16))
        inst = InstanceToken(semantic=c, point=np.zeros(3),
                             logit=float(s.normal()), probe_index=0)
        routed = agg.route(inst, h)
        ln_h = agg.ln_ctx(h.reshape(1, -1)).data.reshape(-1)
        g = (routed.data - c.data) / np.where(np.abs(ln_h) > 1e-12, ln_h, 1.0)
        gates.append(np.abs(g).mean())
        ratio.append(np.abs(routed.data - c.data).max()
                     / max(np.abs(ln_h).max(), 1e-12))
    mean_gate = float(np.mean(gates))
    results = [
        CheckResult("routing gate mean at init within [0.045, 0.050]",
                    mean_gate, 0.050, bool(0.045 <= mean_gate <= 0.050)),
        _result("routed update bounded by 0.05 * |LN(h)|", float(np.max(ratio)), 0.05),
    ]
    return results


def check_mask_ratio(tol: float = 0.02) -> CheckResult:
    worst = 0.0
    for seed in range(20):
        plan = plan_masks((2, 16, 16), 0.5, Stream(seed))
        worst = max(worst, float(np.abs(plan.per_view_ratio - 0.5).max()))
    return _result("per-view mask ratio within 2% of target", worst, tol)


def check_scene_determinism() -> CheckResult:
    spec = SceneSpec(num_objects=2, num_views=2, feat_hw=32)
    a = generate_scene(3, spec)
    b = generate_scene(3, spec)
    same = (np.array_equal(a.observation.features, b.observation.features)
            and np.array_equal(a.truth.centroids, b.truth.centroids))
    return CheckResult("scene generation deterministic per seed",
                       0.0 if same else 1.0, 0.0, same)


def run_all_checks(cfg: RunConfig | None = None, quick: bool = False) -> list[CheckResult]:
    if cfg is not None:
        cfg.validate()
    seeds = 10 if quick else 50
    trials = 200 if quick else 1000
    results: list[CheckResult] = []
    results += check_loss_gradients(seeds=seeds)
    results.append(check_softmax_rows())
    results.append(check_projection_roundtrip(trials=trials))
    results.append(check_rigid_equivariance(trials=20 if quick else 50))
    results.append(check_rope_shift_invariance(trials=trials))
    results.append(check_hungarian_bruteforce(trials=50 if quick else 200))
    results += check_displacement_bound(trials=2000 if quick else 10000)
    results += check_gate_at_init()
    results.append(check_mask_ratio())
    results.append(check_scene_determinism())
    return results
