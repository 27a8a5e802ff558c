"""Two-stage optimization at desk scale.

Stage 1 trains fusion, pyramid and probe decoding against the matched joint
objective. Stage 2 freezes those modules and trains only the predictor with
the teacher-distillation objective; the teacher is a full parameter snapshot
advanced by exponential moving average after every step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .matching import LOSS_TERMS, LossReport, joint_loss
from .model import Pipeline
from .nn.params import ParamStore
from .nn.tensor import Tensor, backward
from .predictor import (TeacherState, distill_loss, ema_update,
                        generate_completion_coords, plan_masks)
from .rng import Stream
from .scene import Scene


class DivergenceError(RuntimeError):
    pass


class Adam:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, store: ParamStore, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, clip_norm: float | None = None, lr: float | None = None) -> float:
        """One update over trainable parameters; returns the pre-clip grad norm."""
        lr = self.lr if lr is None else lr
        names = self.store.trainable_names()
        grads = {}
        sq = 0.0
        for n in names:
            p = self.store.get(n)
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads[n] = g
            sq += float((g * g).sum())
        norm = np.sqrt(sq)
        scale = 1.0
        if clip_norm is not None and norm > clip_norm:
            scale = clip_norm / norm
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for n in names:
            p = self.store.get(n)
            g = grads[n] * scale
            m = self.m.setdefault(n, np.zeros_like(p.data))
            v = self.v.setdefault(n, np.zeros_like(p.data))
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
        return float(norm)


def lr_at(step: int, cfg: RunConfig) -> float:
    t = cfg.train
    if t.warmup_steps and step < t.warmup_steps:
        return t.lr * (step + 1) / t.warmup_steps
    if t.lr_schedule == "cosine":
        span = max(t.steps - t.warmup_steps, 1)
        frac = min(max(step - t.warmup_steps, 0) / span, 1.0)
        return t.lr_floor + 0.5 * (t.lr - t.lr_floor) * (1.0 + np.cos(np.pi * frac))
    return t.lr


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    diverged: bool = False
    last_good_state: dict | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.history])


def write_loss_csv(path, history: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in history:
            writer.writerow([row["step"]] + [repr(float(row[c]))
                                             for c in columns[1:]])


def scene_loss(pipeline: Pipeline, scene: Scene) -> LossReport:
    """Forward pass, one-shot global matching and the joint objective."""
    _, _, outputs = pipeline.forward_instances(scene)
    assignment = pipeline.match(outputs, scene)
    return joint_loss(outputs, scene.truth, assignment,
                      lambdas=pipeline.cfg.train.lambdas, cost_cfg=pipeline.cost_cfg)


def evaluate_stage1_loss(pipeline: Pipeline, scenes: list[Scene]) -> float:
    return float(np.mean([scene_loss(pipeline, s).total for s in scenes]))


def train_stage1(pipeline: Pipeline, scenes: list[Scene],
                 progress=None) -> TrainResult:
    cfg = pipeline.cfg
    pipeline.set_stage(1)
    opt = Adam(pipeline.store, cfg.train.lr, weight_decay=cfg.train.weight_decay)
    result = TrainResult()
    order = Stream(cfg.seed).child("stage1/order")
    last_good = pipeline.store.state()
    for step in range(cfg.train.steps):
        pipeline.store.zero_grad()
        picks = [int(i) for i in order.integers(0, len(scenes), cfg.train.batch)]
        reports = []
        total = None
        for i in picks:
            rep = scene_loss(pipeline, scenes[i])
            reports.append(rep)
            piece = rep.total_tensor() * (1.0 / cfg.train.batch)
            total = piece if total is None else total + piece
        if not np.isfinite(total.data).all():
            result.diverged = True
            result.last_good_state = last_good
            return result
        backward(total)
        norm = opt.step(clip_norm=cfg.train.clip_norm, lr=lr_at(step, cfg))
        row = {"step": step, "grad_norm": norm,
               "total": float(np.mean([r.total for r in reports]))}
        for term in LOSS_TERMS:
            row[term] = float(np.mean([r.terms[term] for r in reports]))
        result.history.append(row)
        last_good = pipeline.store.state()
        if progress:
            progress(step, row)
    result.last_good_state = last_good
    return result


# ---- stage 2 ------------------------------------------------------------------


@dataclass
class SceneCache:
    """Per-scene constants for stage 2: the frozen fusion is deterministic, so
    raw tokens, teacher memory and completion queries are computed once."""

    tokens: np.ndarray
    coords: np.ndarray
    view_ids: np.ndarray
    layout: tuple
    teacher_tokens: np.ndarray
    completions: list


def build_teacher(pipeline: Pipeline, momentum: float) -> tuple[TeacherState, Pipeline]:
    twin = Pipeline(pipeline.cfg, seed=pipeline.cfg.seed)
    twin.store.load_state(pipeline.store.state())
    teacher = TeacherState(store=twin.store, momentum=momentum)
    return teacher, twin


def prepare_stage2_scene(pipeline: Pipeline, teacher_pipe: Pipeline, scene: Scene,
                         stream: Stream) -> SceneCache:
    tokens, coords, view_ids, layout = pipeline.fusion.tokenize(scene.observation)
    teacher_mem = teacher_pipe.fusion.fuse_tokens(Tensor(tokens), coords, view_ids,
                                                  layout)
    completions = generate_completion_coords(scene, stream)
    return SceneCache(tokens=tokens, coords=coords, view_ids=view_ids, layout=layout,
                      teacher_tokens=teacher_mem.tokens.data.copy(),
                      completions=completions)


def stage2_step_loss(pipeline: Pipeline, cache: SceneCache, mask_stream: Stream,
                     ratio: float, lambdas: dict | None = None):
    """Masked-context student forward and distillation report for one scene."""
    plan = plan_masks(cache.layout, ratio, mask_stream,
                      block=pipeline.cfg.model.mask_block)
    vis_idx = plan.visible_indices()
    mask_idx = plan.masked_indices()
    ctx = pipeline.fusion.encode(Tensor(cache.tokens[vis_idx]),
                                 cache.coords[vis_idx])
    comp_coords = np.array([q.coord for q in cache.completions]).reshape(-1, 3)
    comp_views = np.array([q.view_id for q in cache.completions], dtype=int)
    tgt_coords = np.concatenate([cache.coords[mask_idx], comp_coords], axis=0)
    tgt_views = np.concatenate([cache.view_ids[mask_idx], comp_views]).astype(int)
    z = pipeline.predictor.predict(ctx.detach(), cache.coords[vis_idx],
                                   cache.view_ids[vis_idx], tgt_coords, tgt_views)
    n_mask = len(mask_idx)
    y_tea = cache.teacher_tokens[mask_idx]
    report = distill_loss(z[:n_mask], y_tea, lambdas=lambdas)
    return report, z, plan


def train_stage2(pipeline: Pipeline, scenes: list[Scene],
                 lambdas: dict | None = None, ratio: float | None = None,
                 progress=None) -> tuple[TrainResult, TeacherState]:
    cfg = pipeline.cfg
    ratio = cfg.model.mask_ratio if ratio is None else ratio
    pipeline.set_stage(2)
    teacher, teacher_pipe = build_teacher(pipeline, cfg.train.ema_momentum)
    root = Stream(cfg.seed).child("stage2")
    caches = [prepare_stage2_scene(pipeline, teacher_pipe, s,
                                   root.child(f"scene/{i}"))
              for i, s in enumerate(scenes)]
    opt = Adam(pipeline.store, cfg.train.lr, weight_decay=cfg.train.weight_decay)
    order = root.child("order")
    result = TrainResult()
    last_good = pipeline.store.state()
    for step in range(cfg.train.steps):
        pipeline.store.zero_grad()
        picks = [int(i) for i in order.integers(0, len(scenes), cfg.train.batch)]
        total = None
        reports = []
        for i in picks:
            rep, _, _ = stage2_step_loss(pipeline, caches[i],
                                         root.child(f"mask/{step}/{i}"), ratio,
                                         lambdas=lambdas)
            reports.append(rep)
            piece = rep.total_tensor() * (1.0 / cfg.train.batch)
            total = piece if total is None else total + piece
        if not np.isfinite(total.data).all():
            result.diverged = True
            result.last_good_state = last_good
            return result, teacher
        backward(total)
        norm = opt.step(clip_norm=cfg.train.clip_norm, lr=lr_at(step, cfg))
        ema_update(teacher, pipeline.store)
        row = {"step": step, "grad_norm": norm,
               "total": float(np.mean([r.total for r in reports]))}
        for term in ("recon", "cos", "var"):
            row[term] = float(np.mean([r.terms[term] for r in reports]))
        result.history.append(row)
        last_good = pipeline.store.state()
        if progress:
            progress(step, row)
    result.last_good_state = last_good
    return result, teacher
