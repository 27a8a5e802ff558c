"""Downstream token assembly: gripper-relative encoding and gated 3D routing.

Confident instance probes become instance tokens; completion features become
completion tokens. Each instance retrieves its nearest completion points,
aggregates them with distance-biased attention, and injects the result
through a per-channel gate whose init (zero weights, bias -3) keeps the
instance feature essentially untouched at the start of training. Every token
finally receives a sinusoidal embedding of its offset from the end effector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .instance import ProbeOutputs
from .nn.layers import MLP, LayerNorm, Linear, sinusoid_features
from .nn.params import ParamStore
from .nn.tensor import Tensor, as_tensor, concat, softmax, stack

GATE_BIAS_INIT = -3.0
DEFAULT_CONF_THRESHOLD = 0.3
MAX_INSTANCE_TOKENS = 16
DEFAULT_NEIGHBORS = 5
EE_FREQS = 4


@dataclass
class InstanceToken:
    semantic: Tensor       # (C,)
    point: np.ndarray      # (3,)
    logit: float
    probe_index: int

    @property
    def confidence(self) -> float:
        return 1.0 / (1.0 + np.exp(-self.logit))

    @property
    def uncertainty(self) -> float:
        return 1.0 - self.confidence


@dataclass
class CompletionToken:
    feature: Tensor        # (C,)
    coord: np.ndarray      # (3,)
    view_id: int
    instance_id: int


@dataclass
class DownstreamTokenSet:
    tokens: Tensor                 # (T, C); instance tokens first
    provenance: list[tuple]        # (kind, instance/probe id) per token
    points: np.ndarray             # (T, 3)

    def __len__(self) -> int:
        return self.tokens.shape[0] if self.tokens.ndim == 2 else 0


def select_instances(outputs: ProbeOutputs, threshold: float = DEFAULT_CONF_THRESHOLD,
                     cap: int = MAX_INSTANCE_TOKENS) -> list[InstanceToken]:
    """Probes above the confidence threshold, best-first, at most ``cap``.

    Ties on confidence keep the lower probe index.
    """
    logits = outputs.class_logits.data
    conf = 1.0 / (1.0 + np.exp(-logits))
    eligible = np.where(conf >= threshold)[0]
    order = eligible[np.argsort(-conf[eligible], kind="stable")][:cap]
    return [InstanceToken(semantic=outputs.semantics[int(i)],
                          point=outputs.points.data[int(i)].copy(),
                          logit=float(logits[i]), probe_index=int(i))
            for i in order]


class GeometryAggregator:
    def __init__(self, store: ParamStore, channels: int, name: str = "agg",
                 neighbors: int = DEFAULT_NEIGHBORS, route_tau: float = 1.0,
                 ee_freqs: int = EE_FREQS):
        c = channels
        self.channels = c
        self.neighbors = neighbors
        self.route_tau = route_tau
        self.ee_freqs = ee_freqs
        self.wq = Linear(store, f"{name}.q", c, c, bias=False)
        self.wk = Linear(store, f"{name}.k", c, c, bias=False)
        self.wv = Linear(store, f"{name}.v", c, c, bias=False)
        self.w_out = Linear(store, f"{name}.out", c, c, bias=False)
        self.bias_mlp = MLP(store, f"{name}.bias", [3, c, 1])
        self.gate_mlp = MLP(store, f"{name}.gate", [2 * c + 1, c, c],
                            final_w_init="zeros", final_b_init=("const", GATE_BIAS_INIT))
        self.ln_ctx = LayerNorm(store, f"{name}.ln_ctx", c)
        self.ee_mlp = MLP(store, f"{name}.ee", [3 * (1 + 2 * ee_freqs), c, c])

    # ---- operations -----------------------------------------------------

    def ee_encode(self, p_obj, p_ee: np.ndarray) -> Tensor:
        """Sinusoidal expansion of the end-effector offset, projected to C dims."""
        delta = as_tensor(p_obj).reshape(-1, 3) - Tensor(np.asarray(p_ee).reshape(1, 3))
        raw = concat([delta, sinusoid_features(delta, self.ee_freqs)], axis=-1)
        return self.ee_mlp(raw)

    def local_context(self, inst: InstanceToken,
                      completions: list[CompletionToken]) -> Tensor:
        """Distance-biased attention over the K nearest completion points."""
        if not completions:
            return Tensor(np.zeros(self.channels))
        coords = np.stack([t.coord for t in completions])
        dists = np.linalg.norm(coords - inst.point, axis=1)
        keep = np.argsort(dists, kind="stable")[:self.neighbors]
        feats = stack([completions[int(j)].feature for j in keep], axis=0)
        offsets = Tensor(coords[keep] - inst.point)

        q = self.wq(inst.semantic.reshape(1, -1))
        k = self.wk(feats)
        v = self.wv(feats)
        logits = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.channels))
        logits = logits + self.bias_mlp(offsets).reshape(1, -1)
        weights = softmax(logits, axis=-1)
        return self.w_out(weights @ v).reshape(-1)

    def route(self, inst: InstanceToken, context: Tensor) -> Tensor:
        """Uncertainty-conditioned gated residual injection of 3D context."""
        if float(np.abs(context.data).max(initial=0.0)) == 0.0:
            return inst.semantic
        u = Tensor(np.array([inst.uncertainty]))
        gate_in = concat([inst.semantic.reshape(1, -1), context.reshape(1, -1),
                          u.reshape(1, 1)], axis=-1)
        gate = (self.gate_mlp(gate_in) * self.route_tau).sigmoid().reshape(-1)
        return inst.semantic + gate * self.ln_ctx(context.reshape(1, -1)).reshape(-1)

    def assemble(self, instances: list[InstanceToken],
                 completions: list[CompletionToken],
                 p_ee: np.ndarray) -> DownstreamTokenSet:
        """Route instances, add gripper-relative embeddings, emit ordered tokens."""
        rows, prov, pts = [], [], []
        for inst in instances:
            routed = self.route(inst, self.local_context(inst, completions))
            rows.append(routed + self.ee_encode(inst.point, p_ee).reshape(-1))
            prov.append(("instance", inst.probe_index))
            pts.append(inst.point)
        for tok in completions:
            rows.append(tok.feature + self.ee_encode(tok.coord, p_ee).reshape(-1))
            prov.append(("completion", tok.instance_id))
            pts.append(tok.coord)
        if rows:
            tokens = stack(rows, axis=0)
            points = np.stack(pts)
        else:
            tokens = Tensor(np.zeros((0, self.channels)))
            points = np.zeros((0, 3))
        return DownstreamTokenSet(tokens=tokens, provenance=prov, points=points)


class TokenConsumerStub:
    """Stand-in for the downstream policy: accepts tokens, checks shapes only."""

    def __init__(self, token_dim: int):
        self.token_dim = token_dim

    def validate(self, token_set: DownstreamTokenSet) -> dict:
        arr = token_set.tokens.data
        if arr.ndim != 2 or (len(token_set) and arr.shape[1] != self.token_dim):
            raise ValueError(f"expected (*, {self.token_dim}) tokens, got {arr.shape}")
        if len(token_set.provenance) != len(token_set):
            raise ValueError("provenance length does not match token count")
        if not np.isfinite(arr).all():
            raise ValueError("downstream tokens must be finite")
        return {"count": len(token_set), "dim": self.token_dim}


def dump_tokens_csv(path, token_set: DownstreamTokenSet) -> None:
    from .fileio import fmt

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "kind", "id", "px", "py", "pz"]
                        + [f"f{i}" for i in range(8)])
        for i, ((kind, ident), point) in enumerate(zip(token_set.provenance,
                                                       token_set.points)):
            feats = token_set.tokens.data[i, :8]
            writer.writerow([i, kind, ident] + [fmt(v) for v in point]
                            + [fmt(v) for v in feats])
