"""Model bundle: all modules sharing one parameter store."""

from __future__ import annotations

import numpy as np

from .aggregation import GeometryAggregator, TokenConsumerStub
from .config import RunConfig
from .fusion import FusionConfig, SpatialFusion, SpatialMemory
from .instance import FeaturePyramid, InstanceConfig, InstanceDecoder, ProbeOutputs, \
    PyramidBuilder
from .matching import Assignment, MatchCostConfig, global_cost_matrix, hungarian
from .nn.params import ParamStore
from .predictor import Predictor, PredictorConfig
from .scene import Scene

STAGE1_PREFIXES = ("fusion.", "pyramid.", "probe.")
STAGE2_PREFIXES = ("predictor.", "agg.")


class Pipeline:
    def __init__(self, cfg: RunConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore(cfg.seed if seed is None else seed)
        m = cfg.model
        self.fusion = SpatialFusion(self.store, FusionConfig(
            channels=m.channels, heads=m.heads, head_dim=m.head_dim,
            depth=m.enc_depth, ffn_ratio=m.ffn_ratio, rope_scale=m.rope_scale,
            token_stride=m.token_stride))
        self.pyramid = PyramidBuilder(self.store, m.channels, m.token_stride)
        self.decoder = InstanceDecoder(self.store, InstanceConfig(
            channels=m.channels, num_probes=m.num_probes, layers=m.dec_layers,
            heads=m.def_heads, points=m.def_points, alpha=m.alpha,
            tau_view_init=m.tau_view_init))
        self.predictor = Predictor(self.store, PredictorConfig(
            channels=m.channels, heads=m.heads, head_dim=m.head_dim,
            blocks=m.pred_blocks, ffn_ratio=m.ffn_ratio, pos_freqs=m.pos_freqs,
            max_views=4, rope_scale=m.rope_scale))
        self.aggregator = GeometryAggregator(self.store, m.channels,
                                             neighbors=m.neighbors,
                                             route_tau=m.route_tau,
                                             ee_freqs=m.ee_freqs)
        self.consumer = TokenConsumerStub(m.channels)
        self.cost_cfg = MatchCostConfig(
            w_cls=cfg.train.lambdas["cls"], w_box=cfg.train.lambdas["box"],
            w_giou=cfg.train.lambdas["giou"], w_3d=cfg.train.lambdas["l1_3d"])

    # ---- staging ----------------------------------------------------------

    def set_stage(self, stage: int) -> None:
        if stage == 1:
            self.store.set_trainable(lambda n: n.startswith(STAGE1_PREFIXES))
        elif stage == 2:
            self.store.set_trainable(lambda n: n.startswith(STAGE2_PREFIXES))
        else:
            raise ValueError(f"unknown stage {stage}")

    def stage1_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(STAGE1_PREFIXES)]

    def stage2_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(STAGE2_PREFIXES)]

    # ---- forward passes -----------------------------------------------------

    def forward_instances(self, scene: Scene):
        memory = self.fusion(scene.observation)
        pyramid = self.pyramid(memory)
        outputs = self.decoder.run(pyramid, scene.observation.cameras)
        return memory, pyramid, outputs

    def match(self, outputs: ProbeOutputs, scene: Scene) -> Assignment:
        cost = global_cost_matrix(outputs, scene.truth, self.cost_cfg)
        return hungarian(cost)
