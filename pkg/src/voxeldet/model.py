"""The assembled detector: voxel encoder, semantic context, depth-aware head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .box_geom import AnchorGrid, Box3D, Detection, build_anchor_grid, decode, oriented_nms
from .config import RunConfig
from .depth_head import ANCHORS_PER_CELL, DepthAwareHead, FusedOutput, fuse_scores
from .nn_core import Module, Tensor
from .seg_context import SemanticContextEncoder
from .sparse_conv import VfeEncoder, VfePlan


@dataclass
class ModelOutput:
    bev: Tensor            # (B, O, H, W) voxel-encoder output
    probability: Tensor    # (B, 1, H, W) segmentation branch M
    fused: Tensor          # (B, 2*O, H, W) re-weighted features R
    parts: list            # per-part head outputs


class VehicleDetector(Module):
    """End-to-end network over a batch of sparse voxel grids."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        vox = cfg.voxelizer()
        self.vfe = VfeEncoder(vox.grid_shape, cfg.blocks(), seed=cfg.model_seed)
        channels, height, width = self.vfe.bev_shape
        if channels != cfg.sce_channels:
            raise ValueError(
                f"voxel encoder emits {channels} channels but sce_channels is "
                f"{cfg.sce_channels}"
            )
        self.sce = SemanticContextEncoder(cfg.sce_channels, seed=cfg.model_seed + 1)
        self.head = DepthAwareHead(
            cfg.parts(),
            map_width=width,
            in_channels=self.sce.out_channels,
            mid_channels=cfg.head_mid_channels,
            seed=cfg.model_seed + 2,
        )
        self.anchors: AnchorGrid = build_anchor_grid(
            cfg.range_min[0],
            cfg.range_min[1],
            n_x=width,
            n_y=height,
            cell_size=cfg.bev_cell_size,
            size=tuple(cfg.anchor_size),
            z_center=cfg.anchor_z,
            orientations=tuple(cfg.anchor_yaws),
        )
        self.bev_height = height
        self.bev_width = width

    def forward_from_plan(self, plan: VfePlan) -> ModelOutput:
        bev = self.vfe.forward(plan)
        fused, probability = self.sce(bev)
        parts = self.head(fused)
        return ModelOutput(bev, probability, fused, parts)

    def forward(self, grids) -> ModelOutput:
        return self.forward_from_plan(self.vfe.build_plan(grids))

    def fuse(self, output: ModelOutput) -> FusedOutput:
        return fuse_scores(output.parts, self.cfg.parts(), self.bev_width)

    def detect(self, output: ModelOutput) -> list[list[Detection]]:
        """Threshold, decode against the anchors, and apply oriented NMS."""
        fused = self.fuse(output)
        cfg = self.cfg
        anchors = self.anchors.boxes.reshape(self.bev_height, self.bev_width,
                                             ANCHORS_PER_CELL, 7)
        results = []
        for b in range(fused.scores.shape[0]):
            keep = fused.scores[b] >= cfg.score_threshold   # (2, H, W)
            cand = np.nonzero(keep)
            if len(cand[0]) > cfg.pre_nms_top_k:
                scores = fused.scores[b][cand]
                order = np.lexsort((np.arange(len(scores)), -scores))[: cfg.pre_nms_top_k]
                cand = tuple(axis[order] for axis in cand)
            dets = []
            for a, iy, ix in zip(*cand):
                residual = fused.box[b, 7 * a : 7 * a + 7, iy, ix]
                dir_pair = fused.dir_logits[b, 2 * a : 2 * a + 2, iy, ix]
                decoded = decode(residual, anchors[iy, ix, a], bit=int(dir_pair.argmax()))
                if not np.all(np.isfinite(decoded)) or decoded[3:6].min() <= 0:
                    continue
                dets.append(
                    Detection(Box3D.from_array(decoded), float(fused.scores[b, a, iy, ix]),
                              int(dir_pair.argmax()))
                )
            results.append(oriented_nms(dets, cfg.nms_iou))
        return results
