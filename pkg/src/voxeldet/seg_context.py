"""Semantic context encoder: BEV masks, two branches, and re-weight fusion.

Ground-truth masks live on the BEV grid of the encoder input (one cell per
``bev_stride`` voxels). The segmentation branch is a small feature pyramid
that predicts a per-cell foreground probability map M; the detection branch
is a shallow U-Net whose output is concatenated with its input; the fusion
scales each detection feature by (1 + M).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import nn_core
from .box_geom import points_in_bev_rect
from .nn_core import BatchNorm, Conv2d, ConvSpec, Module, Tensor
from .voxel_grid import SparseVoxelGrid, VoxelizerConfig


class MaskKind(enum.Enum):
    VOXEL_TYPE = "voxel_type"
    BOX_TYPE = "box_type"


@dataclass(frozen=True)
class SemanticMask:
    """Per-BEV-cell foreground labels, optionally with predicted probabilities."""

    labels: np.ndarray                    # (h, w) bool
    probabilities: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=bool)
        object.__setattr__(self, "labels", labels)
        if self.probabilities is not None:
            p = np.asarray(self.probabilities, dtype=np.float64)
            if p.shape != labels.shape:
                raise ValueError(f"probability shape {p.shape} != label shape {labels.shape}")
            if p.min() < 0.0 or p.max() > 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
            object.__setattr__(self, "probabilities", p)

    @property
    def shape(self):
        return self.labels.shape


def _foreground_voxel_columns(indices_xy: np.ndarray, cfg: VoxelizerConfig,
                              gt_boxes) -> np.ndarray:
    """Which of the given voxel columns have centers inside some box."""
    if len(indices_xy) == 0:
        return np.zeros(0, dtype=bool)
    centers = np.array(cfg.range_min[:2]) + (indices_xy + 0.5) * np.array(cfg.voxel_size[:2])
    fg = np.zeros(len(indices_xy), dtype=bool)
    for box in gt_boxes:
        fg |= points_in_bev_rect(centers, box)
    return fg


def make_mask(grid: SparseVoxelGrid, gt_boxes, kind: MaskKind, cfg: VoxelizerConfig,
              bev_stride: int = 8) -> SemanticMask:
    """Rasterize ground-truth boxes into a BEV foreground mask.

    Box-type marks a cell when any of its voxel centers falls inside a box;
    voxel-type additionally requires that voxel to be non-empty, so its
    foreground is always a subset of the box-type foreground.
    """
    nx, ny, _ = grid.shape
    h, w = ny // bev_stride, nx // bev_stride
    labels = np.zeros((h, w), dtype=bool)
    if not gt_boxes:
        return SemanticMask(labels)

    if kind is MaskKind.VOXEL_TYPE:
        cols = np.unique(grid.indices[:, :2], axis=0) if grid.num_sites else np.empty((0, 2), np.int64)
        fg = _foreground_voxel_columns(cols, cfg, gt_boxes)
        cells = cols[fg] // bev_stride
    elif kind is MaskKind.BOX_TYPE:
        cells_list = []
        vx, vy = cfg.voxel_size[0], cfg.voxel_size[1]
        x0, y0 = cfg.range_min[0], cfg.range_min[1]
        for box in gt_boxes:
            b = box.as_array()
            r = 0.5 * np.hypot(b[3], b[4])
            ix_lo = max(0, int(np.floor((b[0] - r - x0) / vx)))
            ix_hi = min(nx, int(np.ceil((b[0] + r - x0) / vx)) + 1)
            iy_lo = max(0, int(np.floor((b[1] - r - y0) / vy)))
            iy_hi = min(ny, int(np.ceil((b[1] + r - y0) / vy)) + 1)
            if ix_lo >= ix_hi or iy_lo >= iy_hi:
                continue
            gx, gy = np.meshgrid(np.arange(ix_lo, ix_hi), np.arange(iy_lo, iy_hi), indexing="ij")
            cols = np.column_stack([gx.ravel(), gy.ravel()])
            fg = _foreground_voxel_columns(cols, cfg, [box])
            cells_list.append(cols[fg] // bev_stride)
        cells = np.concatenate(cells_list) if cells_list else np.empty((0, 2), np.int64)
    else:
        raise ValueError(f"unknown mask kind {kind!r}")

    if len(cells):
        cells = cells[(cells[:, 0] < w) & (cells[:, 1] < h)]
        labels[cells[:, 1], cells[:, 0]] = True
    return SemanticMask(labels)


# -- network branches --------------------------------------------------------------


class ResidualBlock(Module):
    """Two 3x3 convolutions with batch norm and an additive skip."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.conv1 = Conv2d(ConvSpec(channels, channels, 3, padding=1, bias=False), rng)
        self.norm1 = BatchNorm(channels)
        self.conv2 = Conv2d(ConvSpec(channels, channels, 3, padding=1, bias=False), rng)
        self.norm2 = BatchNorm(channels)

    def __call__(self, x: Tensor) -> Tensor:
        y = nn_core.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return nn_core.relu(x + y)


class SegmentationBranch(Module):
    """Feature pyramid over the BEV map ending in a sigmoid probability head.

    Residual blocks sit at full, 1/2 and 1/4 scale (two maxpools down, two
    nearest-neighbor upsamples back); two 3x3 fusion convolutions merge the
    scales before the 1x1 head.
    """

    def __init__(self, channels: int = 128, seed: int = 0, prior_prob: float = 0.15):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.res_full = ResidualBlock(channels, rng)
        self.res_half_a = ResidualBlock(channels, rng)
        self.res_half_b = ResidualBlock(channels, rng)
        self.res_quarter_a = ResidualBlock(channels, rng)
        self.res_quarter_b = ResidualBlock(channels, rng)
        self.fuse_half = Conv2d(ConvSpec(channels, channels, 3, padding=1, bias=False), rng)
        self.fuse_half_norm = BatchNorm(channels)
        self.fuse_full = Conv2d(ConvSpec(channels, channels, 3, padding=1, bias=False), rng)
        self.fuse_full_norm = BatchNorm(channels)
        self.head = Conv2d(ConvSpec(channels, 1, 1), rng)
        # start at the foreground base rate so early steps discriminate
        # instead of deflating the map wholesale
        self.head.weight.data[:] = rng.normal(0.0, 0.01, size=self.head.weight.shape)
        self.head.bias.data[:] = -np.log((1.0 - prior_prob) / prior_prob)

    def __call__(self, bev: Tensor) -> Tensor:
        _, c, h, w = bev.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        if h % 4 or w % 4:
            raise ValueError(f"spatial dims must be multiples of 4, got {(h, w)}")
        full = self.res_full(bev)
        half = self.res_half_b(self.res_half_a(nn_core.maxpool2(full)))
        quarter = self.res_quarter_b(self.res_quarter_a(nn_core.maxpool2(half)))
        merged_half = half + nn_core.upsample_nearest2(quarter)
        merged_half = nn_core.relu(self.fuse_half_norm(self.fuse_half(merged_half)))
        merged_full = full + nn_core.upsample_nearest2(merged_half)
        merged_full = nn_core.relu(self.fuse_full_norm(self.fuse_full(merged_full)))
        return nn_core.sigmoid(self.head(merged_full))


class DetectionBranch(Module):
    """Shallow U-Net: stride-2 descent, upsample back, concat with the input."""

    def __init__(self, channels: int = 128, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.down = Conv2d(ConvSpec(channels, channels, 3, stride=2, padding=1, bias=False), rng)
        self.down_norm = BatchNorm(channels)
        self.mid = Conv2d(ConvSpec(channels, channels, 3, padding=1, bias=False), rng)
        self.mid_norm = BatchNorm(channels)
        self.up = Conv2d(ConvSpec(channels, channels, 3, padding=1, bias=False), rng)
        self.up_norm = BatchNorm(channels)

    @property
    def out_channels(self) -> int:
        return 2 * self.channels

    def __call__(self, bev: Tensor) -> Tensor:
        _, c, h, w = bev.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        if h % 2 or w % 2:
            raise ValueError(f"spatial dims must be even, got {(h, w)}")
        x = nn_core.relu(self.down_norm(self.down(bev)))
        x = nn_core.relu(self.mid_norm(self.mid(x)))
        x = nn_core.upsample_nearest2(x)
        x = nn_core.relu(self.up_norm(self.up(x)))
        return nn_core.concat_channels([bev, x])


def fuse(features: Tensor, probability: Tensor) -> Tensor:
    """Re-weight detection features by the segmentation probability map."""
    if features.shape[2:] != probability.shape[2:] or features.shape[0] != probability.shape[0]:
        raise ValueError(
            f"spatial/batch mismatch: features {features.shape}, probability {probability.shape}"
        )
    return (1.0 + probability) * features


def seg_loss(probability: Tensor, labels: np.ndarray, clamp_at: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy over all cells, probabilities clamped."""
    y = np.asarray(labels, dtype=np.float64).reshape(probability.shape)
    p = nn_core.clamp(probability, clamp_at, 1.0 - clamp_at)
    y_t = Tensor(y)
    losses = -(y_t * nn_core.log(p) + (1.0 - y_t) * nn_core.log(1.0 - p))
    return losses.mean()


class SemanticContextEncoder(Module):
    """Both branches plus the re-weight fusion, O channels in, 2*O out."""

    def __init__(self, channels: int = 128, seed: int = 0):
        super().__init__()
        self.segmentation = SegmentationBranch(channels, seed=seed)
        self.detection = DetectionBranch(channels, seed=seed + 1)

    @property
    def out_channels(self) -> int:
        return self.detection.out_channels

    def __call__(self, bev: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (fused feature map R, probability map M)."""
        m = self.segmentation(bev)
        f = self.detection(bev)
        return fuse(f, m), m
