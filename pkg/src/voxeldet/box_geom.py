"""Oriented 3D boxes: anchors, residual codec, rotated IoU, and NMS.

Boxes live in the LiDAR frame as (x, y, z, w, l, h, theta) with the
volumetric center at (x, y, z), length ``l`` along the heading direction,
and yaw ``theta`` measured counterclockwise about +z from +x, wrapped to
(-pi, pi].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]; in-range values pass through."""
    t = np.asarray(theta, dtype=np.float64)
    wrapped = np.pi - np.mod(np.pi - t, TWO_PI)
    return np.where((t > -np.pi) & (t <= np.pi), t, wrapped)


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.theta])

    @staticmethod
    def from_array(a) -> "Box3D":
        a = np.asarray(a, dtype=np.float64)
        return Box3D(*a[:7])


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    direction_bit: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of range: {self.score}")


def bev_corners(box) -> np.ndarray:
    """Counterclockwise BEV rectangle corners, (4, 2)."""
    x, y, _, w, l, _, theta = np.asarray(box if not isinstance(box, Box3D) else box.as_array())
    dx = np.array([l, -l, -l, l]) / 2.0
    dy = np.array([w, w, -w, -w]) / 2.0
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([x + c * dx - s * dy, y + s * dx + c * dy], axis=1)


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as (n, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by a convex CCW ``clip`` polygon."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        points = output
        output = []
        prev = points[-1]
        prev_in = ex * (prev[1] - ay) - ey * (prev[0] - ax) >= 0.0
        for cur in points:
            cur_in = ex * (cur[1] - ay) - ey * (cur[0] - ax) >= 0.0
            if cur_in != prev_in:
                # segment crosses the clip edge
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = -(ex * (prev[1] - ay) - ey * (prev[0] - ax)) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def bev_intersection_area(a, b) -> float:
    return polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))


def bev_iou(a, b) -> float:
    """Exact rotated-rectangle IoU in the BEV plane."""
    aa = a.as_array() if isinstance(a, Box3D) else np.asarray(a)
    bb = b.as_array() if isinstance(b, Box3D) else np.asarray(b)
    area_a = aa[3] * aa[4]
    area_b = bb[3] * bb[4]
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = bev_intersection_area(aa, bb)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou3d(a, b) -> float:
    """Volumetric IoU: rotated BEV overlap times vertical overlap."""
    aa = a.as_array() if isinstance(a, Box3D) else np.asarray(a)
    bb = b.as_array() if isinstance(b, Box3D) else np.asarray(b)
    z_overlap = min(aa[2] + aa[5] / 2, bb[2] + bb[5] / 2) - max(aa[2] - aa[5] / 2, bb[2] - bb[5] / 2)
    if z_overlap <= 0.0:
        return 0.0
    inter = bev_intersection_area(aa, bb) * z_overlap
    vol_a = aa[3] * aa[4] * aa[5]
    vol_b = bb[3] * bb[4] * bb[5]
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def pairwise_bev_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """(N, M) rotated BEV IoU matrix with a center-distance prefilter."""
    return _pairwise(boxes_a, boxes_b, bev_iou)


def pairwise_iou3d(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    return _pairwise(boxes_a, boxes_b, iou3d)


def _pairwise(boxes_a, boxes_b, iou_fn) -> np.ndarray:
    boxes_a = np.atleast_2d(np.asarray(boxes_a, dtype=np.float64))
    boxes_b = np.atleast_2d(np.asarray(boxes_b, dtype=np.float64))
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if out.size == 0:
        return out
    rad_a = 0.5 * np.hypot(boxes_a[:, 3], boxes_a[:, 4])
    rad_b = 0.5 * np.hypot(boxes_b[:, 3], boxes_b[:, 4])
    dist = np.hypot(
        boxes_a[:, 0, None] - boxes_b[None, :, 0],
        boxes_a[:, 1, None] - boxes_b[None, :, 1],
    )
    cand = dist <= rad_a[:, None] + rad_b[None, :]
    for i, j in zip(*np.nonzero(cand)):
        out[i, j] = iou_fn(boxes_a[i], boxes_b[j])
    return out


def points_in_bev_rect(xy: np.ndarray, box) -> np.ndarray:
    """Boolean mask of points inside the box's BEV rectangle (boundary inclusive)."""
    b = box.as_array() if isinstance(box, Box3D) else np.asarray(box)
    xy = np.atleast_2d(xy)
    c, s = np.cos(b[6]), np.sin(b[6])
    dx = xy[:, 0] - b[0]
    dy = xy[:, 1] - b[1]
    local_x = dx * c + dy * s
    local_y = -dx * s + dy * c
    return (np.abs(local_x) <= b[4] / 2.0) & (np.abs(local_y) <= b[3] / 2.0)


def points_in_box3d(xyz: np.ndarray, box) -> np.ndarray:
    """Boolean mask of points inside the oriented 3D box."""
    b = box.as_array() if isinstance(box, Box3D) else np.asarray(box)
    xyz = np.atleast_2d(xyz)
    return points_in_bev_rect(xyz[:, :2], b) & (np.abs(xyz[:, 2] - b[2]) <= b[5] / 2.0)


# -- residual codec ------------------------------------------------------------


def encode(gt, anchor) -> np.ndarray:
    """Regression residuals of a ground-truth box relative to an anchor.

    Centers are normalized by the anchor's BEV diagonal (z by its height);
    sizes are log ratios; yaw is a plain difference.
    """
    g = gt.as_array() if isinstance(gt, Box3D) else np.asarray(gt, dtype=np.float64)
    a = anchor.as_array() if isinstance(anchor, Box3D) else np.asarray(anchor, dtype=np.float64)
    d = np.sqrt(a[..., 3] ** 2 + a[..., 4] ** 2)
    return np.stack(
        [
            (g[..., 0] - a[..., 0]) / d,
            (g[..., 1] - a[..., 1]) / d,
            (g[..., 2] - a[..., 2]) / a[..., 5],
            np.log(g[..., 3] / a[..., 3]),
            np.log(g[..., 4] / a[..., 4]),
            np.log(g[..., 5] / a[..., 5]),
            g[..., 6] - a[..., 6],
        ],
        axis=-1,
    )


def direction_bit(theta) -> np.ndarray:
    """Discretized heading bin: 1 iff the wrapped yaw is non-negative."""
    return (wrap_angle(theta) >= 0.0).astype(np.int64)


def decode(residuals, anchor, bit=None) -> np.ndarray:
    """Invert :func:`encode`; an inconsistent direction bit flips yaw by pi.

    Returns a (..., 7) array; use :class:`Box3D` to wrap single rows.
    """
    r = np.asarray(residuals, dtype=np.float64)
    a = anchor.as_array() if isinstance(anchor, Box3D) else np.asarray(anchor, dtype=np.float64)
    d = np.sqrt(a[..., 3] ** 2 + a[..., 4] ** 2)
    theta = wrap_angle(a[..., 6] + r[..., 6])
    if bit is not None:
        flip = np.asarray(bit) != (theta >= 0.0)
        theta = np.where(flip, wrap_angle(theta + np.pi), theta)
    return np.stack(
        [
            r[..., 0] * d + a[..., 0],
            r[..., 1] * d + a[..., 1],
            r[..., 2] * a[..., 5] + a[..., 2],
            np.exp(r[..., 3]) * a[..., 3],
            np.exp(r[..., 4]) * a[..., 4],
            np.exp(r[..., 5]) * a[..., 5],
            theta,
        ],
        axis=-1,
    )


# -- anchors ---------------------------------------------------------------------


@dataclass(frozen=True)
class AnchorGrid:
    """Two fixed-size anchors per BEV cell, yaw 0 and pi/2.

    ``boxes`` is (n_y * n_x * 2, 7) ordered row-major by (iy, ix, orientation),
    matching a flattened (H=y, W=x) head map.
    """

    boxes: np.ndarray
    n_x: int
    n_y: int
    cell_size: float

    @property
    def count(self) -> int:
        return len(self.boxes)

    def cell_of(self, flat_index: int) -> tuple[int, int, int]:
        a = flat_index % 2
        ix = (flat_index // 2) % self.n_x
        iy = flat_index // (2 * self.n_x)
        return iy, ix, a


def build_anchor_grid(x_min: float, y_min: float, n_x: int, n_y: int, cell_size: float,
                      size=(1.6, 3.9, 1.56), z_center: float = -1.0,
                      orientations=(0.0, np.pi / 2)) -> AnchorGrid:
    """Tile anchors at BEV cell centers."""
    w, l, h = size
    xs = x_min + (np.arange(n_x) + 0.5) * cell_size
    ys = y_min + (np.arange(n_y) + 0.5) * cell_size
    boxes = np.empty((n_y, n_x, len(orientations), 7))
    boxes[..., 0] = xs[None, :, None]
    boxes[..., 1] = ys[:, None, None]
    boxes[..., 2] = z_center
    boxes[..., 3] = w
    boxes[..., 4] = l
    boxes[..., 5] = h
    boxes[..., 6] = np.asarray(orientations)[None, None, :]
    return AnchorGrid(boxes.reshape(-1, 7), n_x=n_x, n_y=n_y, cell_size=cell_size)


# -- NMS -------------------------------------------------------------------------


def oriented_nms(detections, iou_threshold: float = 0.05):
    """Greedy descending-score suppression with rotated BEV IoU.

    Score ties keep the earlier detection. Returns the kept detections in
    descending score order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold out of range: {iou_threshold}")
    dets = list(detections)
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for idx in order:
        box = dets[idx].box
        if all(bev_iou(box, dets[k].box) <= iou_threshold for k in kept):
            kept.append(idx)
    return [dets[k] for k in kept]
