"""Detection head, box decoding, rotated-box NMS, losses and AP evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .grid import FeatureGrid, GridSpec, LinearHead, Pose, apply_head, sigmoid

REG_CHANNELS = 6  # dx, dy, log l, log w, sin yaw, cos yaw
RANGE_BUCKETS: dict[str, tuple[float, float]] = {
    "short": (0.0, 30.0),
    "middle": (30.0, 50.0),
    "long": (50.0, 100.0),
}
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class DetectionBox:
    x: float
    y: float
    length: float
    width: float
    yaw: float
    score: float = 1.0

    def __post_init__(self) -> None:
        if not (self.length > 0 and self.width > 0):
            raise ConfigError(f"box sizes must be positive, got {self.length} x {self.width}")
        if not (0.0 <= self.score <= 1.0):
            raise ConfigError(f"score {self.score} outside [0, 1]")

    def corners(self) -> np.ndarray:
        """Counter-clockwise corner polygon, shape (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    @property
    def area(self) -> float:
        return self.length * self.width

    @property
    def radius(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)


@dataclass(frozen=True)
class DetectionHead:
    """Shared classification head (1x1 conv C->1) and box regression head (C->6)."""

    classifier: LinearHead
    regressor: LinearHead

    @classmethod
    def analytic(cls, channels: int) -> DetectionHead:
        """Fixed readout matching the analytic backbone layout (objectness in 0, box terms in 1..6)."""
        if channels < 1 + REG_CHANNELS:
            raise ConfigError(f"analytic head needs >= {1 + REG_CHANNELS} channels, got {channels}")
        reg = np.zeros((channels, REG_CHANNELS))
        reg[1 : 1 + REG_CHANNELS] = np.eye(REG_CHANNELS)
        return cls(LinearHead.one_hot(channels, 0), LinearHead(reg, np.zeros(REG_CHANNELS)))


def classify(grid: FeatureGrid, head: LinearHead) -> np.ndarray:
    return sigmoid(apply_head(grid, head))


def regress(grid: FeatureGrid, head: LinearHead) -> np.ndarray:
    if head.out_channels != REG_CHANNELS:
        raise ConfigError(f"regression head must output {REG_CHANNELS} values, got {head.out_channels}")
    return head(grid)


def decode_cells(regs: np.ndarray, spec: GridSpec, pose: Pose) -> np.ndarray:
    """Per-cell (x, y, length, width, yaw) in world frame, shape (H, W, 5).

    Offsets and headings are read in world-aligned axes, relative to the
    world position of each cell center.
    """
    centers = pose.to_world(spec.cell_centers())
    out = np.empty(regs.shape[:2] + (5,))
    out[..., 0] = centers[..., 0] + regs[..., 0]
    out[..., 1] = centers[..., 1] + regs[..., 1]
    out[..., 2] = np.exp(regs[..., 2])
    out[..., 3] = np.exp(regs[..., 3])
    out[..., 4] = np.arctan2(regs[..., 4], regs[..., 5])
    return out


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append(cur + t * (nxt - cur))
    return out


def polygon_area(points: Sequence[np.ndarray] | np.ndarray) -> float:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def rotated_iou(a: DetectionBox, b: DetectionBox) -> float:
    """IoU of two rotated rectangles by convex polygon clipping."""
    if math.hypot(a.x - b.x, a.y - b.y) > a.radius + b.radius:
        return 0.0
    poly = list(a.corners())
    clip = b.corners()
    for i in range(4):
        poly = _clip(poly, clip[i], clip[(i + 1) % 4])
        if not poly:
            return 0.0
    inter = polygon_area(poly)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _canonical(boxes: Iterable[DetectionBox]) -> list[DetectionBox]:
    return sorted(boxes, key=lambda b: (-b.score, b.x, b.y, b.length, b.width, b.yaw))


def nms(boxes: Iterable[DetectionBox], iou_threshold: float, *, presorted: bool = False) -> list[DetectionBox]:
    """Greedy NMS: a box is dropped if its IoU with a kept box exceeds the threshold."""
    if not 0 < iou_threshold <= 1:
        raise ConfigError(f"nms iou must be in (0, 1], got {iou_threshold}")
    ordered = list(boxes) if presorted else _canonical(boxes)
    kept: list[DetectionBox] = []
    for box in ordered:
        if all(rotated_iou(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


def decode_boxes(conf: np.ndarray, regs: np.ndarray, spec: GridSpec, pose: Pose,
                 score_thr: float = 0.6, nms_iou: float = 0.1) -> list[DetectionBox]:
    """Boxes for every cell with confidence above ``score_thr``, after NMS.

    Candidates are visited by descending score with ties going to the
    earlier (h, w) cell.
    """
    if not 0 <= score_thr <= 1:
        raise ConfigError(f"score threshold must be in [0, 1], got {score_thr}")
    params = decode_cells(regs, spec, pose)
    flat_conf = conf.reshape(-1)
    order = np.argsort(-flat_conf, kind="stable")
    order = order[flat_conf[order] > score_thr]
    flat = params.reshape(-1, 5)
    candidates = [
        DetectionBox(*map(float, flat[i]), score=float(min(max(flat_conf[i], 0.0), 1.0)))
        for i in order
        if flat[i, 2] > 0 and flat[i, 3] > 0
    ]
    return nms(candidates, nms_iou, presorted=True)


def detect(grid: FeatureGrid, head: DetectionHead, pose: Pose, score_thr: float = 0.6,
           nms_iou: float = 0.1) -> list[DetectionBox]:
    return decode_boxes(classify(grid, head.classifier), regress(grid, head.regressor), grid.spec, pose,
                        score_thr, nms_iou)


# -- losses --------------------------------------------------------------

def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Summed smooth-L1 loss and its gradient w.r.t. ``pred``."""
    if not beta > 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d))
    return float(loss.sum()), grad


def focal_loss(prob: np.ndarray, target: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0) -> tuple[float, np.ndarray]:
    """Summed binary focal loss and its gradient w.r.t. ``prob``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the gradient is zero
    where the clamp is active.
    """
    p_raw = np.asarray(prob, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    p = np.clip(p_raw, PROB_CLAMP, 1 - PROB_CLAMP)
    active = (p_raw == p).astype(np.float64)
    pos = t == 1
    q = 1 - p
    loss_pos = -alpha * q**gamma * np.log(p)
    loss_neg = -(1 - alpha) * p**gamma * np.log(q)
    grad_pos = alpha * (gamma * q ** (gamma - 1) * np.log(p) - q**gamma / p) if gamma else -alpha / p
    grad_neg = -(1 - alpha) * (gamma * p ** (gamma - 1) * np.log(q) - p**gamma / q) if gamma else (1 - alpha) / q
    loss = np.where(pos, loss_pos, loss_neg)
    grad = np.where(pos, grad_pos, grad_neg) * active
    return float(loss.sum()), grad


# -- evaluation ----------------------------------------------------------

@dataclass
class EvalResult:
    ap_05: float | None
    ap_07: float | None
    buckets: dict[str, dict[str, float | None]] = field(default_factory=dict)
    num_gt: int = 0
    num_det: int = 0


def average_precision(dets: Sequence[DetectionBox], gts: Sequence[DetectionBox], iou_thr: float) -> float | None:
    """All-point interpolated AP; None when there is no ground truth."""
    if not gts:
        return None
    ordered = _canonical(dets)
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(ordered))
    for i, det in enumerate(ordered):
        best, best_j = -1.0, -1
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            iou = rotated_iou(det, gt)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_thr:
            matched[best_j] = True
            tp[i] = 1.0
    if not ordered:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(ordered) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _in_range(boxes: Sequence[DetectionBox], ego_xy: tuple[float, float], lo: float, hi: float) -> list[DetectionBox]:
    out = []
    for b in boxes:
        d = math.hypot(b.x - ego_xy[0], b.y - ego_xy[1])
        if lo <= d < hi or (hi == RANGE_BUCKETS["long"][1] and d == hi):
            out.append(b)
    return out


def evaluate_ap(dets: Sequence[DetectionBox], gts: Sequence[DetectionBox], ego_xy: tuple[float, float] = (0.0, 0.0),
                iou_thresholds: tuple[float, float] = (0.5, 0.7),
                range_buckets: dict[str, tuple[float, float]] | None = None) -> EvalResult:
    """AP at two IoU thresholds overall and per distance bucket (dets and gts both bucketed)."""
    buckets = RANGE_BUCKETS if range_buckets is None else range_buckets
    lo_thr, hi_thr = iou_thresholds
    result = EvalResult(average_precision(dets, gts, lo_thr), average_precision(dets, gts, hi_thr),
                        num_gt=len(gts), num_det=len(dets))
    for name, (lo, hi) in buckets.items():
        d, g = _in_range(dets, ego_xy, lo, hi), _in_range(gts, ego_xy, lo, hi)
        result.buckets[name] = {"ap_05": average_precision(d, g, lo_thr), "ap_07": average_precision(d, g, hi_thr)}
    return result


def write_records(path: str | Path, boxes_by_frame: dict[int, Sequence[DetectionBox]]) -> None:
    """Line-delimited JSON: one record per box with frame, x, y, l, w, yaw, score."""
    with open(path, "w") as fh:
        for frame in sorted(boxes_by_frame):
            for b in boxes_by_frame[frame]:
                rec = {"frame": frame, "x": b.x, "y": b.y, "l": b.length, "w": b.width, "yaw": b.yaw, "score": b.score}
                fh.write(json.dumps(rec) + "\n")


def read_records(path: str | Path) -> dict[int, list[DetectionBox]]:
    out: dict[int, list[DetectionBox]] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            out.setdefault(int(r["frame"]), []).append(DetectionBox(r["x"], r["y"], r["l"], r["w"], r["yaw"], r["score"]))
    return out


def box_dict(box: DetectionBox) -> dict:
    return asdict(box)
