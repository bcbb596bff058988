"""Dense BEV feature grids and the geometric primitives built on them.

Grid convention: cell ``(h, w)`` has its center at local coordinate
``(origin[0] + w * resolution, origin[1] + h * resolution)`` in the frame of
the pose the grid is attached to, i.e. columns run along local +x and rows
along local +y. Data is stored row-major as ``(h, w, c)`` float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import ConfigError

_SNAP_EPS = 1e-9


def wrap_angle(angle: float) -> float:
    """Normalize an angle to (-pi, pi]; values already in range are returned untouched."""
    angle = float(angle)
    if -math.pi < angle <= math.pi:
        return angle
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    timestamp: int = 0

    def __post_init__(self) -> None:
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.x, self.y, self.z, self.roll, self.pitch, self.yaw)

    def to_world(self, local_xy: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx, ly = local_xy[..., 0], local_xy[..., 1]
        return np.stack([self.x + c * lx - s * ly, self.y + s * lx + c * ly], axis=-1)

    def to_local(self, world_xy: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = world_xy[..., 0] - self.x, world_xy[..., 1] - self.y
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    channels: int
    resolution: float
    origin: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigError(f"grid dimensions must be positive, got {self.height}x{self.width}x{self.channels}")
        if not self.resolution > 0:
            raise ConfigError(f"resolution must be > 0, got {self.resolution}")
        if self.origin is None:
            # centered on the attached pose
            object.__setattr__(
                self,
                "origin",
                (-(self.width - 1) * self.resolution / 2.0, -(self.height - 1) * self.resolution / 2.0),
            )
        else:
            object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def cell_centers(self) -> np.ndarray:
        """Local (x, y) of every cell center, shape (H, W, 2)."""
        ox, oy = self.origin
        xs = ox + np.arange(self.width) * self.resolution
        ys = oy + np.arange(self.height) * self.resolution
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def contains_local(self, local_xy: np.ndarray) -> np.ndarray:
        """True where a local point falls inside the grid footprint (cell edges included)."""
        ox, oy = self.origin
        half = self.resolution / 2.0
        x, y = local_xy[..., 0], local_xy[..., 1]
        return (
            (x >= ox - half)
            & (x <= ox + (self.width - 1) * self.resolution + half)
            & (y >= oy - half)
            & (y <= oy + (self.height - 1) * self.resolution + half)
        )


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """An immutable H x W x C feature map attached to some agent frame."""

    data: np.ndarray
    resolution: float = 1.0
    origin: tuple[float, float] | None = field(default=None)

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if data.ndim != 3:
            raise ConfigError(f"feature grid data must be (H, W, C), got shape {data.shape}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        spec = GridSpec(data.shape[0], data.shape[1], data.shape[2], self.resolution, self.origin)
        object.__setattr__(self, "origin", spec.origin)
        object.__setattr__(self, "resolution", float(self.resolution))

    @classmethod
    def zeros(cls, spec: GridSpec) -> FeatureGrid:
        return cls(np.zeros((spec.height, spec.width, spec.channels)), spec.resolution, spec.origin)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.height, self.width, self.channels, self.resolution, self.origin)

    def with_data(self, data: np.ndarray) -> FeatureGrid:
        return replace(self, data=data)

    def equals(self, other: FeatureGrid) -> bool:
        """Bit-exact equality of geometry and values."""
        return (
            self.resolution == other.resolution
            and self.origin == other.origin
            and self.data.shape == other.data.shape
            and np.array_equal(self.data.view(np.uint64), other.data.view(np.uint64))
        )


class LinearHead:
    """Per-cell linear readout C -> n_out (a 1x1 convolution)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | float = 0.0):
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim == 1:
            weight = weight[:, None]
        self.weight = weight
        self.bias = np.broadcast_to(np.asarray(bias, dtype=np.float64), (weight.shape[1],)).copy()

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def one_hot(cls, channels: int, index: int, bias: float = 0.0) -> LinearHead:
        w = np.zeros(channels)
        w[index] = 1.0
        return cls(w, bias)

    def __call__(self, grid: FeatureGrid) -> np.ndarray:
        if grid.channels != self.in_channels:
            raise ConfigError(f"head expects {self.in_channels} channels, grid has {grid.channels}")
        return grid.data @ self.weight + self.bias


def apply_head(grid: FeatureGrid, head: LinearHead) -> np.ndarray:
    """Single-output head response as an (H, W) scalar grid; no nonlinearity."""
    if head.out_channels != 1:
        raise ConfigError(f"apply_head needs a C->1 head, got C->{head.out_channels}")
    return head(grid)[..., 0]


def sigmoid(values: np.ndarray) -> np.ndarray:
    return expit(np.asarray(values, dtype=np.float64))


def bilinear_corners(rows: np.ndarray, cols: np.ndarray, height: int, width: int):
    """Corner indices and weights for bilinear sampling with zero padding.

    Returns ``(index, weight)`` each of shape ``rows.shape + (4,)``. ``index``
    addresses a flattened ``(H * W + 1, C)`` table whose last row is the zero
    pad; out-of-bounds corners point at it.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    cr = np.stack([r0, r0, r0 + 1, r0 + 1], axis=-1)
    cc = np.stack([c0, c0 + 1, c0, c0 + 1], axis=-1)
    weight = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1)
    inside = (cr >= 0) & (cr < height) & (cc >= 0) & (cc < width)
    index = np.where(inside, cr * width + cc, height * width)
    return index, weight


def padded_table(data: np.ndarray) -> np.ndarray:
    h, w, c = data.shape
    table = np.zeros((h * w + 1, c))
    table[: h * w] = data.reshape(h * w, c)
    return table


def sample_many(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling of an (H, W, C) array; returns ``rows.shape + (C,)``."""
    h, w, _ = data.shape
    index, weight = bilinear_corners(rows, cols, h, w)
    table = padded_table(data)
    if np.all(weight[..., 0] == 1.0):
        # integer coordinates: plain gather keeps values bit-exact
        return table[index[..., 0]]
    corners = table[index]  # (..., 4, C)
    out = corners[..., 0, :] * weight[..., 0, None]
    for k in range(1, 4):
        out = out + corners[..., k, :] * weight[..., k, None]
    return out


def bilinear_sample(grid: FeatureGrid, point: tuple[float, float]) -> np.ndarray:
    """Channel vector at continuous (h, w); corners outside the grid contribute zero."""
    return sample_many(grid.data, np.array([point[0]]), np.array([point[1]]))[0]


def _snap(values: np.ndarray) -> np.ndarray:
    nearest = np.round(values)
    return np.where(np.abs(values - nearest) < _SNAP_EPS, nearest, values)


def source_coordinates(src: GridSpec, dst: GridSpec, src_pose: Pose, dst_pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (row, col) in the source grid for every destination cell center.

    Only the planar components (x, y, yaw) of the poses are used. The relative
    transform is formed first so that identical poses give the exact identity.
    """
    if src.resolution != dst.resolution:
        raise ConfigError(f"resolution mismatch: source {src.resolution} vs destination {dst.resolution}")
    dyaw = dst_pose.yaw - src_pose.yaw
    c, s = math.cos(dyaw), math.sin(dyaw)
    cs, ss = math.cos(src_pose.yaw), math.sin(src_pose.yaw)
    dx, dy = dst_pose.x - src_pose.x, dst_pose.y - src_pose.y
    tx = cs * dx + ss * dy
    ty = -ss * dx + cs * dy
    res = dst.resolution
    (dox, doy), (sox, soy) = dst.origin, src.origin
    # src_idx = R * dst_idx + (R * dst_origin + t - src_origin) / res
    bx = (c * dox - s * doy + tx - sox) / res
    by = (s * dox + c * doy + ty - soy) / res
    cols_d, rows_d = np.meshgrid(np.arange(dst.width, dtype=np.float64), np.arange(dst.height, dtype=np.float64))
    src_cols = c * cols_d - s * rows_d + bx
    src_rows = s * cols_d + c * rows_d + by
    return _snap(src_rows), _snap(src_cols)


def warp_to_frame(grid: FeatureGrid, src_pose: Pose, dst_pose: Pose, dst_spec: GridSpec | None = None) -> FeatureGrid:
    """Resample ``grid`` (attached to ``src_pose``) into the frame of ``dst_pose``.

    The destination layout defaults to the source layout. Regions with no
    source coverage are zero.
    """
    src = grid.spec
    dst = src if dst_spec is None else replace(dst_spec, channels=src.channels)
    rows, cols = source_coordinates(src, dst, src_pose, dst_pose)
    return FeatureGrid(sample_many(grid.data, rows, cols), dst.resolution, dst.origin)
