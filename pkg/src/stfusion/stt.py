"""Spatio-temporal transmission: choose which BEV cells a collaborator sends.

The sender scores cells with the shared classification head, compares that
saliency against the last state the receiver holds, blends the two into a
continuous mask and ships the original features of every cell whose mask
clears a threshold (or the best cells that fit a byte budget). The receiver
writes those cells over its pose-warped history and optionally refines the
result with a small convolutional network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError
from .grid import FeatureGrid, LinearHead, Pose, apply_head, sigmoid, warp_to_frame
from .wire import OVERHEAD, SparseTokenSet, entry_size


@dataclass(frozen=True)
class SttConfig:
    rho: float = 1.0
    threshold: float = 0.01
    tau: int = 1

    def __post_init__(self) -> None:
        if not self.rho >= 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if not self.threshold >= 0:
            raise ConfigError(f"threshold must be >= 0, got {self.threshold}")
        if int(self.tau) != self.tau or self.tau < 1:
            raise ConfigError(f"tau must be an integer >= 1, got {self.tau}")

    @property
    def mask_ceiling(self) -> float:
        """Upper bound of the selection mask for this rho."""
        return 1.0 / (self.rho + 1.0) + self.rho


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def saliency_map(features: FeatureGrid, head: LinearHead) -> np.ndarray:
    return sigmoid(apply_head(features, head))


def dynamic_map(saliency_now: np.ndarray, saliency_prev: np.ndarray) -> np.ndarray:
    _same_shape(saliency_now, saliency_prev, "dynamic_map")
    return np.abs(saliency_now - saliency_prev)


def selection_mask(saliency: np.ndarray, dynamic: np.ndarray, rho: float) -> np.ndarray:
    """``E * (1/(rho+1) + D*rho)``.

    Evaluated as ``E/(rho+1) + E*D*rho`` so that rho = 0 and D = 0 collapse to
    exactly ``E`` and ``E/(rho+1)``.
    """
    _same_shape(saliency, dynamic, "selection_mask")
    if not rho >= 0:
        raise ConfigError(f"rho must be >= 0, got {rho}")
    return saliency / (rho + 1.0) + saliency * dynamic * rho


def transmission_mask(
    features: FeatureGrid,
    head: LinearHead,
    rho: float,
    history: FeatureGrid | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Saliency, dynamic map and selection mask for one sender frame.

    ``history`` is the receiver-side state already aligned to the current
    sender pose; with no history (cold start) the dynamic map is all zeros.
    """
    e_now = saliency_map(features, head)
    if history is None:
        d = np.zeros_like(e_now)
    else:
        d = dynamic_map(e_now, saliency_map(history, head))
    return e_now, d, selection_mask(e_now, d, rho)


def select_tokens(
    features: FeatureGrid,
    mask: np.ndarray,
    threshold: float,
    *,
    sender_id: int = 0,
    frame: int = 0,
    pose: Pose | None = None,
) -> SparseTokenSet:
    """Every cell with ``mask > threshold``, carrying its unscaled feature vector."""
    _same_shape(mask, features.data[..., 0], "select_tokens")
    return SparseTokenSet.from_cells(features, mask > threshold, sender_id, frame, pose or Pose())


def select_all(features: FeatureGrid, *, sender_id: int = 0, frame: int = 0, pose: Pose | None = None) -> SparseTokenSet:
    """Dense transmission: every cell."""
    full = np.ones(features.data.shape[:2], dtype=bool)
    return SparseTokenSet.from_cells(features, full, sender_id, frame, pose or Pose())


def select_under_budget(
    features: FeatureGrid,
    mask: np.ndarray,
    budget_bytes: int,
    *,
    sender_id: int = 0,
    frame: int = 0,
    pose: Pose | None = None,
) -> tuple[SparseTokenSet, float]:
    """Highest-mask cells whose encoded message fits ``budget_bytes``.

    Only cells with a positive mask are candidates, so an unlimited budget
    matches ``select_tokens(..., threshold=0)``. Ties on equal mask values go
    to the earlier (h, w) cell. A budget below the fixed message overhead
    yields an empty set; such a message should not be sent at all.

    Returns the token set and the largest unselected mask value (0.0 if
    every candidate was taken), i.e. the smallest threshold that reproduces
    the set whenever the boundary is not a tie.
    """
    if budget_bytes < 0:
        raise ConfigError(f"budget must be >= 0, got {budget_bytes}")
    _same_shape(mask, features.data[..., 0], "select_under_budget")
    flat = mask.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    order = order[flat[order] > 0]
    capacity = max(0, (int(budget_bytes) - OVERHEAD) // entry_size(features.channels))
    k = min(capacity, order.size)
    chosen = np.zeros(flat.size, dtype=bool)
    chosen[order[:k]] = True
    effective = float(flat[order[k]]) if k < order.size else 0.0
    tokens = SparseTokenSet.from_cells(features, chosen.reshape(mask.shape), sender_id, frame, pose or Pose())
    return tokens, effective


def comm_volume(num_cells: int, channels: int) -> float | None:
    """log2 of transmitted megabytes for ``num_cells`` f16 vectors; None means nothing was sent."""
    if num_cells < 0 or channels < 1:
        raise ConfigError(f"invalid volume arguments: num_cells={num_cells}, channels={channels}")
    if num_cells == 0:
        return None
    return math.log2(num_cells * channels * 16 / (8 * 2**20))


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w, _ = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias, (h, w, weight.shape[3])).copy()
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + h, dx : dx + w] @ weight[dy, dx]
    return out


def _instance_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=(0, 1), keepdims=True)
    var = x.var(axis=(0, 1), keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


class ReconNet:
    """Residual refinement: ``x + scale * stack(x)`` where each layer is conv3x3, norm, GELU.

    The output scale starts at zero so a freshly built network is an exact
    passthrough of the blended grid.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], scale: np.ndarray):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.scale = np.asarray(scale, dtype=np.float64)
        channels = self.scale.shape[0]
        for w, b in zip(self.weights, self.biases):
            if w.shape[:2] != (3, 3) or w.shape[2] != channels or w.shape[3] != channels or b.shape != (channels,):
                raise ConfigError("ReconNet layers must be 3x3 filters mapping C -> C")

    @classmethod
    def seeded(cls, channels: int, seed: int = 0, layers: int = 2, scale: float = 0.0) -> ReconNet:
        rng = np.random.default_rng([seed, 0x5EC0])
        std = 1.0 / math.sqrt(9 * channels)
        weights = [rng.normal(0.0, std, (3, 3, channels, channels)) for _ in range(layers)]
        biases = [np.zeros(channels) for _ in range(layers)]
        return cls(weights, biases, np.full(channels, float(scale)))

    @classmethod
    def zeros(cls, channels: int, layers: int = 2) -> ReconNet:
        return cls(
            [np.zeros((3, 3, channels, channels)) for _ in range(layers)],
            [np.zeros(channels) for _ in range(layers)],
            np.zeros(channels),
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    @property
    def is_passthrough(self) -> bool:
        if not np.any(self.scale):
            return True
        return not any(np.any(w) or np.any(b) for w, b in zip(self.weights, self.biases))

    def residual(self, x: np.ndarray) -> np.ndarray:
        h = x
        for w, b in zip(self.weights, self.biases):
            h = gelu(_instance_norm(_conv3x3(h, w, b)))
        return self.scale * h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.is_passthrough:
            return x
        return x + self.residual(x)


def reconstruct(
    tokens: SparseTokenSet,
    history: FeatureGrid | None,
    history_pose: Pose | None,
    now_pose: Pose | None,
    net: ReconNet | None,
    *,
    resolution: float = 1.0,
    origin: tuple[float, float] | None = None,
) -> FeatureGrid:
    """Receiver-side rebuild of the full sender grid.

    The previous reconstruction is warped from ``history_pose`` to
    ``now_pose`` (defaults to the pose in the token header), token cells are
    overwritten with the received values and the refinement residual is
    added. Without history the unsent cells stay zero.
    """
    now_pose = tokens.sender_pose if now_pose is None else now_pose
    if history is None:
        base = np.zeros((tokens.height, tokens.width, tokens.channels))
    else:
        if history.channels != tokens.channels:
            raise ConfigError(f"token channels {tokens.channels} != history channels {history.channels}")
        if (history.height, history.width) != (tokens.height, tokens.width):
            raise ConfigError("token grid bounds do not match history grid")
        resolution, origin = history.resolution, history.origin
        base = warp_to_frame(history, history_pose or now_pose, now_pose).data.copy()
    base[tokens.rows, tokens.cols] = tokens.values.astype(np.float64)
    if net is not None:
        if net.channels != tokens.channels:
            raise ConfigError(f"ReconNet built for {net.channels} channels, tokens carry {tokens.channels}")
        base = net(base)
    return FeatureGrid(base, resolution, origin)
