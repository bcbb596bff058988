"""Unified spatio-temporal fusion with multi-agent deformable attention.

Every ego cell is a query. For each head ``m``, agent ``i`` and point ``k``
the query emits a sampling offset and an attention logit; values are
bilinearly sampled from the (meta-aligned) agent grids at the offset
locations, projected per head, mixed with a softmax taken jointly over all
agents and points, and projected back to C channels. A residual feed-forward
block follows. The projected previous fused grid enters as one more agent
whose metadata carries its delay.

Both generators see the query feature and, through weights shared across
agents, the agent's own feature at the reference point. Zeroing the shared
agent term leaves a purely query-driven attention.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ProtocolError
from .grid import FeatureGrid, Pose, bilinear_corners, padded_table, sample_many, warp_to_frame
from .memory import MemoryBank

AGENT_TYPES = ("vehicle", "infrastructure")
NORMALIZATION_TOL = 1e-12


@dataclass(frozen=True)
class AgentMeta:
    agent_type: str = "vehicle"
    speed: float = 0.0
    latency: float = 0.0
    delay: float = 0.0

    def __post_init__(self) -> None:
        if self.agent_type not in AGENT_TYPES:
            raise ConfigError(f"unknown agent type {self.agent_type!r}")
        if self.latency < 0 or self.delay < 0:
            raise ConfigError("latency and delay tag must be >= 0")

    @property
    def type_index(self) -> int:
        return AGENT_TYPES.index(self.agent_type)

    @property
    def continuous(self) -> np.ndarray:
        return np.array([self.speed, self.latency, self.delay], dtype=np.float64)


@dataclass(eq=False)
class MadaParams:
    """All learnable arrays of the align transform, the attention and its FFN.

    Shapes (Cq query channels, N agent slots, M heads, K points, d = C/M):
    value_proj (M, C, d), out_proj (M, d, C), off_query (Cq, N, M, K, 2),
    off_agent (C, M, K, 2), off_bias (N, M, K, 2), logit_query (Cq, N, M, K),
    logit_agent (C, M, K), logit_bias (N, M, K), ffn_w1 (C, F), ffn_b1 (F,),
    ffn_w2 (F, C), ffn_b2 (C,), at_scale (types, C), at_bias_w (3, C),
    at_bias_b (C,). Offsets are in cells, (row, col) order.
    """

    value_proj: np.ndarray
    out_proj: np.ndarray
    off_query: np.ndarray
    off_agent: np.ndarray
    off_bias: np.ndarray
    logit_query: np.ndarray
    logit_agent: np.ndarray
    logit_bias: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    at_scale: np.ndarray
    at_bias_w: np.ndarray
    at_bias_b: np.ndarray

    def __post_init__(self) -> None:
        for f in fields(self):
            setattr(self, f.name, np.ascontiguousarray(getattr(self, f.name), dtype=np.float64))
        m, c, d = self.value_proj.shape
        if c != m * d:
            raise ConfigError(f"channels {c} not divisible into {m} heads")
        cq, n, m2, k, two = self.off_query.shape
        expected = {
            "out_proj": (m, d, c),
            "off_agent": (c, m, k, 2),
            "off_bias": (n, m, k, 2),
            "logit_query": (cq, n, m, k),
            "logit_agent": (c, m, k),
            "logit_bias": (n, m, k),
            "ffn_b1": (self.ffn_w1.shape[1],),
            "ffn_w2": (self.ffn_w1.shape[1], c),
            "ffn_b2": (c,),
            "at_scale": (len(AGENT_TYPES), c),
            "at_bias_w": (3, c),
            "at_bias_b": (c,),
        }
        if (m2, two) != (m, 2) or self.ffn_w1.shape[0] != c:
            raise ConfigError("offset generator / FFN shapes inconsistent with projections")
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def heads(self) -> int:
        return self.value_proj.shape[0]

    @property
    def channels(self) -> int:
        return self.value_proj.shape[1]

    @property
    def head_dim(self) -> int:
        return self.value_proj.shape[2]

    @property
    def points(self) -> int:
        return self.off_agent.shape[2]

    @property
    def query_channels(self) -> int:
        return self.off_query.shape[0]

    @property
    def max_agents(self) -> int:
        return self.off_query.shape[1]

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_w1.shape[1]

    @property
    def ffn_is_zero(self) -> bool:
        return not (np.any(self.ffn_w2) or np.any(self.ffn_b2))

    def copy(self) -> MadaParams:
        return MadaParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def with_identity_at(self) -> MadaParams:
        p = self.copy()
        p.at_scale[:] = 1.0
        p.at_bias_w[:] = 0.0
        p.at_bias_b[:] = 0.0
        return p

    def permute_agents(self, order: list[int]) -> MadaParams:
        """Reorder the per-agent blocks of both generators."""
        p = self.copy()
        idx = np.asarray(order)
        n = idx.size
        p.off_query[:, :n] = self.off_query[:, idx]
        p.off_bias[:n] = self.off_bias[idx]
        p.logit_query[:, :n] = self.logit_query[:, idx]
        p.logit_bias[:n] = self.logit_bias[idx]
        return p

    @classmethod
    def zeros(cls, channels: int, heads: int = 4, points: int = 4, max_agents: int = 4,
              query_channels: int | None = None, ffn_hidden: int | None = None) -> MadaParams:
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        c, m, k, n = channels, heads, points, max_agents
        cq = c if query_channels is None else query_channels
        f = 2 * c if ffn_hidden is None else ffn_hidden
        d = c // m
        return cls(
            value_proj=np.zeros((m, c, d)), out_proj=np.zeros((m, d, c)),
            off_query=np.zeros((cq, n, m, k, 2)), off_agent=np.zeros((c, m, k, 2)), off_bias=np.zeros((n, m, k, 2)),
            logit_query=np.zeros((cq, n, m, k)), logit_agent=np.zeros((c, m, k)), logit_bias=np.zeros((n, m, k)),
            ffn_w1=np.zeros((c, f)), ffn_b1=np.zeros(f), ffn_w2=np.zeros((f, c)), ffn_b2=np.zeros(c),
            at_scale=np.ones((len(AGENT_TYPES), c)), at_bias_w=np.zeros((3, c)), at_bias_b=np.zeros(c),
        )

    @classmethod
    def identity(cls, channels: int, heads: int = 4, points: int = 4, max_agents: int = 4, **kw) -> MadaParams:
        """Block-selection projections so that the heads jointly pass channels through."""
        p = cls.zeros(channels, heads, points, max_agents, **kw)
        d = channels // heads
        for m in range(heads):
            for j in range(d):
                p.value_proj[m, m * d + j, j] = 1.0
                p.out_proj[m, j, m * d + j] = 1.0
        return p

    @classmethod
    def seeded(cls, channels: int, heads: int = 4, points: int = 4, max_agents: int = 4, seed: int = 0) -> MadaParams:
        """Untrained initialization: random projections, zero offsets and logits, zero FFN output."""
        rng = np.random.default_rng([seed, 0x3ADA])
        p = cls.zeros(channels, heads, points, max_agents)
        d = channels // heads
        p.value_proj[:] = rng.normal(0.0, 1.0 / math.sqrt(channels), p.value_proj.shape)
        p.out_proj[:] = rng.normal(0.0, 1.0 / math.sqrt(d * heads), p.out_proj.shape)
        p.ffn_w1[:] = rng.normal(0.0, 1.0 / math.sqrt(channels), p.ffn_w1.shape)
        return p

    @classmethod
    def random(cls, channels: int, heads: int, points: int, max_agents: int, rng: np.random.Generator,
               offset_scale: float = 0.3, logit_scale: float = 0.5, ffn: bool = True,
               query_channels: int | None = None, at: bool = True) -> MadaParams:
        """Fully random parameters, for verification."""
        p = cls.zeros(channels, heads, points, max_agents, query_channels=query_channels)
        for name in ("value_proj", "out_proj"):
            getattr(p, name)[:] = rng.normal(0.0, 0.5, getattr(p, name).shape)
        for name in ("off_query", "off_agent"):
            getattr(p, name)[:] = rng.normal(0.0, offset_scale, getattr(p, name).shape)
        p.off_bias[:] = rng.uniform(-1.5, 1.5, p.off_bias.shape)
        for name in ("logit_query", "logit_agent", "logit_bias"):
            getattr(p, name)[:] = rng.normal(0.0, logit_scale, getattr(p, name).shape)
        if ffn:
            for name in ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
                getattr(p, name)[:] = rng.normal(0.0, 0.3, getattr(p, name).shape)
        if at:
            p.at_scale[:] = rng.uniform(0.5, 1.5, p.at_scale.shape)
            p.at_bias_w[:] = rng.normal(0.0, 0.2, p.at_bias_w.shape)
            p.at_bias_b[:] = rng.normal(0.0, 0.2, p.at_bias_b.shape)
        return p

    @classmethod
    def analytic(cls, channels: int, heads: int = 4, points: int = 4, max_agents: int = 4,
                 objectness_channel: int = 0, gain: float = 2.0, delay_penalty: float = 50.0) -> MadaParams:
        """Training-free preset for the analytic backbone.

        Attention prefers whichever agent reports the highest objectness at
        the reference point, and the align transform lowers the objectness
        of delayed inputs by ``delay_penalty`` per second of delay.
        """
        p = cls.identity(channels, heads, points, max_agents)
        p.logit_agent[objectness_channel] = gain
        p.at_bias_w[2, objectness_channel] = -delay_penalty
        return p

    # -- serialization -------------------------------------------------
    _MAGIC = b"CMDP"
    _VERSION = 1
    _HEAD = struct.Struct("<4sBHHHHHH")

    def to_bytes(self) -> bytes:
        header = self._HEAD.pack(
            self._MAGIC, self._VERSION, self.heads, self.points, self.channels,
            self.query_channels, self.max_agents, self.ffn_hidden,
        )
        body = header + b"".join(getattr(self, f.name).astype("<f8").tobytes() for f in fields(self))
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> MadaParams:
        head = cls._HEAD
        if len(blob) < head.size + 4:
            raise ProtocolError("truncated parameter blob", len(blob))
        if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
            raise ProtocolError("parameter blob checksum mismatch", len(blob) - 4)
        magic, version, m, k, c, cq, n, f = head.unpack_from(blob, 0)
        if magic != cls._MAGIC:
            raise ProtocolError(f"bad parameter magic {magic!r}", 0)
        if version != cls._VERSION:
            raise ProtocolError(f"unsupported parameter version {version}", 4)
        template = cls.zeros(c, m, k, n, query_channels=cq, ffn_hidden=f)
        offset = head.size
        arrays = {}
        for fl in fields(cls):
            shape = getattr(template, fl.name).shape
            count = int(np.prod(shape))
            if offset + 8 * count > len(blob) - 4:
                raise ProtocolError(f"truncated array {fl.name}", offset)
            arrays[fl.name] = np.frombuffer(blob, "<f8", count, offset).reshape(shape).copy()
            offset += 8 * count
        if offset != len(blob) - 4:
            raise ProtocolError("trailing bytes in parameter blob", offset)
        return cls(**arrays)


@dataclass
class FusionOutput:
    fused: FeatureGrid
    num_inputs: int
    agent_order: list[int] = field(default_factory=list)
    locations: np.ndarray | None = None
    weights: np.ndarray | None = None


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def align_transform(features: list[FeatureGrid], metas: list[AgentMeta], params: MadaParams) -> list[FeatureGrid]:
    """Per-agent channel scale from the agent type plus channel bias from continuous metadata."""
    if len(features) != len(metas):
        raise ConfigError(f"{len(features)} feature grids but {len(metas)} metas")
    out = []
    for grid, meta in zip(features, metas):
        if grid.channels != params.channels:
            raise ConfigError(f"grid has {grid.channels} channels, parameters expect {params.channels}")
        scale = params.at_scale[meta.type_index]
        bias = meta.continuous @ params.at_bias_w + params.at_bias_b
        out.append(grid.with_data(grid.data * scale + bias))
    return out


def _stack(agents: list[FeatureGrid] | np.ndarray) -> np.ndarray:
    if isinstance(agents, np.ndarray):
        return agents
    return np.stack([a.data for a in agents])


def _softmax_over_samples(logits: np.ndarray) -> np.ndarray:
    """Softmax over (agent, point) of logits shaped (Q, N, M, K)."""
    q, n, m, k = logits.shape
    z = logits.transpose(0, 2, 1, 3).reshape(q, m, n * k)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=-1, keepdims=True)
    return a.reshape(q, m, n, k).transpose(0, 2, 1, 3)


def generate(params: MadaParams, queries: np.ndarray, ref_points: np.ndarray, agents) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampling offsets (Q, N, M, K, 2), attention logits (Q, N, M, K) and the reference samples (N, Q, C)."""
    x = _stack(agents)
    n = x.shape[0]
    if n > params.max_agents:
        raise ConfigError(f"{n} agents exceed the {params.max_agents} parameter slots")
    if queries.shape[1] != params.query_channels:
        raise ConfigError(f"queries have {queries.shape[1]} channels, parameters expect {params.query_channels}")
    ref = np.stack([sample_many(x[i], ref_points[:, 0], ref_points[:, 1]) for i in range(n)])
    offsets = (
        np.tensordot(queries, params.off_query[:, :n], axes=1)
        + np.moveaxis(np.tensordot(ref, params.off_agent, axes=1), 0, 1)
        + params.off_bias[:n]
    )
    logits = (
        np.tensordot(queries, params.logit_query[:, :n], axes=1)
        + np.moveaxis(np.tensordot(ref, params.logit_agent, axes=1), 0, 1)
        + params.logit_bias[:n]
    )
    return offsets, logits, ref


@dataclass
class _Cache:
    weights: np.ndarray  # (Q, N, M, K)
    locations: np.ndarray  # (Q, N, M, K, 2)
    samples: np.ndarray  # (Q, N, M, K, C)
    values: np.ndarray  # (Q, N, M, K, d)
    aggregate: np.ndarray  # (Q, M, d)
    projected: np.ndarray  # (Q, C)
    hidden: np.ndarray | None  # FFN pre-activation (Q, F)


def aggregate(params: MadaParams, ref_points: np.ndarray, agents, offsets: np.ndarray, logits: np.ndarray,
              *, return_cache: bool = False):
    """Attention read-out given explicit offsets and logits; returns (Q, C)."""
    x = _stack(agents)
    n = x.shape[0]
    weights = _softmax_over_samples(logits)
    total = weights.sum(axis=(1, 3))
    assert np.all(np.abs(total - 1.0) <= NORMALIZATION_TOL), "attention weights not normalized"
    locations = ref_points[:, None, None, None, :] + offsets
    samples = np.stack([sample_many(x[i], locations[:, i, ..., 0], locations[:, i, ..., 1]) for i in range(n)], axis=1)
    q, _, m, k, c = samples.shape
    # batched per-head matmul; same contraction as einsum("qnmkc,mcd->qnmkd")
    values = np.matmul(samples.transpose(2, 0, 1, 3, 4).reshape(m, -1, c), params.value_proj)
    values = values.reshape(m, q, n, k, -1).transpose(1, 2, 0, 3, 4)
    agg = (weights[..., None] * values).sum(axis=(1, 3))
    projected = np.einsum("qmd,mdc->qc", agg, params.out_proj)
    hidden = None
    if params.ffn_is_zero:
        out = projected
    else:
        hidden = projected @ params.ffn_w1 + params.ffn_b1
        out = projected + gelu(hidden) @ params.ffn_w2 + params.ffn_b2
    if return_cache:
        return out, _Cache(weights, locations, samples, values, agg, projected, hidden)
    return out


def mada(queries: FeatureGrid | np.ndarray, ref_points: np.ndarray, agents: list[FeatureGrid],
         params: MadaParams, *, diagnostics: bool = False):
    """Deformable multi-agent attention for a set of queries.

    ``queries`` is a grid (one query per cell, flattened row-major) or a
    (Q, Cq) array; ``ref_points`` is (Q, 2) in (row, col) cell units. Returns
    a (Q, C) array, plus (locations, weights) when ``diagnostics`` is set.
    """
    z = queries.data.reshape(-1, queries.channels) if isinstance(queries, FeatureGrid) else np.asarray(queries, np.float64)
    ref_points = np.asarray(ref_points, dtype=np.float64)
    x = _stack(agents)
    if x.ndim != 4 or x.shape[-1] != params.channels:
        raise ConfigError(f"agent grids must be (H, W, {params.channels}), got {x.shape[1:]}")
    if ref_points.shape != (z.shape[0], 2):
        raise ConfigError(f"ref_points must be ({z.shape[0]}, 2), got {ref_points.shape}")
    offsets, logits, _ = generate(params, z, ref_points, x)
    out, cache = aggregate(params, ref_points, x, offsets, logits, return_cache=True)
    if diagnostics:
        return out, cache.locations, cache.weights
    return out


@dataclass
class MadaGradients:
    queries: np.ndarray  # (Q, Cq)
    agents: np.ndarray  # (N, H, W, C)
    offsets: np.ndarray  # (Q, N, M, K, 2), partial w.r.t. generated offsets
    logits: np.ndarray  # (Q, N, M, K), partial w.r.t. generated logits


def _sample_backward(data: np.ndarray, rows: np.ndarray, cols: np.ndarray, grad_out: np.ndarray):
    """Adjoint of bilinear sampling: gradients w.r.t. the grid and the coordinates."""
    h, w, c = data.shape
    index, weight = bilinear_corners(rows, cols, h, w)
    table = padded_table(data)
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr, fc = rows - r0, cols - c0
    dw_dr = np.stack([-(1 - fc), -fc, 1 - fc, fc], axis=-1)
    dw_dc = np.stack([-(1 - fr), 1 - fr, -fr, fr], axis=-1)
    corner_dot = np.einsum("...jc,...c->...j", table[index], grad_out)
    g_rows = (dw_dr * corner_dot).sum(axis=-1)
    g_cols = (dw_dc * corner_dot).sum(axis=-1)
    g_table = np.zeros((h * w + 1, c))
    contrib = weight[..., None] * grad_out[..., None, :]
    np.add.at(g_table, index.reshape(-1), contrib.reshape(-1, c))
    return g_table[: h * w].reshape(h, w, c), g_rows, g_cols


def mada_gradient(params: MadaParams, queries: np.ndarray, ref_points: np.ndarray, agents,
                  upstream: np.ndarray) -> MadaGradients:
    """Reverse-mode gradients of ``sum(upstream * mada(...))``."""
    z = np.asarray(queries, dtype=np.float64)
    ref_points = np.asarray(ref_points, dtype=np.float64)
    x = _stack(agents)
    n = x.shape[0]
    g = np.asarray(upstream, dtype=np.float64)
    offsets, logits, ref = generate(params, z, ref_points, x)
    _, cache = aggregate(params, ref_points, x, offsets, logits, return_cache=True)

    g_proj = g
    if cache.hidden is not None:
        g_proj = g + ((g @ params.ffn_w2.T) * gelu_grad(cache.hidden)) @ params.ffn_w1.T
    g_agg = np.einsum("qc,mdc->qmd", g_proj, params.out_proj)
    g_weights = np.einsum("qmd,qnmkd->qnmk", g_agg, cache.values)
    g_values = cache.weights[..., None] * g_agg[:, None, :, None, :]
    g_samples = np.einsum("qnmkd,mcd->qnmkc", g_values, params.value_proj)

    # softmax adjoint, jointly over (agent, point)
    inner = (cache.weights * g_weights).sum(axis=(1, 3), keepdims=True)
    g_logits = cache.weights * (g_weights - inner)

    g_x = np.zeros_like(x)
    g_offsets = np.zeros_like(offsets)
    for i in range(n):
        loc = cache.locations[:, i]
        gx, gr, gc = _sample_backward(x[i], loc[..., 0], loc[..., 1], g_samples[:, i])
        g_x[i] += gx
        g_offsets[:, i, ..., 0] = gr
        g_offsets[:, i, ..., 1] = gc

    g_z = (np.einsum("qnmkt,cnmkt->qc", g_offsets, params.off_query[:, :n])
           + np.einsum("qnmk,cnmk->qc", g_logits, params.logit_query[:, :n]))
    g_ref = (np.einsum("qnmkt,cmkt->nqc", g_offsets, params.off_agent)
             + np.einsum("qnmk,cmk->nqc", g_logits, params.logit_agent))
    for i in range(n):
        gx, _, _ = _sample_backward(x[i], ref_points[:, 0], ref_points[:, 1], g_ref[i])
        g_x[i] += gx
    return MadaGradients(g_z, g_x, g_offsets, g_logits)


def cell_reference_points(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=-1)


def ustf_step(
    ego_feature: FeatureGrid,
    reconstructed: dict[int, FeatureGrid],
    bank: MemoryBank,
    ego_pose: Pose,
    frame: int,
    metas: dict[int, AgentMeta],
    params: MadaParams,
    *,
    ego_id: int = 0,
    frame_period: float = 0.1,
    temporal: bool = True,
    use_at: bool = True,
    diagnostics: bool = False,
) -> FusionOutput:
    """One recurrent fusion step in the ego frame.

    ``reconstructed`` maps collaborator ids to grids already warped into the
    ego frame. With ``temporal`` on and a fused slot present, the previous
    fused grid is projected to ``ego_pose`` and appended as a delayed agent.
    The result is written back to the bank's fused slot.
    """
    order = [ego_id] + sorted(a for a in reconstructed if a != ego_id)
    grids = [ego_feature] + [reconstructed[a] for a in order[1:]]
    agent_metas = [metas[a] for a in order]
    history = bank.get_fused() if temporal else None
    if history is not None:
        grids.append(warp_to_frame(history.grid, history.pose, ego_pose, ego_feature.spec))
        ego_meta = metas[ego_id]
        delay = (frame - history.frame) * frame_period
        agent_metas.append(AgentMeta(ego_meta.agent_type, ego_meta.speed, 0.0, delay))
        order.append(-1)
    for g in grids:
        if g.data.shape != ego_feature.data.shape:
            raise ConfigError(f"fusion input shape {g.data.shape} != ego shape {ego_feature.data.shape}")
    at_params = params if use_at else params.with_identity_at()
    aligned = align_transform(grids, agent_metas, at_params)
    h, w, c = ego_feature.data.shape
    result = mada(aligned[0], cell_reference_points(h, w), aligned, params, diagnostics=diagnostics)
    locations = weights = None
    if diagnostics:
        result, locations, weights = result
    fused = ego_feature.with_data(result.reshape(h, w, c))
    bank.put_fused(fused, ego_pose, frame)
    return FusionOutput(fused, len(grids), order, locations, weights)

