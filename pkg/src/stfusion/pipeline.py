"""Per-frame driver: rasterize, transmit, reconstruct, fuse, detect, evaluate."""

from __future__ import annotations

import contextlib
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detection import RANGE_BUCKETS, DetectionBox, DetectionHead, EvalResult, detect, evaluate_ap, nms, write_records
from .errors import ConfigError, RunError, StfusionError
from .fusion import AgentMeta, MadaParams, ustf_step
from .grid import FeatureGrid, Pose, warp_to_frame
from .memory import MemoryBank
from .stt import ReconNet, SttConfig, comm_volume, reconstruct, select_all, select_tokens, select_under_budget, transmission_mask
from .wire import SparseTokenSet, decode_tokens, encode_tokens, quantize_pose
from .world import (
    DROP_STREAM, POSE_STREAM, NoiseSpec, Scenario, collaborative_ground_truth, drop_tokens, inject_pose_noise,
    keyed_rng, load_scenario, rasterize_features, stale_frame,
)

MODES = ("dense-baseline", "stt", "no-fusion", "late-fusion")
MADA_PRESETS = ("analytic", "seeded")

CSV_COLUMNS = (
    "frame", "mode", "interval", "comm_log2mb", "total_tokens", "tokens_per_agent", "bytes", "fusion_inputs",
    "n_gt", "n_det", "ap05", "ap07",
    "short_ap05", "short_ap07", "middle_ap05", "middle_ap07", "long_ap05", "long_ap07",
)


@dataclass(frozen=True)
class RunConfig:
    """Everything one simulation run depends on.

    ``recon`` defaults to a zero-parameter refinement network. ``budget_bytes``
    switches the sender from thresholding to best-cells-under-budget.
    """

    scenario: Scenario | str | Path
    stt: SttConfig = field(default_factory=SttConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    mode: str = "stt"
    mada_preset: str = "analytic"
    mada_seed: int = 0
    recon: ReconNet | None = None
    temporal: bool = True
    use_at: bool = True
    budget_bytes: int | None = None
    score_thr: float = 0.6
    nms_iou: float = 0.1
    ego_id: int = 0
    out_dir: str | Path | None = None
    keep_fused: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mada_preset not in MADA_PRESETS:
            raise ConfigError(f"mada preset must be one of {MADA_PRESETS}, got {self.mada_preset!r}")
        if isinstance(self.scenario, (str, Path)) and not Path(self.scenario).is_file():
            raise ConfigError(f"scenario file {self.scenario} does not exist")
        if self.budget_bytes is not None and self.budget_bytes < 0:
            raise ConfigError("budget must be >= 0")

    def load(self) -> Scenario:
        return self.scenario if isinstance(self.scenario, Scenario) else load_scenario(self.scenario)


@dataclass
class FrameRow:
    frame: int
    mode: str
    interval: int
    tokens: dict[int, int]
    bytes: int
    fusion_inputs: int
    evaluation: EvalResult
    stale: dict[int, int] = field(default_factory=dict)
    channels: int = 1

    @property
    def total_tokens(self) -> int:
        return sum(self.tokens.values())

    @property
    def comm_log2mb(self) -> float | None:
        return comm_volume(self.total_tokens, self.channels) if self.tokens else None

    def csv_row(self) -> list:
        ev = self.evaluation
        row = [
            self.frame, self.mode, self.interval, _fmt(self.comm_log2mb), self.total_tokens,
            ";".join(f"{a}:{n}" for a, n in sorted(self.tokens.items())), self.bytes, self.fusion_inputs,
            ev.num_gt, ev.num_det, _fmt(ev.ap_05), _fmt(ev.ap_07),
        ]
        for name in RANGE_BUCKETS:
            b = ev.buckets.get(name, {})
            row += [_fmt(b.get("ap_05")), _fmt(b.get("ap_07"))]
        return row


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class RunResult:
    mode: str
    rows: list[FrameRow]
    messages: list[dict]
    dense_cells_per_frame: int
    wall_time: float = 0.0
    fused: dict[int, FeatureGrid] = field(default_factory=dict)
    detections: dict[int, list[DetectionBox]] = field(default_factory=dict)
    ground_truth: dict[int, list[DetectionBox]] = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.rows)

    @property
    def total_tokens(self) -> int:
        return sum(r.total_tokens for r in self.rows)

    @property
    def mean_tokens(self) -> float:
        return self.total_tokens / len(self.rows) if self.rows else 0.0

    @property
    def dense_fraction(self) -> float | None:
        """Transmitted cells over the cells a dense link would have sent."""
        if not self.dense_cells_per_frame or not self.rows:
            return None
        return self.total_tokens / (self.dense_cells_per_frame * len(self.rows))

    @property
    def mean_comm_log2mb(self) -> float | None:
        channels = self.rows[0].channels if self.rows else 1
        mean = self.mean_tokens
        return math.log2(mean * channels * 16 / (8 * 2**20)) if mean > 0 else None

    def mean_ap(self, bucket: str | None = None, thr: str = "ap_05") -> float | None:
        if bucket is None:
            return _mean(getattr(r.evaluation, thr) for r in self.rows)
        return _mean(r.evaluation.buckets[bucket][thr] for r in self.rows)

    def aggregates(self) -> dict:
        out = {"overall": {"ap_05": self.mean_ap(None, "ap_05"), "ap_07": self.mean_ap(None, "ap_07")}}
        for name in RANGE_BUCKETS:
            out[name] = {"ap_05": self.mean_ap(name, "ap_05"), "ap_07": self.mean_ap(name, "ap_07")}
        return out

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "frames_evaluated": len(self.rows),
            "total_bytes": self.total_bytes,
            "total_tokens": self.total_tokens,
            "mean_tokens_per_frame": self.mean_tokens,
            "dense_cells_per_frame": self.dense_cells_per_frame,
            "dense_fraction": self.dense_fraction,
            "mean_comm_log2mb": self.mean_comm_log2mb,
            "mean_ap": self.aggregates(),
            "messages": self.messages,
        }


def write_outputs(result: RunResult, out_dir: str | Path, extra: dict | None = None) -> None:
    """frames.csv, summary.json and detection records; wall time goes to timing.json only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "frames.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in result.rows:
            writer.writerow(row.csv_row())
    summary = result.summary()
    if extra:
        summary = {"config": extra, **summary}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_records(out / "detections.jsonl", result.detections)
    write_records(out / "ground_truth.jsonl", result.ground_truth)
    (out / "timing.json").write_text(json.dumps({"wall_time_s": result.wall_time}) + "\n")


def describe(config: RunConfig) -> dict:
    """JSON-friendly description of a run configuration."""
    scenario = config.scenario if isinstance(config.scenario, (str, Path)) else "<in-memory>"
    return {
        "scenario": str(scenario),
        "mode": config.mode,
        "stt": asdict(config.stt),
        "noise": asdict(config.noise),
        "mada_preset": config.mada_preset,
        "mada_seed": config.mada_seed,
        "temporal": config.temporal,
        "use_at": config.use_at,
        "budget_bytes": config.budget_bytes,
        "score_thr": config.score_thr,
        "nms_iou": config.nms_iou,
    }


@contextlib.contextmanager
def _context(frame: int, agent: int | None):
    try:
        yield
    except RunError:
        raise
    except StfusionError as exc:
        where = f"frame {frame}" + ("" if agent is None else f", agent {agent}")
        raise RunError(f"{where}: {exc}") from exc


@dataclass
class _Sender:
    """Collaborator-side state: its outbox and a mirror of what the ego reconstructs."""

    mirror: FeatureGrid | None = None
    mirror_pose: Pose | None = None
    outbox: list[tuple[int, bytes]] = field(default_factory=list)


def _to_local(box: DetectionBox, pose: Pose) -> DetectionBox:
    x, y = pose.to_local(np.array([box.x, box.y]))
    return DetectionBox(float(x), float(y), box.length, box.width, box.yaw - pose.yaw, box.score)


def _to_world(box: DetectionBox, pose: Pose) -> DetectionBox:
    x, y = pose.to_world(np.array([box.x, box.y]))
    return DetectionBox(float(x), float(y), box.length, box.width, box.yaw + pose.yaw, box.score)


def run(config: RunConfig) -> RunResult:
    """Simulate every processed frame (stride ``tau``) and evaluate the ego detections."""
    started = time.perf_counter()
    scenario = config.load()
    ego_id = config.ego_id
    if ego_id not in scenario.agent_ids:
        raise ConfigError(f"ego {ego_id} is not an agent of the scenario")
    collaborators = [a for a in scenario.agent_ids if a != ego_id]
    spec = scenario.grid
    period = scenario.frame_period
    tau = config.stt.tau
    noise = config.noise
    head = DetectionHead.analytic(spec.channels)
    phi = head.classifier  # saliency and detection share this instance
    if head.classifier is not phi:
        raise RunError("classification head is not shared between transmission and detection")
    net = config.recon if config.recon is not None else ReconNet.zeros(spec.channels)
    n_slots = len(scenario.agents) + 1
    if config.mada_preset == "analytic":
        params = MadaParams.analytic(spec.channels, max_agents=n_slots)
    else:
        params = MadaParams.seeded(spec.channels, max_agents=n_slots, seed=config.mada_seed)
    bank = MemoryBank()
    senders = {a: _Sender() for a in collaborators}
    consumed = {a: 0 for a in collaborators}
    local_boxes: dict[tuple[int, int], list[DetectionBox]] = {}
    latency = {
        a: (noise.latency_ms if noise.latency_ms is not None else scenario.agent(a).latency * 1000.0)
        for a in collaborators
    }
    fusing = config.mode in ("dense-baseline", "stt")
    result = RunResult(config.mode, [], [], len(collaborators) * spec.num_cells if fusing else 0)
    processed: list[int] = []

    for t in range(0, scenario.frames, tau):
        processed.append(t)
        features: dict[int, FeatureGrid] = {}
        for a in scenario.agent_ids:
            with _context(t, a):
                features[a], _ = rasterize_features(scenario, a, t)
        ego_pose = scenario.agent(ego_id).poses[t]
        gt = collaborative_ground_truth(scenario, t, ego_id)
        tokens_sent: dict[int, int] = {}
        bytes_sent = 0
        fusion_inputs = 1
        stale: dict[int, int] = {}

        if config.mode == "no-fusion":
            with _context(t, ego_id):
                dets = detect(features[ego_id], head, ego_pose, config.score_thr, config.nms_iou)

        elif config.mode == "late-fusion":
            with _context(t, None):
                for a in scenario.agent_ids:
                    own = scenario.agent(a).poses[t]
                    boxes = detect(features[a], head, own, config.score_thr, config.nms_iou)
                    local_boxes[(a, t)] = [_to_local(b, own) for b in boxes]
                merged = [_to_world(b, ego_pose) for b in local_boxes[(ego_id, t)]]
                for a in collaborators:
                    s = _latest(processed, stale_frame(a, t, latency[a], period))
                    stale[a] = s
                    shared = inject_pose_noise(scenario.agent(a).poses[s], noise, keyed_rng(noise.seed, POSE_STREAM, a, s))
                    merged += [_to_world(b, shared) for b in local_boxes[(a, s)]]
                dets = nms(merged, config.nms_iou)
            fusion_inputs = len(scenario.agents)

        else:
            # senders
            for a in collaborators:
                with _context(t, a):
                    msg, count = _send(config, senders[a], features[a], phi, net, a, t,
                                       scenario.agent(a).poses[t], noise)
                    if msg is not None:
                        senders[a].outbox.append((t, msg))
                        tokens_sent[a] = count
                        bytes_sent += len(msg)
                        result.messages.append({
                            "frame": t, "sender": a, "entries": count, "bytes": len(msg),
                            "comm_log2mb": comm_volume(count, spec.channels),
                        })
                    else:
                        tokens_sent[a] = 0
            # ego receiver
            warped: dict[int, FeatureGrid] = {}
            metas = {ego_id: _meta(scenario, ego_id, t, 0.0)}
            for a in collaborators:
                with _context(t, a):
                    target = stale_frame(a, t, latency[a], period)
                    box = senders[a].outbox
                    while consumed[a] < len(box) and box[consumed[a]][0] <= target:
                        frame, msg = box[consumed[a]]
                        consumed[a] += 1
                        _receive(config, bank, net, a, frame, msg, noise, spec)
                    slot = bank.get(a)
                    if slot is None:
                        continue
                    stale[a] = slot.frame
                    warped[a] = warp_to_frame(slot.grid, slot.pose, ego_pose, spec)
                    metas[a] = _meta(scenario, a, slot.frame, (t - slot.frame) * period)
            with _context(t, ego_id):
                out = ustf_step(features[ego_id], warped, bank, ego_pose, t, metas, params, ego_id=ego_id,
                                frame_period=period, temporal=config.temporal, use_at=config.use_at)
                fusion_inputs = out.num_inputs
                if config.keep_fused:
                    result.fused[t] = out.fused
                dets = detect(out.fused, head, ego_pose, config.score_thr, config.nms_iou)

        # evaluation covers the ego grid footprint, as the ground truth does
        dets = [b for b in dets if spec.contains_local(ego_pose.to_local(np.array([b.x, b.y])))]
        evaluation = evaluate_ap(dets, gt, (ego_pose.x, ego_pose.y))
        result.detections[t] = dets
        result.ground_truth[t] = gt
        result.rows.append(FrameRow(t, config.mode, tau, tokens_sent, bytes_sent, fusion_inputs, evaluation,
                                    stale, spec.channels))

    result.wall_time = time.perf_counter() - started
    if config.out_dir is not None:
        write_outputs(result, config.out_dir, describe(config))
    return result


def _latest(processed: list[int], frame: int) -> int:
    """Most recent processed frame not after ``frame``."""
    return max(f for f in processed if f <= frame)


def _meta(scenario: Scenario, agent_id: int, frame: int, latency: float) -> AgentMeta:
    agent = scenario.agent(agent_id)
    return AgentMeta(agent.type, agent.speed(frame, scenario.frame_period), latency, 0.0)


def _send(config: RunConfig, state: _Sender, features: FeatureGrid, phi, net: ReconNet, agent_id: int, frame: int,
          pose: Pose, noise: NoiseSpec) -> tuple[bytes | None, int]:
    """Build, encode and mirror one collaborator message. Returns (bytes or None, entry count)."""
    shared = inject_pose_noise(pose, noise, keyed_rng(noise.seed, POSE_STREAM, agent_id, frame))
    if config.mode == "dense-baseline":
        tokens = select_all(features, sender_id=agent_id, frame=frame, pose=shared)
        return encode_tokens(tokens), len(tokens)
    true_pose = quantize_pose(pose)
    history = None
    if state.mirror is not None:
        history = warp_to_frame(state.mirror, state.mirror_pose, true_pose)
    _, _, mask = transmission_mask(features, phi, config.stt.rho, history)
    if config.budget_bytes is None:
        tokens = select_tokens(features, mask, config.stt.threshold, sender_id=agent_id, frame=frame, pose=true_pose)
    else:
        tokens, _ = select_under_budget(features, mask, config.budget_bytes, sender_id=agent_id, frame=frame,
                                        pose=true_pose)
        if len(tokens) == 0:
            return None, 0
    state.mirror = reconstruct(tokens, state.mirror, state.mirror_pose, None, net,
                               resolution=features.resolution, origin=features.origin)
    state.mirror_pose = tokens.sender_pose
    return encode_tokens(tokens.with_pose(shared)), len(tokens)


def _receive(config: RunConfig, bank: MemoryBank, net: ReconNet, agent_id: int, frame: int, msg: bytes,
             noise: NoiseSpec, spec) -> None:
    tokens: SparseTokenSet = decode_tokens(msg)
    if tokens.sender_id != agent_id or tokens.timestamp != frame:
        raise RunError(f"message header says sender {tokens.sender_id} frame {tokens.timestamp}")
    tokens = drop_tokens(tokens, noise.token_drop_prob, keyed_rng(noise.seed, DROP_STREAM, agent_id, frame))
    slot = bank.get(agent_id)
    if config.mode == "dense-baseline":
        grid = FeatureGrid(tokens.dense_values(), spec.resolution, spec.origin)
    else:
        grid = reconstruct(tokens, slot.grid if slot else None, slot.pose if slot else None, None, net,
                           resolution=spec.resolution, origin=spec.origin)
    bank.put(agent_id, grid, tokens.sender_pose, frame)
