"""Deterministic scenarios, the analytic feature backbone and fault injectors.

The analytic backbone writes, for every cell covered by a visible object,
an objectness logit of +5 in channel 0 and the box parameters in channels
1..6 (dx, dy, log length, log width, sin yaw, cos yaw); all other cells get
-5 in channel 0. Offsets and headings are expressed in world-aligned axes
so the features stay valid after rigid resampling into another frame.
Channels from 7 on carry small seeded noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .detection import DetectionBox
from .errors import ConfigError, ScenarioError
from .fusion import AGENT_TYPES
from .grid import FeatureGrid, GridSpec, Pose, wrap_angle
from .wire import SparseTokenSet

OBJECT_LOGIT = 5.0
FEATURE_CHANNELS = 7
SCENARIO_FORMAT = "stfusion-scenario"
SCENARIO_VERSION = 1

# stream tags for the keyed random generators
RASTER_STREAM = 11
POSE_STREAM = 23
DROP_STREAM = 37


def keyed_rng(seed: int, stream: int, agent: int, frame: int) -> np.random.Generator:
    """Independent generator per (seed, stream, agent, frame); call order never matters."""
    return np.random.default_rng([int(seed), int(stream), int(agent), int(frame)])


@dataclass(frozen=True)
class AgentTrack:
    id: int
    type: str
    poses: tuple[Pose, ...]
    sensing_range: float
    latency: float = 0.0  # seconds

    def speed(self, frame: int, period: float) -> float:
        """Planar speed from neighbouring poses (m/s)."""
        if len(self.poses) < 2:
            return 0.0
        a, b = (frame - 1, frame) if frame > 0 else (0, 1)
        pa, pb = self.poses[a], self.poses[b]
        return math.hypot(pb.x - pa.x, pb.y - pa.y) / period


@dataclass(frozen=True)
class ObjectTrack:
    id: int
    motion: str
    poses: tuple[Pose, ...]
    length: float
    width: float
    speed: float = 0.0
    yaw_rate: float = 0.0

    def box(self, frame: int) -> DetectionBox:
        p = self.poses[frame]
        return DetectionBox(p.x, p.y, self.length, self.width, p.yaw, 1.0)


@dataclass(frozen=True)
class Scenario:
    grid: GridSpec
    frame_period: float
    frames: int
    agents: tuple[AgentTrack, ...]
    objects: tuple[ObjectTrack, ...]
    seed: int = 0
    feature_noise: float = 0.05
    occlusion: bool = False

    def __post_init__(self) -> None:
        if self.grid.channels < FEATURE_CHANNELS:
            raise ScenarioError(f"analytic backbone needs >= {FEATURE_CHANNELS} channels, got {self.grid.channels}")
        if self.frames < 1 or not self.frame_period > 0:
            raise ScenarioError("frames must be >= 1 and frame_period > 0")
        if not self.agents:
            raise ScenarioError("scenario needs at least one agent")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids) or min(ids) < 0:
            raise ScenarioError("agent ids must be unique and non-negative")
        for track in (*self.agents, *self.objects):
            if len(track.poses) != self.frames:
                raise ScenarioError(f"track {track.id} has {len(track.poses)} poses, expected {self.frames}")
        for a in self.agents:
            if a.type not in AGENT_TYPES:
                raise ScenarioError(f"unknown agent type {a.type!r}")
            if not a.sensing_range > 0 or a.latency < 0:
                raise ScenarioError(f"agent {a.id}: sensing range must be > 0 and latency >= 0")
        for o in self.objects:
            if o.motion not in ("static", "linear", "turning"):
                raise ScenarioError(f"object {o.id}: unknown motion {o.motion!r}")
            if o.motion == "static" and any(p != o.poses[0] for p in o.poses):
                raise ScenarioError(f"static object {o.id} moves")
            if not (o.length > 0 and o.width > 0):
                raise ScenarioError(f"object {o.id}: sizes must be positive")

    def agent(self, agent_id: int) -> AgentTrack:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise ScenarioError(f"no agent {agent_id}")

    @property
    def agent_ids(self) -> list[int]:
        return [a.id for a in self.agents]


@dataclass(frozen=True)
class ScenarioConfig:
    height: int = 64
    width: int = 64
    channels: int = 32
    resolution: float = 1.0
    frame_period: float = 0.1
    frames: int = 10
    num_vehicles: int = 3  # including the ego
    num_infrastructure: int = 0
    vehicle_speed: tuple[float, float] = (0.0, 8.0)
    collaborator_spread: float = 25.0
    sensing_range: float = 40.0
    latency: float = 0.0
    num_static: int = 10
    num_dynamic: int = 4
    turning_fraction: float = 0.5
    object_speed: tuple[float, float] = (3.0, 10.0)
    yaw_rate: tuple[float, float] = (-0.4, 0.4)
    object_length: tuple[float, float] = (3.8, 5.0)
    object_width: tuple[float, float] = (1.7, 2.1)
    world_half_extent: float = 40.0
    feature_noise: float = 0.05
    occlusion: bool = False

    def __post_init__(self) -> None:
        if self.num_vehicles < 1:
            raise ScenarioError("at least one vehicle (the ego) is required")
        if min(self.num_infrastructure, self.num_static, self.num_dynamic) < 0:
            raise ScenarioError("counts must be >= 0")
        if self.frames < 1 or not self.sensing_range > 0 or not self.frame_period > 0:
            raise ScenarioError("frames >= 1, sensing_range > 0 and frame_period > 0 are required")
        if not 0 <= self.turning_fraction <= 1:
            raise ScenarioError("turning_fraction must be in [0, 1]")
        for name in ("vehicle_speed", "object_speed", "yaw_rate", "object_length", "object_width"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ScenarioError(f"{name}: empty range {lo} > {hi}")
        if self.object_width[0] <= 0 or self.object_length[0] <= 0:
            raise ScenarioError("object sizes must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> ScenarioConfig:
        presets = {
            "default": {},
            "sparse": {"num_static": 2, "num_dynamic": 1},
            "dense": {"num_static": 16, "num_dynamic": 6},
            # collaboration matters: occlusion on, about a fifth of object cells move
            "occluded": {"frames": 20, "num_static": 16, "num_dynamic": 4, "occlusion": True},
        }
        if name not in presets:
            raise ScenarioError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


def _object_poses(x, y, yaw, motion, speed, yaw_rate, frames, period) -> tuple[Pose, ...]:
    poses = []
    for t in range(frames):
        s = t * period
        if motion == "static":
            px, py, pyaw = x, y, yaw
        elif motion == "linear":
            px, py, pyaw = x + speed * s * math.cos(yaw), y + speed * s * math.sin(yaw), yaw
        else:
            pyaw = yaw + yaw_rate * s
            r = speed / yaw_rate
            px = x + r * (math.sin(pyaw) - math.sin(yaw))
            py = y - r * (math.cos(pyaw) - math.cos(yaw))
        poses.append(Pose(px, py, 0.0, 0.0, 0.0, pyaw))
    return tuple(poses)


def _agent_poses(x, y, yaw, speed, frames, period) -> tuple[Pose, ...]:
    return tuple(
        Pose(x + speed * t * period * math.cos(yaw), y + speed * t * period * math.sin(yaw), 0.0, 0.0, 0.0, yaw)
        for t in range(frames)
    )


def generate_scenario(config: ScenarioConfig, seed: int = 0) -> Scenario:
    """Seeded placement of agents and non-overlapping objects.

    The ego (id 0) starts at the origin heading along +x. Raises
    ScenarioError when objects cannot be placed inside the world square.
    """
    rng = np.random.default_rng([int(seed), 0x5CE7])
    half = config.world_half_extent
    if half <= max(config.object_length[1], config.object_width[1]):
        raise ScenarioError(f"world half extent {half} m cannot hold objects of the configured size")
    period, frames = config.frame_period, config.frames
    agents = []
    ego_speed = rng.uniform(*config.vehicle_speed)
    agents.append(AgentTrack(0, "vehicle", _agent_poses(0.0, 0.0, 0.0, ego_speed, frames, period),
                             config.sensing_range, config.latency))
    for i in range(1, config.num_vehicles + config.num_infrastructure):
        r = config.collaborator_spread * math.sqrt(rng.uniform(0.2, 1.0))
        phi = rng.uniform(-math.pi, math.pi)
        infra = i >= config.num_vehicles
        yaw = rng.uniform(-math.pi, math.pi)
        speed = 0.0 if infra else rng.uniform(*config.vehicle_speed)
        poses = _agent_poses(r * math.cos(phi), r * math.sin(phi), yaw, speed, frames, period)
        agents.append(AgentTrack(i, "infrastructure" if infra else "vehicle", poses, config.sensing_range,
                                 config.latency))
    objects: list[ObjectTrack] = []
    placed: list[tuple[float, float, float]] = [(a.poses[0].x, a.poses[0].y, 3.0) for a in agents]
    total = config.num_static + config.num_dynamic
    for oid in range(total):
        length = rng.uniform(*config.object_length)
        width = rng.uniform(*config.object_width)
        radius = 0.5 * math.hypot(length, width)
        for _ in range(1000):
            x, y = rng.uniform(-half + radius, half - radius, size=2)
            if all(math.hypot(x - px, y - py) > radius + pr + 1.0 for px, py, pr in placed):
                break
        else:
            raise ScenarioError(f"could not place object {oid} inside the {2 * half} m world")
        yaw = rng.uniform(-math.pi, math.pi)
        if oid < config.num_static:
            motion, speed, yaw_rate = "static", 0.0, 0.0
        else:
            speed = rng.uniform(*config.object_speed)
            turning = rng.uniform() < config.turning_fraction
            yaw_rate = rng.uniform(*config.yaw_rate) if turning else 0.0
            motion = "turning" if turning and yaw_rate != 0.0 else "linear"
        placed.append((x, y, radius))
        objects.append(ObjectTrack(oid, motion, _object_poses(x, y, yaw, motion, speed, yaw_rate, frames, period),
                                   length, width, speed, yaw_rate))
    spec = GridSpec(config.height, config.width, config.channels, config.resolution)
    return Scenario(spec, period, frames, tuple(agents), tuple(objects), int(seed), config.feature_noise,
                    config.occlusion)


def occlusion_scenario(frames: int = 5, channels: int = 32, size: int = 64, seed: int = 0) -> Scenario:
    """Ego whose view of one car is blocked by a truck, with a collaborator that sees it.

    Object 0 is the truck straight ahead of the ego, object 1 is the hidden
    car behind it and object 2 is a car both agents see. Occlusion is on.
    """
    def still(x, y, yaw=0.0):
        return tuple(Pose(x, y, 0.0, 0.0, 0.0, yaw) for _ in range(frames))

    agents = (
        AgentTrack(0, "vehicle", still(0.0, 0.0), 40.0),
        AgentTrack(1, "vehicle", still(18.0, 16.0, -math.pi / 2), 40.0),
    )
    objects = (
        ObjectTrack(0, "static", still(9.0, 0.0), 8.0, 3.0),
        ObjectTrack(1, "static", still(18.0, 0.0), 4.5, 1.9),
        ObjectTrack(2, "static", still(-6.0, 12.0, 0.5), 4.4, 1.8),
    )
    return Scenario(GridSpec(size, size, channels, 1.0), 0.1, frames, agents, objects, seed, 0.05, True)


# -- visibility and rasterization -------------------------------------------

def _segments_intersect(p, q, a, b) -> bool:
    def orient(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    d1, d2 = orient(a, b, p), orient(a, b, q)
    d3, d4 = orient(p, q, a), orient(p, q, b)
    return (d1 > 0) != (d2 > 0) and (d3 > 0) != (d4 > 0)


def _blocks(box: DetectionBox, start: np.ndarray, end: np.ndarray) -> bool:
    corners = box.corners()
    return any(_segments_intersect(start, end, corners[i], corners[(i + 1) % 4]) for i in range(4))


def visible_objects(scenario: Scenario, agent_id: int, frame: int) -> list[int]:
    """Ids of objects whose centers lie in the agent's sensing range and grid footprint.

    With occlusion on, an object is also hidden when the sight line from
    the agent to its center crosses another object's outline.
    """
    _check_frame(scenario, frame)
    agent = scenario.agent(agent_id)
    pose = agent.poses[frame]
    out = []
    boxes = {o.id: o.box(frame) for o in scenario.objects}
    start = np.array([pose.x, pose.y])
    for o in scenario.objects:
        b = boxes[o.id]
        center = np.array([b.x, b.y])
        if math.hypot(b.x - pose.x, b.y - pose.y) > agent.sensing_range:
            continue
        if not scenario.grid.contains_local(pose.to_local(center)):
            continue
        if scenario.occlusion and any(_blocks(boxes[k], start, center) for k in boxes if k != o.id):
            continue
        out.append(o.id)
    return out


def _check_frame(scenario: Scenario, frame: int) -> None:
    if not 0 <= frame < scenario.frames:
        raise ScenarioError(f"frame {frame} outside [0, {scenario.frames})")


def rasterize_features(scenario: Scenario, agent_id: int, frame: int) -> tuple[FeatureGrid, list[DetectionBox]]:
    """Analytic BEV features in the agent's local frame and its visible ground truth."""
    ids = visible_objects(scenario, agent_id, frame)
    pose = scenario.agent(agent_id).poses[frame]
    spec = scenario.grid
    data = np.zeros((spec.height, spec.width, spec.channels))
    data[..., 0] = -OBJECT_LOGIT
    if spec.channels > FEATURE_CHANNELS and scenario.feature_noise > 0:
        rng = keyed_rng(scenario.seed, RASTER_STREAM, agent_id, frame)
        a = scenario.feature_noise
        data[..., FEATURE_CHANNELS:] = rng.uniform(-a, a, (spec.height, spec.width, spec.channels - FEATURE_CHANNELS))
    centers = pose.to_world(spec.cell_centers())
    boxes = []
    by_id = {o.id: o for o in scenario.objects}
    for oid in ids:
        box = by_id[oid].box(frame)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        dx, dy = box.x - centers[..., 0], box.y - centers[..., 1]
        along, across = -(c * dx + s * dy), -(-s * dx + c * dy)
        covered = (np.abs(along) <= box.length / 2) & (np.abs(across) <= box.width / 2)
        data[covered, 0] = OBJECT_LOGIT
        data[covered, 1] = dx[covered]
        data[covered, 2] = dy[covered]
        data[covered, 3] = math.log(box.length)
        data[covered, 4] = math.log(box.width)
        data[covered, 5] = s
        data[covered, 6] = c
        boxes.append(box)
    return FeatureGrid(data, spec.resolution, spec.origin), boxes


def collaborative_ground_truth(scenario: Scenario, frame: int, ego_id: int = 0) -> list[DetectionBox]:
    """Objects seen by any agent whose centers fall inside the ego grid footprint."""
    seen = set()
    for a in scenario.agents:
        seen.update(visible_objects(scenario, a.id, frame))
    ego = scenario.agent(ego_id).poses[frame]
    out = []
    for o in scenario.objects:
        if o.id not in seen:
            continue
        b = o.box(frame)
        if scenario.grid.contains_local(ego.to_local(np.array([b.x, b.y]))):
            out.append(b)
    return out


# -- fault injection -------------------------------------------------------

def _triple(value, name: str) -> tuple[float, float, float]:
    vals = (float(value),) * 3 if np.ndim(value) == 0 else tuple(float(v) for v in value)
    if len(vals) != 3:
        raise ConfigError(f"{name} needs 1 or 3 values")
    if any(not v >= 0 for v in vals):
        raise ConfigError(f"{name} must be >= 0, got {vals}")
    return vals


@dataclass(frozen=True)
class NoiseSpec:
    """Perturbations of shared messages.

    ``pos_std`` is (x, y, z) in meters and ``rot_std`` (roll, yaw, pitch) in
    radians; scalars apply to all three. ``latency_ms`` overrides every
    agent's scenario latency when set.
    """

    pos_std: float | tuple[float, float, float] = 0.0
    rot_std: float | tuple[float, float, float] = 0.0
    latency_ms: float | None = None
    token_drop_prob: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "pos_std", _triple(self.pos_std, "pos_std"))
        object.__setattr__(self, "rot_std", _triple(self.rot_std, "rot_std"))
        if self.latency_ms is not None and not self.latency_ms >= 0:
            raise ConfigError(f"latency must be >= 0, got {self.latency_ms}")
        if not 0 <= self.token_drop_prob <= 1:
            raise ConfigError(f"drop probability must be in [0, 1], got {self.token_drop_prob}")

    @property
    def pose_noise_free(self) -> bool:
        return not any(self.pos_std) and not any(self.rot_std)


def inject_pose_noise(pose: Pose, spec: NoiseSpec, rng: np.random.Generator) -> Pose:
    """Zero-mean Gaussian perturbation of a shared pose; zero stds return it unchanged."""
    if spec.pose_noise_free:
        return pose
    dx, dy, dz = rng.normal(0.0, spec.pos_std)
    droll, dyaw, dpitch = rng.normal(0.0, spec.rot_std)
    return replace(
        pose,
        x=pose.x + dx, y=pose.y + dy, z=pose.z + dz,
        roll=wrap_angle(pose.roll + droll), pitch=wrap_angle(pose.pitch + dpitch), yaw=wrap_angle(pose.yaw + dyaw),
    )


def stale_frame(agent_id: int, frame: int, latency_ms: float, frame_period: float) -> int:
    """Frame whose message arrives at ``frame`` given the link latency (half frames round up)."""
    if not latency_ms >= 0:
        raise ConfigError(f"latency must be >= 0, got {latency_ms}")
    if not frame_period > 0:
        raise ConfigError(f"frame period must be > 0, got {frame_period}")
    lag = math.floor(latency_ms / 1000.0 / frame_period + 0.5 + 1e-9)
    return max(0, int(frame) - lag)


def drop_tokens(tokens: SparseTokenSet, prob: float, rng: np.random.Generator) -> SparseTokenSet:
    """Keep each entry independently with probability ``1 - prob``."""
    if not 0 <= prob <= 1:
        raise ConfigError(f"drop probability must be in [0, 1], got {prob}")
    if prob == 0:
        return tokens
    keep = rng.random(len(tokens)) >= prob
    return tokens.subset(keep)


# -- scenario files --------------------------------------------------------

def _load_schema() -> dict:
    return json.loads(resources.files("stfusion").joinpath("scenario.schema.json").read_text())


def _pose_list(poses) -> list[list[float]]:
    return [list(p.as_tuple()) for p in poses]


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "format": SCENARIO_FORMAT,
        "version": SCENARIO_VERSION,
        "grid": {"height": s.grid.height, "width": s.grid.width, "channels": s.grid.channels,
                 "resolution": s.grid.resolution},
        "frame_period": s.frame_period,
        "frames": s.frames,
        "seed": s.seed,
        "feature_noise": s.feature_noise,
        "occlusion": s.occlusion,
        "agents": [
            {"id": a.id, "type": a.type, "sensing_range": a.sensing_range, "latency": a.latency,
             "poses": _pose_list(a.poses)}
            for a in s.agents
        ],
        "objects": [
            {"id": o.id, "motion": o.motion, "length": o.length, "width": o.width, "speed": o.speed,
             "yaw_rate": o.yaw_rate, "poses": _pose_list(o.poses)}
            for o in s.objects
        ],
    }


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        jsonschema.validate(doc, _load_schema())
    except jsonschema.ValidationError as exc:
        raise ScenarioError(f"invalid scenario document: {exc.message}") from exc
    g = doc["grid"]

    def poses(items):
        return tuple(Pose(*p) for p in items)

    agents = tuple(
        AgentTrack(a["id"], a["type"], poses(a["poses"]), a["sensing_range"], a["latency"]) for a in doc["agents"]
    )
    objects = tuple(
        ObjectTrack(o["id"], o["motion"], poses(o["poses"]), o["length"], o["width"], o["speed"], o["yaw_rate"])
        for o in doc["objects"]
    )
    spec = GridSpec(g["height"], g["width"], g["channels"], g["resolution"])
    return Scenario(spec, doc["frame_period"], doc["frames"], agents, objects, doc["seed"], doc["feature_noise"],
                    doc["occlusion"])


def save_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=1) + "\n")


def load_scenario(path: str | Path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(doc)

