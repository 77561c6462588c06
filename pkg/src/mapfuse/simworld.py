"""Deterministic crossroad scenario generator and sensor simulator.

Replaces the driving simulator: ground-truth trajectories on a four-way
crossing, a range/FoV/occlusion visibility model via 2D ray casting, and
a configurable noisy detector that emits per-vehicle local maps together
with the candidate features the refinement model consumes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from mapfuse import fedlearn
from mapfuse.fedlearn import FEATURE_DIM, SensorFrame
from mapfuse.fusion import LocalMap, ScoredDetection
from mapfuse.geometry import (
    ObjectState,
    Pose,
    transform_to_local,
    wrap_angle,
)

OCCLUSION_RAYS = 32

_RIGHT_TURN_RADIUS = 4.0
_LEFT_TURN_RADIUS = 8.0


@dataclass(frozen=True)
class SensorSpec:
    """Forward-looking sensor: range (m), FoV wedge (rad), rate (Hz)."""

    range: float = 100.0
    fov: float = math.pi / 2
    frame_rate: float = 20.0

    def __post_init__(self):
        if self.range <= 0.0:
            raise ValueError("range must be positive")
        if not 0.0 < self.fov <= 2 * math.pi:
            raise ValueError("fov must lie in (0, 2*pi]")


@dataclass(frozen=True)
class DetectorNoiseSpec:
    """Error model of the simulated on-board detector.

    miss probability grows linearly with normalized distance and
    occlusion; box noise sigmas scale by (1 + noise_dist_scale * (d/range
    + occlusion)); bias is a constant local-frame offset per vehicle on
    (x, y, z, l, w, h, yaw).  Scores are pre-sigmoid logits, decreasing in
    distance and occlusion; false positives draw low scores.
    """

    miss_prob: float = 0.0
    miss_dist_coeff: float = 0.0
    miss_occl_coeff: float = 0.0
    false_positive_rate: float = 0.0
    center_sigma: float = 0.0
    extent_sigma: float = 0.0
    yaw_sigma: float = 0.0
    noise_dist_scale: float = 0.0
    flip_prob: float = 0.0
    bias: tuple[float, float, float, float, float, float, float] = (
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    )
    score_base: float = 4.0
    score_dist_coeff: float = 3.0
    score_occl_coeff: float = 2.0
    score_sigma: float = 0.0
    fp_score_mean: float = -1.0
    fp_score_sigma: float = 0.5

    def __post_init__(self):
        for p in (self.miss_prob, self.flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        for s in (self.center_sigma, self.extent_sigma, self.yaw_sigma,
                  self.score_sigma, self.fp_score_sigma):
            if s < 0.0:
                raise ValueError("noise sigmas must be non-negative")
        object.__setattr__(self, "bias", tuple(float(b) for b in self.bias))


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 50.5
    frame_rate: float = 20.0
    num_vehicles: int = 5
    num_objects: int = 37
    lane_offset: float = 2.75
    span: float = 220.0
    speed_min: float = 6.0
    speed_max: float = 11.0
    speed_cap: float = 15.0
    turn_prob: float = 0.2
    min_separation: float = 5.0
    max_attempts: int = 300
    sensor: SensorSpec = field(default_factory=SensorSpec)

    def __post_init__(self):
        if self.num_vehicles > self.num_objects:
            raise ValueError("num_vehicles cannot exceed num_objects")
        if self.speed_max >= self.speed_cap:
            raise ValueError("speed_max must stay below the speed cap")
        if self.min_separation <= 0.0:
            raise ValueError("min_separation must be positive")

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))


class _Path:
    """Piecewise line/arc path, evaluated by arc length.

    Beyond the final segment the path extrapolates along the last line.
    """

    def __init__(self, segments):
        self.segments = segments
        self.cum = np.concatenate([[0.0], np.cumsum([s[-1] for s in segments])])

    def eval(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=float)
        xy = np.empty(s.shape + (2,))
        yaw = np.empty(s.shape)
        idx = np.clip(
            np.searchsorted(self.cum, s, side="right") - 1,
            0,
            len(self.segments) - 1,
        )
        for i, seg in enumerate(self.segments):
            m = idx == i
            if not m.any():
                continue
            local = s[m] - self.cum[i]
            if seg[0] == "line":
                _, p0, u, _ = seg
                xy[m] = p0 + local[:, None] * u
                yaw[m] = math.atan2(u[1], u[0])
            else:
                _, center, r, a0, sign, _ = seg
                a = a0 + sign * local / r
                xy[m] = center + r * np.stack([np.cos(a), np.sin(a)], axis=-1)
                yaw[m] = a + sign * math.pi / 2
        return xy, yaw


def _rotate_path(segments, phi):
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    out = []
    for seg in segments:
        if seg[0] == "line":
            _, p0, u, length = seg
            out.append(("line", rot @ p0, rot @ u, length))
        else:
            _, center, r, a0, sign, length = seg
            out.append(("arc", rot @ center, r, a0 + phi, sign, length))
    return out


def _template_path(turn: str, d: float, span: float) -> list:
    """Eastbound approach path in canonical orientation."""
    start = np.array([-span, -d])
    east = np.array([1.0, 0.0])
    if turn == "straight":
        return [("line", start, east, 4.0 * span)]
    if turn == "right":
        r = _RIGHT_TURN_RADIUS
        entry_x = -(d + r)
        in_len = entry_x - (-span)
        center = np.array([entry_x, -(d + r)])
        out_start = np.array([-d, -(d + r)])
        return [
            ("line", start, east, in_len),
            ("arc", center, r, math.pi / 2, -1.0, r * math.pi / 2),
            ("line", out_start, np.array([0.0, -1.0]), 4.0 * span),
        ]
    if turn == "left":
        r = _LEFT_TURN_RADIUS
        entry_x = d - r
        in_len = entry_x - (-span)
        center = np.array([entry_x, r - d])
        out_start = np.array([d, r - d])
        return [
            ("line", start, east, in_len),
            ("arc", center, r, -math.pi / 2, 1.0, r * math.pi / 2),
            ("line", out_start, np.array([0.0, 1.0]), 4.0 * span),
        ]
    raise ValueError(f"unknown turn {turn!r}")


class Scenario:
    """Immutable ground-truth timeline plus per-frame vehicle poses.

    The first num_vehicles objects are the intelligent vehicles; their
    trajectories double as sensor poses.  Visibility results are memoized
    per (vehicle, frame).
    """

    def __init__(self, config: ScenarioConfig, seed: int, xy, yaw, extents,
                 categories):
        self.config = config
        self.seed = seed
        self.xy = xy                      # (T, M, 2)
        self.yaw = yaw                    # (T, M)
        self.extents = extents            # (M, 3)
        self.categories = categories      # (M,)
        self.z = extents[:, 2] / 2.0
        self._vis_cache: dict[tuple[int, int], list] = {}

    @property
    def num_frames(self) -> int:
        return self.xy.shape[0]

    @property
    def num_objects(self) -> int:
        return self.xy.shape[1]

    @property
    def num_vehicles(self) -> int:
        return self.config.num_vehicles

    def frame_time(self, frame: int) -> float:
        return frame / self.config.frame_rate

    def object_state(self, frame: int, obj: int) -> ObjectState:
        return ObjectState(
            category=int(self.categories[obj]),
            center=(self.xy[frame, obj, 0], self.xy[frame, obj, 1],
                    self.z[obj]),
            extents=tuple(self.extents[obj]),
            yaw=self.yaw[frame, obj],
        )

    def pose(self, frame: int, vehicle: int) -> Pose:
        if vehicle >= self.num_vehicles:
            raise ValueError(f"no such vehicle {vehicle}")
        return Pose(
            position=(self.xy[frame, vehicle, 0], self.xy[frame, vehicle, 1],
                      0.0),
            heading=self.yaw[frame, vehicle],
        )

    def visibility(self, vehicle: int, frame: int):
        key = (vehicle, frame)
        if key not in self._vis_cache:
            self._vis_cache[key] = visible_objects(self, vehicle, frame)
        return self._vis_cache[key]


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Sample non-conflicting crossroad trajectories, deterministically.

    Objects share a per-approach lane speed (no overtaking); candidate
    trajectories violating the minimum separation against any already
    placed object at any frame are resampled.  Raises when the arena
    cannot host the requested object count.
    """
    rng = np.random.default_rng(seed)
    times = np.arange(config.num_frames) / config.frame_rate
    lane_speeds = rng.uniform(config.speed_min, config.speed_max, 4)
    d = config.lane_offset

    # The intelligent vehicles travel as one platoon, so their sensor
    # wedges overlap for the whole run and most objects get several
    # witnesses; background traffic arrivals are staggered over the full
    # duration, keeping the flow around the platoon stationary, with the
    # platoon's own road weighted more heavily than the crossing one.
    platoon_tail = None

    placed_xy: list[np.ndarray] = []
    placed_yaw: list[np.ndarray] = []
    for obj in range(config.num_objects):
        is_vehicle = obj < config.num_vehicles
        for attempt in range(config.max_attempts):
            if is_vehicle:
                approach = 0
                turn = "straight"
                if platoon_tail is None:
                    s0 = config.span * rng.uniform(0.4, 0.6)
                else:
                    s0 = platoon_tail - rng.uniform(8.0, 20.0)
            else:
                approach = int(
                    rng.choice(4, p=[0.3, 0.2, 0.3, 0.2])
                )
                u = rng.random()
                if u < config.turn_prob / 2:
                    turn = "left"
                elif u < config.turn_prob:
                    turn = "right"
                else:
                    turn = "straight"
            path = _Path(
                _rotate_path(
                    _template_path(turn, d, config.span),
                    approach * math.pi / 2,
                )
            )
            speed = lane_speeds[approach]
            if not is_vehicle:
                s0 = rng.uniform(-speed * config.duration, config.span)
            xy, yaw = path.eval(s0 + speed * times)
            if placed_xy:
                others = np.stack(placed_xy, axis=1)  # (T, n, 2)
                delta = others - xy[:, None, :]
                min_d2 = np.einsum("tnk,tnk->tn", delta, delta).min()
                if min_d2 < config.min_separation ** 2:
                    continue
            placed_xy.append(xy)
            placed_yaw.append(yaw)
            if is_vehicle:
                platoon_tail = s0
            break
        else:
            raise ValueError(
                "could not place all objects; the configured arena is too "
                "crowded for the requested object count"
            )

    xy = np.stack(placed_xy, axis=1)
    yaw = np.stack(placed_yaw, axis=1)
    m = config.num_objects
    extents = np.column_stack(
        [
            rng.uniform(4.2, 4.8, m),
            rng.uniform(1.8, 2.1, m),
            rng.uniform(1.4, 1.7, m),
        ]
    )
    categories = np.zeros(m, dtype=int)
    return Scenario(config, seed, xy, yaw, extents, categories)


def _corners(xy, yaw, extents):
    """Footprint corners for a batch of boxes: (n, 4, 2), CCW."""
    hx = extents[:, 0] / 2.0
    hy = extents[:, 1] / 2.0
    local = np.stack(
        [
            np.stack([hx, hy], axis=-1),
            np.stack([-hx, hy], axis=-1),
            np.stack([-hx, -hy], axis=-1),
            np.stack([hx, -hy], axis=-1),
        ],
        axis=1,
    )  # (n, 4, 2)
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.stack(
        [np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=1
    )  # (n, 2, 2)
    return np.einsum("nij,nkj->nki", rot, local) + xy[:, None, :]


def _ray_hits(origin, dirs, segments):
    """Min positive ray parameter against a segment soup.

    dirs: (R, 2); segments: (E, 2, 2).  Returns (R,) with inf for misses.
    """
    p = segments[:, 0, :] - origin          # (E, 2)
    e = segments[:, 1, :] - segments[:, 0, :]
    denom = dirs[:, 0, None] * e[None, :, 1] - dirs[:, 1, None] * e[None, :, 0]
    cpe = p[:, 0] * e[:, 1] - p[:, 1] * e[:, 0]          # (E,)
    cpu = p[None, :, 0] * dirs[:, 1, None] - p[None, :, 1] * dirs[:, 0, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cpe[None, :] / denom
        s = cpu / denom
    valid = (np.abs(denom) > 1e-12) & (s >= 0.0) & (s <= 1.0) & (t > 1e-9)
    t = np.where(valid, t, np.inf)
    return t.min(axis=1)


def visible_objects(
    scenario: Scenario,
    vehicle: int,
    frame: int,
    sensor: SensorSpec | None = None,
) -> list[tuple[int, float, float]]:
    """Objects inside the sensor wedge, with distance and occlusion.

    Occlusion is the fraction of rays across the object's angular span
    blocked by a strictly nearer object's footprint; fully occluded
    objects are dropped.
    """
    sensor = sensor or scenario.config.sensor
    ego = scenario.xy[frame, vehicle]
    heading = scenario.yaw[frame, vehicle]
    rel = scenario.xy[frame] - ego
    dist = np.hypot(rel[:, 0], rel[:, 1])
    dist[vehicle] = np.inf
    bearing = np.arctan2(rel[:, 1], rel[:, 0])
    ang = (bearing - heading + math.pi) % (2 * math.pi) - math.pi
    candidates = np.flatnonzero(
        (dist <= sensor.range) & (np.abs(ang) <= sensor.fov / 2.0)
    )
    if candidates.size == 0:
        return []

    in_range = np.flatnonzero(dist <= sensor.range)
    corners = {
        int(i): _corners(
            scenario.xy[frame, i : i + 1],
            scenario.yaw[frame, i : i + 1],
            scenario.extents[i : i + 1],
        )[0]
        for i in in_range
    }

    out = []
    for t_id in candidates:
        tc = corners[int(t_id)]
        corner_ang = (
            np.arctan2(tc[:, 1] - ego[1], tc[:, 0] - ego[0])
            - bearing[t_id] + math.pi
        ) % (2 * math.pi) - math.pi
        lo, hi = corner_ang.min(), corner_ang.max()
        ray_ang = bearing[t_id] + np.linspace(lo, hi, OCCLUSION_RAYS)
        dirs = np.stack([np.cos(ray_ang), np.sin(ray_ang)], axis=-1)

        target_seg = np.stack([tc, np.roll(tc, -1, axis=0)], axis=1)
        t_target = _ray_hits(ego, dirs, target_seg)

        occluders = [
            i for i in in_range
            if i != t_id and i != vehicle and dist[i] < dist[t_id]
        ]
        if occluders:
            occ_corners = np.concatenate(
                [
                    np.stack(
                        [corners[int(i)], np.roll(corners[int(i)], -1, axis=0)],
                        axis=1,
                    )
                    for i in occluders
                ]
            )
            t_occ = _ray_hits(ego, dirs, occ_corners)
        else:
            t_occ = np.full(OCCLUSION_RAYS, np.inf)

        hit = np.isfinite(t_target)
        if not hit.any():
            occl = 0.0
        else:
            blocked = hit & (t_occ < t_target - 1e-9)
            occl = float(blocked.sum()) / float(hit.sum())
        if occl >= 1.0 - 1e-12:
            continue
        out.append((int(t_id), float(dist[t_id]), occl))
    return out


def _candidate_features(state, dist, occl, score, sensor):
    f = np.zeros(FEATURE_DIM)
    f[fedlearn.F_CATEGORY] = state.category
    f[fedlearn.F_X : fedlearn.F_HEIGHT + 1] = [*state.center, *state.extents]
    f[fedlearn.F_COS_YAW] = math.cos(state.yaw)
    f[fedlearn.F_SIN_YAW] = math.sin(state.yaw)
    f[fedlearn.F_DISTANCE] = dist / sensor.range
    f[fedlearn.F_OCCLUSION] = occl
    f[fedlearn.F_SCORE] = score
    f[fedlearn.F_CONST] = 1.0
    return f


def sense(
    scenario: Scenario,
    vehicle: int,
    frame: int,
    noise: DetectorNoiseSpec,
    seed: int,
    visibility=None,
) -> tuple[LocalMap, SensorFrame]:
    """Simulate one vehicle's detector output for one frame.

    Deterministic in (scenario, seed, vehicle, frame).  The returned
    candidate features embed exactly the emitted detection boxes.
    """
    sensor = scenario.config.sensor
    rng = np.random.default_rng([seed, vehicle, frame])
    pose = scenario.pose(frame, vehicle)
    vis = scenario.visibility(vehicle, frame) if visibility is None else visibility

    detections: list[ScoredDetection] = []
    features: list[np.ndarray] = []
    sources: list[int | None] = []
    for obj_id, dist, occl in vis:
        p_miss = min(
            max(
                noise.miss_prob
                + noise.miss_dist_coeff * dist / sensor.range
                + noise.miss_occl_coeff * occl,
                0.0,
            ),
            1.0,
        )
        if rng.random() < p_miss:
            continue
        local = transform_to_local(scenario.object_state(frame, obj_id), pose)
        scale = 1.0 + noise.noise_dist_scale * (dist / sensor.range + occl)
        center = np.array(local.center) + rng.normal(
            0.0, noise.center_sigma * scale, 3
        )
        extents = np.maximum(
            np.array(local.extents)
            + rng.normal(0.0, noise.extent_sigma * scale, 3),
            0.2,
        )
        yaw = local.yaw + rng.normal(0.0, noise.yaw_sigma * scale)
        flip = rng.random() < noise.flip_prob
        bias = noise.bias
        center += bias[0:3]
        extents = np.maximum(extents + np.array(bias[3:6]), 0.2)
        yaw += bias[6]
        if flip:
            yaw += math.pi
        score = (
            noise.score_base
            - noise.score_dist_coeff * dist / sensor.range
            - noise.score_occl_coeff * occl
            + rng.normal(0.0, noise.score_sigma)
        )
        state = ObjectState(
            category=local.category,
            center=tuple(center),
            extents=tuple(extents),
            yaw=yaw,
        )
        detections.append(ScoredDetection(state, float(score)))
        features.append(
            _candidate_features(state, dist, occl, float(score), sensor)
        )
        sources.append(obj_id)

    n_fp = int(rng.poisson(noise.false_positive_rate))
    for _ in range(n_fp):
        angle = rng.uniform(-sensor.fov / 2.0, sensor.fov / 2.0)
        radius = sensor.range * math.sqrt(rng.random())
        extents = (
            4.5 + rng.normal(0.0, 0.3),
            2.0 + rng.normal(0.0, 0.15),
            1.5 + rng.normal(0.0, 0.1),
        )
        extents = tuple(max(e, 0.5) for e in extents)
        state = ObjectState(
            category=0,
            center=(
                radius * math.cos(angle),
                radius * math.sin(angle),
                extents[2] / 2.0,
            ),
            extents=extents,
            yaw=rng.uniform(-math.pi, math.pi),
        )
        score = noise.fp_score_mean + rng.normal(0.0, noise.fp_score_sigma)
        detections.append(ScoredDetection(state, float(score)))
        features.append(
            _candidate_features(state, radius, 0.0, float(score), sensor)
        )
        sources.append(None)

    local_map = LocalMap(
        vehicle_id=vehicle,
        frame_time=scenario.frame_time(frame),
        detections=tuple(detections),
        pose=pose,
    )
    frame_feats = (
        np.stack(features) if features else np.zeros((0, FEATURE_DIM))
    )
    sensor_frame = SensorFrame(
        frame_time=scenario.frame_time(frame),
        candidates=frame_feats,
        source_ids=tuple(sources),
    )
    return local_map, sensor_frame


# --- serialization -----------------------------------------------------------


def scenario_to_jsonl(scenario: Scenario) -> str:
    """One JSONL record per frame: ground-truth states plus poses."""
    lines = []
    for f in range(scenario.num_frames):
        record = {
            "frame": f,
            "time": scenario.frame_time(f),
            "objects": [
                {
                    "id": m,
                    "category": int(scenario.categories[m]),
                    "center": [
                        float(scenario.xy[f, m, 0]),
                        float(scenario.xy[f, m, 1]),
                        float(scenario.z[m]),
                    ],
                    "extents": [float(v) for v in scenario.extents[m]],
                    "yaw": float(wrap_angle(scenario.yaw[f, m])),
                }
                for m in range(scenario.num_objects)
            ],
            "poses": [
                {
                    "vehicle": k,
                    "position": [
                        float(scenario.xy[f, k, 0]),
                        float(scenario.xy[f, k, 1]),
                        0.0,
                    ],
                    "heading": float(wrap_angle(scenario.yaw[f, k])),
                }
                for k in range(scenario.num_vehicles)
            ],
        }
        lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines) + "\n"
