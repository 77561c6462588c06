"""Training-label generation for vehicles without ground truth.

Labels come from two sources: road-side-unit teachers, which return exact
ground truth for fused objects inside their coverage disc, and the fused
global map itself (the ensemble route).  Combined with federated training
this gives ensemble-distillation federated learning: the whole fleet
learns from its own consensus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mapfuse.fedlearn import (
    LabelSet,
    ModelParams,
    ModelSpec,
    TrainConfig,
    predict,
    run_federated,
)
from mapfuse.fusion import (
    FusionConfig,
    FusionResult,
    LocalMap,
    three_stage_fuse,
)
from mapfuse.geometry import ObjectState, transform_to_local
from mapfuse.simworld import DetectorNoiseSpec, Scenario, SensorSpec, sense


@dataclass
class RoadSideUnit:
    """A teacher with a circular coverage area and ground-truth access.

    Labels a fused object with the state of the nearest true object,
    provided the object sits inside the disc and a true object lies
    within match_radius of it.
    """

    center: tuple[float, float]
    radius: float
    scenario: Scenario
    match_radius: float = 2.0

    def covers(self, state: ObjectState) -> bool:
        return (
            math.hypot(
                state.center[0] - self.center[0],
                state.center[1] - self.center[1],
            )
            <= self.radius
        )

    def label(self, state: ObjectState, frame: int) -> ObjectState | None:
        if not self.covers(state):
            return None
        xy = self.scenario.xy[frame]
        d = np.hypot(xy[:, 0] - state.center[0], xy[:, 1] - state.center[1])
        best = int(np.argmin(d))
        if d[best] > self.match_radius:
            return None
        return self.scenario.object_state(frame, best)


@dataclass
class TeacherRegistry:
    teachers: list[RoadSideUnit] = field(default_factory=list)

    def find_label(self, state: ObjectState, frame: int) -> ObjectState | None:
        for teacher in self.teachers:
            label = teacher.label(state, frame)
            if label is not None:
                return label
        return None


def full_coverage_registry(scenario: Scenario) -> TeacherRegistry:
    """A single omniscient teacher: the perfect-labeling setup."""
    return TeacherRegistry(
        teachers=[RoadSideUnit(center=(0.0, 0.0), radius=1e9,
                               scenario=scenario)]
    )


@dataclass(frozen=True)
class StudentSelection:
    students: frozenset[int]
    divergence: dict[int, float]


def _fov_columns(result: FusionResult, pose, sensor: SensorSpec):
    """Fused-object columns inside a vehicle's sensor wedge."""
    cols = []
    half = sensor.fov / 2.0
    for m, (state, _) in enumerate(result.fused_all):
        dx = state.center[0] - pose.position[0]
        dy = state.center[1] - pose.position[1]
        if math.hypot(dx, dy) > sensor.range:
            continue
        bearing = math.atan2(dy, dx)
        rel = (bearing - pose.heading + math.pi) % (2 * math.pi) - math.pi
        if abs(rel) <= half:
            cols.append(m)
    return cols


def select_students(
    per_frame: Sequence[tuple[Sequence[LocalMap], FusionResult]],
    threshold: float,
    sensor: SensorSpec,
) -> StudentSelection:
    """Pick vehicles whose local maps disagree with the fused map.

    Per frame and vehicle, divergence is one minus matched pairs over the
    union of the vehicle's detections and the fused objects in its FoV;
    fused objects supported solely by the vehicle itself are not counted
    as consensus.  The per-vehicle score is the average over frames, and
    vehicles above the threshold become students.
    """
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for local_maps, result in per_frame:
        support = np.zeros(result.num_objects, dtype=int)
        for mat in result.matrices:
            support += (mat.entries.sum(axis=0) > 0).astype(int)
        by_vehicle = {mat.vehicle_id: mat for mat in result.matrices}
        for lm in local_maps:
            mat = by_vehicle[lm.vehicle_id]
            own = mat.entries.sum(axis=0) > 0
            consensus = {
                m
                for m in _fov_columns(result, lm.pose, sensor)
                if support[m] >= 2 or not own[m]
            }
            matched = 0
            for n in range(len(lm.detections)):
                col = mat.column_of(n)
                if col is not None and col in consensus:
                    matched += 1
            union = len(lm.detections) + len(consensus) - matched
            if union == 0:
                continue
            sums[lm.vehicle_id] = sums.get(lm.vehicle_id, 0.0) + (
                1.0 - matched / union
            )
            counts[lm.vehicle_id] = counts.get(lm.vehicle_id, 0) + 1
    divergence = {
        k: sums[k] / counts[k] for k in sorted(counts)
    }
    students = frozenset(k for k, v in divergence.items() if v > threshold)
    return StudentSelection(students=students, divergence=divergence)


def distill_labels(
    local_maps: Sequence[LocalMap],
    result: FusionResult,
    frame: int,
    registry: TeacherRegistry | None = None,
    students: frozenset[int] | None = None,
) -> dict[int, LabelSet]:
    """Per-vehicle label sets for one frame.

    Each detection associated with a fused object is labeled either by a
    covering teacher (ground truth, transformed into the vehicle frame)
    or by the fused object itself; unassociated detections stay
    unlabeled.  With students=None every vehicle receives labels.
    """
    by_vehicle = {mat.vehicle_id: mat for mat in result.matrices}
    out: dict[int, LabelSet] = {}
    for lm in local_maps:
        if students is not None and lm.vehicle_id not in students:
            continue
        mat = by_vehicle.get(lm.vehicle_id)
        if mat is None or mat.entries.shape[0] != len(lm.detections):
            raise ValueError(
                "association matrices do not match the local maps"
            )
        labels: list[ObjectState | None] = []
        for n in range(len(lm.detections)):
            col = mat.column_of(n)
            if col is None:
                labels.append(None)
                continue
            fused_state = result.fused_all[col][0]
            target = None
            if registry is not None:
                target = registry.find_label(fused_state, frame)
            if target is None:
                target = fused_state
            labels.append(transform_to_local(target, lm.pose))
        out[lm.vehicle_id] = LabelSet(
            frame_time=lm.frame_time, labels=tuple(labels)
        )
    return out


def build_distilled_datasets(
    scenario: Scenario,
    frames: Sequence[int],
    noise: DetectorNoiseSpec,
    params: ModelParams,
    spec: ModelSpec,
    fusion_cfg: FusionConfig,
    sensor_seed: int,
    registry: TeacherRegistry | None = None,
    students: frozenset[int] | None = None,
):
    """Sense, fuse and label the given frames for every vehicle."""
    k_count = scenario.num_vehicles
    datasets = [[] for _ in range(k_count)]
    for f in frames:
        sensed = [sense(scenario, k, f, noise, sensor_seed) for k in range(k_count)]
        local_maps = []
        for k, (raw_map, sensor_frame) in enumerate(sensed):
            refined = predict(params, sensor_frame, spec)
            local_maps.append(
                LocalMap(
                    vehicle_id=k,
                    frame_time=raw_map.frame_time,
                    detections=tuple(refined),
                    pose=raw_map.pose,
                )
            )
        result = three_stage_fuse(local_maps, fusion_cfg)
        labels = distill_labels(local_maps, result, f, registry, students)
        for k in range(k_count):
            if k in labels:
                datasets[k].append((sensed[k][1], labels[k]))
    return datasets


def run_edfl(
    scenario: Scenario,
    frames: Sequence[int],
    noise: DetectorNoiseSpec,
    init: ModelParams,
    train_cfg: TrainConfig,
    fusion_cfg: FusionConfig | None = None,
    spec: ModelSpec | None = None,
    sensor_seed: int = 0,
    registry: TeacherRegistry | None = None,
    students: frozenset[int] | None = None,
    curve: list | None = None,
) -> ModelParams:
    """Ensemble-distillation federated learning over a training window.

    Labels come from the fused global map, overridden by any covering
    teachers; with a full-coverage registry this reduces to perfectly
    labeled federated training.
    """
    spec = spec or ModelSpec()
    fusion_cfg = fusion_cfg or FusionConfig()
    datasets = build_distilled_datasets(
        scenario, frames, noise, init, spec, fusion_cfg, sensor_seed,
        registry, students,
    )
    return run_federated(
        datasets, init, train_cfg, spec, base_seed=sensor_seed, curve=curve
    )


def run_perfect_fl(
    scenario: Scenario,
    frames: Sequence[int],
    noise: DetectorNoiseSpec,
    init: ModelParams,
    train_cfg: TrainConfig,
    fusion_cfg: FusionConfig | None = None,
    spec: ModelSpec | None = None,
    sensor_seed: int = 0,
    curve: list | None = None,
) -> ModelParams:
    """Federated training with perfect teacher labels everywhere."""
    return run_edfl(
        scenario,
        frames,
        noise,
        init,
        train_cfg,
        fusion_cfg,
        spec,
        sensor_seed,
        registry=full_coverage_registry(scenario),
        curve=curve,
    )
