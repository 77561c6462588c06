"""Detection quality measurement and benchmark reports.

Predictions are matched to ground truth greedily in score order at a BEV
IoU threshold.  Average precision uses all-point interpolation, reported
overall and sliced by distance, occlusion and scene density.  A report
gathers one AP table per method plus communication byte counts.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mapfuse.fusion import GlobalMap
from mapfuse.geometry import ObjectState, iou_bev
from mapfuse.simworld import Scenario

IOU_THRESHOLD = 0.7

SLICE_NAMES = ("overall", "SR", "MR", "LR", "NO", "PO", "LO", "LD", "HD")


@dataclass(frozen=True)
class SliceThresholds:
    """Boundaries for the distance, occlusion and density slices.

    Distance: short below short_range, mid below mid_range, long beyond.
    Occlusion: none below occl_none, partial below occl_partial, large
    beyond.  A frame is high density when at least one object is seen by
    min_witnesses vehicles at once.
    """

    short_range: float = 20.0
    mid_range: float = 50.0
    occl_none: float = 0.1
    occl_partial: float = 0.5
    min_witnesses: int = 3

    def __post_init__(self):
        if not 0.0 < self.short_range < self.mid_range:
            raise ValueError("need 0 < short_range < mid_range")
        if not 0.0 <= self.occl_none <= self.occl_partial:
            raise ValueError("need 0 <= occl_none <= occl_partial")
        if self.min_witnesses < 1:
            raise ValueError("min_witnesses must be positive")

    def distance_slice(self, dist: float) -> str:
        if dist < self.short_range:
            return "SR"
        if dist < self.mid_range:
            return "MR"
        return "LR"

    def occlusion_slice(self, occl: float) -> str:
        if occl < self.occl_none:
            return "NO"
        if occl < self.occl_partial:
            return "PO"
        return "LO"


@dataclass(frozen=True)
class BenchmarkTag:
    """Slice membership of one ground-truth object in one frame."""

    object_id: int
    distance: float
    occlusion: float
    witnesses: int
    distance_slice: str
    occlusion_slice: str


def tag_objects(
    scenario: Scenario,
    frame: int,
    thresholds: SliceThresholds | None = None,
    vehicles: Sequence[int] | None = None,
) -> tuple[list[BenchmarkTag], str]:
    """Tag every object visible to at least one vehicle; label the frame.

    Distance and occlusion are taken from the best-placed witness (the
    minimum over all vehicles that see the object).  The second return
    value is the frame's density slice, "LD" or "HD".
    """
    thresholds = thresholds or SliceThresholds()
    if vehicles is None:
        vehicles = range(scenario.num_vehicles)
    best: dict[int, tuple[float, float, int]] = {}
    for k in vehicles:
        for obj, dist, occl in scenario.visibility(k, frame):
            d, o, w = best.get(obj, (math.inf, math.inf, 0))
            best[obj] = (min(d, dist), min(o, occl), w + 1)
    tags = [
        BenchmarkTag(
            object_id=obj,
            distance=d,
            occlusion=o,
            witnesses=w,
            distance_slice=thresholds.distance_slice(d),
            occlusion_slice=thresholds.occlusion_slice(o),
        )
        for obj, (d, o, w) in sorted(best.items())
    ]
    density = (
        "HD"
        if any(t.witnesses >= thresholds.min_witnesses for t in tags)
        else "LD"
    )
    return tags, density


def match_detections(
    predictions: Sequence[tuple[ObjectState, float]],
    truths: Sequence[ObjectState],
    iou_threshold: float = IOU_THRESHOLD,
) -> list[int | None]:
    """Greedy one-to-one matching in descending score order.

    Returns, per prediction, the index of the matched truth or None.
    Equal scores are broken by the lower prediction index; each prediction
    takes the unclaimed truth with the highest overlap at or above the
    threshold.
    """
    order = sorted(
        range(len(predictions)), key=lambda i: (-predictions[i][1], i)
    )
    assigned: list[int | None] = [None] * len(predictions)
    taken = [False] * len(truths)
    for i in order:
        state = predictions[i][0]
        best_j, best_iou = None, iou_threshold
        for j, truth in enumerate(truths):
            if taken[j]:
                continue
            iou = iou_bev(state, truth)
            if iou >= best_iou and (best_j is None or iou > best_iou):
                best_j, best_iou = j, iou
        if best_j is not None:
            assigned[i] = best_j
            taken[best_j] = True
    return assigned


def average_precision(
    records: Sequence[tuple[float, bool]], num_truths: int
) -> float | None:
    """All-point interpolated AP from (score, is_true_positive) records.

    Returns None when there is nothing to detect; that is "no statement",
    not a zero.
    """
    if num_truths == 0:
        return None
    if not records:
        return 0.0
    order = sorted(range(len(records)), key=lambda i: (-records[i][0], i))
    tp = np.cumsum([1.0 if records[i][1] else 0.0 for i in order])
    fp = np.cumsum([0.0 if records[i][1] else 1.0 for i in order])
    recall = tp / num_truths
    precision = tp / (tp + fp)
    # Interpolate: precision at recall r is the max precision at any
    # recall >= r.
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


@dataclass
class _SliceAccumulator:
    records: list[tuple[float, bool]] = field(default_factory=list)
    num_truths: int = 0


class Accumulator:
    """Streams matched frames into per-slice AP statistics."""

    def __init__(self, thresholds: SliceThresholds | None = None,
                 iou_threshold: float = IOU_THRESHOLD):
        self.thresholds = thresholds or SliceThresholds()
        self.iou_threshold = iou_threshold
        self.slices = {name: _SliceAccumulator() for name in SLICE_NAMES}

    def add_frame(
        self,
        predictions: Sequence[tuple[ObjectState, float]],
        truths: Sequence[ObjectState],
        tags: Sequence[BenchmarkTag],
        density: str,
    ) -> None:
        if len(tags) != len(truths):
            raise ValueError("one tag per ground-truth object required")
        assigned = match_detections(predictions, truths, self.iou_threshold)
        slice_of_truth = [
            {"overall", t.distance_slice, t.occlusion_slice, density}
            for t in tags
        ]
        for name, acc in self.slices.items():
            if name in ("LD", "HD") and name != density:
                continue
            in_slice = [name in s for s in slice_of_truth]
            acc.num_truths += sum(in_slice)
            for (state, score), j in zip(predictions, assigned):
                if j is not None and not in_slice[j]:
                    # Matched a truth outside the slice: ignore, do not
                    # penalize.
                    continue
                acc.records.append((score, j is not None))

    def results(self) -> dict[str, float | None]:
        return {
            name: average_precision(acc.records, acc.num_truths)
            for name, acc in self.slices.items()
        }


class PartialTruthAccumulator:
    """AP against a subset of the truths.

    Predictions that match a truth outside the subset are ignored rather
    than counted as false positives; used to score a shared fused map
    against one vehicle's visible objects.
    """

    def __init__(self, iou_threshold: float = IOU_THRESHOLD):
        self.iou_threshold = iou_threshold
        self.records: list[tuple[float, bool]] = []
        self.num_truths = 0

    def add_frame(
        self,
        predictions: Sequence[tuple[ObjectState, float]],
        truths: Sequence[ObjectState],
        in_subset: Sequence[bool],
    ) -> None:
        if len(in_subset) != len(truths):
            raise ValueError("one subset flag per truth required")
        assigned = match_detections(predictions, truths, self.iou_threshold)
        self.num_truths += sum(bool(b) for b in in_subset)
        for (_, score), j in zip(predictions, assigned):
            if j is not None and not in_subset[j]:
                continue
            self.records.append((score, j is not None))

    def result(self) -> float | None:
        return average_precision(self.records, self.num_truths)


@dataclass
class MethodResult:
    """AP per slice plus communication cost for one method."""

    name: str
    ap: dict[str, float | None]
    per_vehicle_ap: dict[int, float | None] = field(default_factory=dict)
    bytes_sent: int = 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "ap": self.ap,
            "per_vehicle_ap": {
                str(k): v for k, v in self.per_vehicle_ap.items()
            },
            "bytes_sent": self.bytes_sent,
        }


@dataclass
class EvalReport:
    """All methods' results for one scenario and frame set."""

    scenario_seed: int
    frames: tuple[int, ...]
    methods: dict[str, MethodResult]

    def to_json(self) -> str:
        payload = {
            "scenario_seed": self.scenario_seed,
            "frames": list(self.frames),
            "methods": {k: m.to_dict() for k, m in sorted(self.methods.items())},
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        methods = {}
        for name, m in payload["methods"].items():
            methods[name] = MethodResult(
                name=m["name"],
                ap=dict(m["ap"]),
                per_vehicle_ap={
                    int(k): v for k, v in m["per_vehicle_ap"].items()
                },
                bytes_sent=int(m["bytes_sent"]),
            )
        return cls(
            scenario_seed=payload["scenario_seed"],
            frames=tuple(payload["frames"]),
            methods=methods,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", *SLICE_NAMES, "bytes_sent"])
        for name in sorted(self.methods):
            m = self.methods[name]
            writer.writerow(
                [
                    name,
                    *(
                        "" if m.ap.get(s) is None else f"{m.ap[s]:.6f}"
                        for s in SLICE_NAMES
                    ),
                    m.bytes_sent,
                ]
            )
        return buf.getvalue()

    def to_radar_csv(self) -> str:
        """Slice-per-row layout convenient for radar/spider plots."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = sorted(self.methods)
        writer.writerow(["slice", *names])
        for s in SLICE_NAMES:
            row = [s]
            for name in names:
                v = self.methods[name].ap.get(s)
                row.append("" if v is None else f"{v:.6f}")
            writer.writerow(row)
        return buf.getvalue()


def evaluate_global_maps(
    scenario: Scenario,
    maps: dict[int, GlobalMap],
    thresholds: SliceThresholds | None = None,
    iou_threshold: float = IOU_THRESHOLD,
) -> dict[str, float | None]:
    """AP of per-frame fused maps against the fleet's visible objects."""
    acc = Accumulator(thresholds, iou_threshold)
    for frame, gmap in sorted(maps.items()):
        tags, density = tag_objects(scenario, frame, acc.thresholds)
        truths = [scenario.object_state(frame, t.object_id) for t in tags]
        acc.add_frame(list(gmap.objects), truths, tags, density)
    return acc.results()
