import numpy as np
import pytest

from mapfuse.distill import (
    RoadSideUnit,
    TeacherRegistry,
    distill_labels,
    full_coverage_registry,
    run_edfl,
    run_perfect_fl,
    select_students,
)
from mapfuse.fedlearn import TrainConfig, default_init_params, predict
from mapfuse.fusion import FusionConfig, LocalMap, ScoredDetection, three_stage_fuse
from mapfuse.geometry import IDENTITY_POSE, ObjectState, transform_to_local
from mapfuse.simworld import (
    DetectorNoiseSpec,
    ScenarioConfig,
    generate_scenario,
    sense,
)

NOISE = DetectorNoiseSpec(center_sigma=0.1, extent_sigma=0.05, yaw_sigma=0.03,
                          score_sigma=0.5)


def small_scenario(seed=3):
    return generate_scenario(ScenarioConfig(duration=5.0, num_objects=20),
                             seed)


def sensed_frame(scenario, frame, noise=NOISE, seed=0):
    maps = [sense(scenario, k, frame, noise, seed)[0]
            for k in range(scenario.num_vehicles)]
    return maps, three_stage_fuse(maps)


def test_rsu_disc_boundary():
    sc = small_scenario()
    truth = sc.object_state(0, 7)
    rsu = RoadSideUnit(center=truth.center[:2], radius=5.0, scenario=sc)
    assert rsu.covers(truth)
    far = ObjectState(0, (truth.center[0] + 6.0, truth.center[1], 0.75),
                      (4, 2, 1.5), 0.0)
    assert not rsu.covers(far)
    assert rsu.label(far, 0) is None


def test_rsu_labels_with_nearest_truth():
    sc = small_scenario()
    truth = sc.object_state(10, 4)
    probe = ObjectState(0, (truth.center[0] + 0.4, truth.center[1] - 0.2,
                            0.75), (4.4, 2.0, 1.5), truth.yaw + 0.1)
    rsu = RoadSideUnit(center=(0.0, 0.0), radius=1e9, scenario=sc)
    label = rsu.label(probe, 10)
    assert label == truth
    # Outside the match radius nothing is labeled.
    rsu_tight = RoadSideUnit(center=(0.0, 0.0), radius=1e9, scenario=sc,
                             match_radius=0.1)
    assert rsu_tight.label(probe, 10) is None


def test_registry_first_covering_teacher_wins():
    sc = small_scenario()
    reg = TeacherRegistry(teachers=[
        RoadSideUnit(center=(1e6, 1e6), radius=1.0, scenario=sc),
        RoadSideUnit(center=(0.0, 0.0), radius=1e9, scenario=sc),
    ])
    truth = sc.object_state(0, 6)
    assert reg.find_label(truth, 0) == truth


def test_distill_labels_cover_associated_detections():
    sc = small_scenario()
    maps, res = sensed_frame(sc, 20)
    out = distill_labels(maps, res, 20)
    assert set(out) == {lm.vehicle_id for lm in maps}
    for lm in maps:
        labels = out[lm.vehicle_id].labels
        assert len(labels) == len(lm.detections)
        mat = {m.vehicle_id: m for m in res.matrices}[lm.vehicle_id]
        for n, label in enumerate(labels):
            assert (label is None) == (mat.column_of(n) is None)


def test_distill_labels_ensemble_branch_is_fused_object_in_local_frame():
    sc = small_scenario()
    maps, res = sensed_frame(sc, 20)
    out = distill_labels(maps, res, 20, registry=None)
    lm = maps[0]
    mat = {m.vehicle_id: m for m in res.matrices}[0]
    for n, label in enumerate(out[0].labels):
        col = mat.column_of(n)
        if col is None:
            continue
        expected = transform_to_local(res.fused_all[col][0], lm.pose)
        assert np.allclose(label.to_vector(), expected.to_vector())


def test_distill_labels_teacher_branch_overrides_ensemble():
    sc = small_scenario()
    maps, res = sensed_frame(sc, 20)
    reg = full_coverage_registry(sc)
    out = distill_labels(maps, res, 20, registry=reg)
    lm = maps[0]
    mat = {m.vehicle_id: m for m in res.matrices}[0]
    hit = 0
    for n, label in enumerate(out[0].labels):
        col = mat.column_of(n)
        if col is None or label is None:
            continue
        fused_local = transform_to_local(res.fused_all[col][0], lm.pose)
        # teacher labels are exact ground truth, not the fused estimate
        g = res.fused_all[col][0]
        dists = [np.hypot(sc.xy[20, o, 0] - g.center[0],
                          sc.xy[20, o, 1] - g.center[1])
                 for o in range(sc.num_objects)]
        best = int(np.argmin(dists))
        if dists[best] <= 2.0:
            truth_local = transform_to_local(sc.object_state(20, best),
                                             lm.pose)
            assert np.allclose(label.to_vector(), truth_local.to_vector())
            hit += 1
    assert hit > 0


def test_distill_labels_respects_student_subset():
    sc = small_scenario()
    maps, res = sensed_frame(sc, 20)
    out = distill_labels(maps, res, 20, students=frozenset({1, 3}))
    assert set(out) == {1, 3}


def test_distill_labels_rejects_misaligned_maps():
    sc = small_scenario()
    maps, res = sensed_frame(sc, 20)
    broken = LocalMap(
        vehicle_id=maps[0].vehicle_id,
        frame_time=maps[0].frame_time,
        detections=maps[0].detections + (
            ScoredDetection(ObjectState(0, (0, 0, 0.75), (4, 2, 1.5), 0.0),
                            1.0),
        ),
        pose=maps[0].pose,
    )
    with pytest.raises(ValueError):
        distill_labels([broken] + maps[1:], res, 20)


def test_select_students_range_and_agreement_extremes():
    sc = small_scenario()
    per_frame = [sensed_frame(sc, f) for f in (0, 10, 20, 30)]
    sel = select_students(per_frame, threshold=0.2, sensor=sc.config.sensor)
    assert set(sel.divergence) <= set(range(sc.num_vehicles))
    for v in sel.divergence.values():
        assert 0.0 <= v <= 1.0
    assert sel.students == frozenset(
        k for k, v in sel.divergence.items() if v > 0.2
    )
    # threshold 1.0 selects nobody
    none = select_students(per_frame, threshold=1.0, sensor=sc.config.sensor)
    assert none.students == frozenset()


def test_run_perfect_fl_equals_full_coverage_edfl():
    sc = small_scenario()
    frames = list(range(0, 40, 4))
    init = default_init_params()
    cfg = TrainConfig(max_rounds=2)
    a = run_perfect_fl(sc, frames, NOISE, init, cfg, sensor_seed=5)
    b = run_edfl(sc, frames, NOISE, init, cfg, sensor_seed=5,
                 registry=full_coverage_registry(sc))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, init.values)


def test_run_edfl_is_deterministic():
    sc = small_scenario()
    frames = list(range(0, 30, 5))
    init = default_init_params()
    cfg = TrainConfig(max_rounds=1)
    a = run_edfl(sc, frames, NOISE, init, cfg, sensor_seed=2)
    b = run_edfl(sc, frames, NOISE, init, cfg, sensor_seed=2)
    assert np.array_equal(a.values, b.values)
