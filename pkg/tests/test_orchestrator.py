import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapfuse.fedlearn import TrainConfig, default_init_params
from mapfuse.fusion import ScoredDetection, three_stage_fuse
from mapfuse.geometry import ObjectState, iou_3d
from mapfuse.orchestrator import (
    BROADCAST_ID,
    ByteLedger,
    CodecError,
    ConfigError,
    GlobalMapBroadcast,
    LabelBroadcast,
    LocalMapUpload,
    MessageKind,
    METHOD_NAMES,
    ParamsPayload,
    RunConfig,
    SERVER_ID,
    TeacherSpec,
    V2xMessage,
    decode_message,
    default_benchmark_config,
    encode_message,
    run_config_from_dict,
    run_experiment,
    run_frame,
    training_frames,
)
from mapfuse.orchestrator import testing_frames as eval_window_frames
from mapfuse.simworld import (
    DetectorNoiseSpec,
    ScenarioConfig,
    generate_scenario,
    sense,
)

QUIET = DetectorNoiseSpec()


def box(x, y, yaw=0.0, cat=0):
    return ObjectState(cat, (x, y, 0.75), (4.0, 2.0, 1.5), yaw)


def upload_msg(dets):
    return V2xMessage(MessageKind.LOCAL_MAP_UPLOAD, 3, SERVER_ID,
                      LocalMapUpload(tuple(dets)))


def test_wire_sizes():
    empty = encode_message(upload_msg([]))
    assert len(empty) == 20
    one = encode_message(upload_msg([ScoredDetection(box(1, 2), 0.5)]))
    assert len(one) == 86
    bcast = encode_message(
        V2xMessage(MessageKind.GLOBAL_MAP_BROADCAST, SERVER_ID, BROADCAST_ID,
                   GlobalMapBroadcast(((box(0, 0), 1.0),)))
    )
    assert len(bcast) == 86


state_st = st.builds(
    ObjectState,
    st.integers(0, 10),
    st.tuples(*[st.floats(-100, 100)] * 3),
    st.tuples(*[st.floats(0.1, 10)] * 3),
    st.floats(-math.pi, math.pi),
)
score_st = st.floats(-10, 10, allow_nan=False)


@st.composite
def message_st(draw):
    kind = draw(st.sampled_from(list(MessageKind)))
    if kind is MessageKind.LOCAL_MAP_UPLOAD:
        payload = LocalMapUpload(tuple(
            ScoredDetection(s, sc)
            for s, sc in draw(st.lists(st.tuples(state_st, score_st),
                                       max_size=5))
        ))
    elif kind is MessageKind.GLOBAL_MAP_BROADCAST:
        payload = GlobalMapBroadcast(tuple(
            draw(st.lists(st.tuples(state_st, score_st), max_size=5))
        ))
    elif kind is MessageKind.LABEL_BROADCAST:
        payload = LabelBroadcast(tuple(
            draw(st.lists(st.tuples(st.integers(0, 1000), state_st),
                          max_size=5))
        ))
    else:
        payload = ParamsPayload(tuple(
            draw(st.lists(st.floats(-1e6, 1e6, allow_nan=False), max_size=20))
        ))
    sender = draw(st.integers(0, SERVER_ID))
    receiver = draw(st.integers(0, SERVER_ID))
    return V2xMessage(kind, sender, receiver, payload)


@given(message_st())
@settings(max_examples=150, deadline=None)
def test_codec_round_trip(msg):
    back = decode_message(encode_message(msg))
    assert back == msg


def test_codec_errors_name_offsets():
    blob = encode_message(upload_msg([ScoredDetection(box(1, 2), 0.5)]))
    with pytest.raises(CodecError, match="header at offset 0"):
        decode_message(blob[:10])
    with pytest.raises(CodecError, match="magic at offset 0"):
        decode_message(b"XXXX" + blob[4:])
    with pytest.raises(CodecError, match="version at offset 4"):
        decode_message(blob[:4] + b"\x63\x00" + blob[6:])
    with pytest.raises(CodecError, match="kind at offset 6"):
        decode_message(blob[:6] + b"\x63\x00" + blob[8:])
    with pytest.raises(CodecError, match="detection entry at offset 20"):
        decode_message(blob[:40])
    with pytest.raises(CodecError, match="trailing bytes at offset 86"):
        decode_message(blob + b"\x00")


def test_payload_kind_mismatch_rejected():
    with pytest.raises(ValueError):
        V2xMessage(MessageKind.PARAMS_UPLOAD, 0, SERVER_ID,
                   LocalMapUpload(()))


def test_byte_ledger_merge_and_total():
    a = ByteLedger()
    a.record(MessageKind.LOCAL_MAP_UPLOAD, 100)
    a.record(MessageKind.LOCAL_MAP_UPLOAD, 20)
    b = ByteLedger()
    b.record(MessageKind.GLOBAL_MAP_BROADCAST, 7)
    b.record(MessageKind.LOCAL_MAP_UPLOAD, 1)
    a.merge(b)
    assert a.per_kind[MessageKind.LOCAL_MAP_UPLOAD] == 121
    assert a.per_kind[MessageKind.GLOBAL_MAP_BROADCAST] == 7
    assert a.total == 128


def test_run_frame_byte_accounting_matches_closed_form():
    sc = generate_scenario(ScenarioConfig(duration=5.0, num_objects=20),
                           seed=0)
    ledger = ByteLedger()
    gmap, delta = run_frame(sc, 10, QUIET, default_init_params(),
                            ledger=ledger)
    per_vehicle = [len(sense(sc, k, 10, QUIET, 0)[0].detections)
                   for k in range(sc.num_vehicles)]
    expected = sum(20 + 66 * n for n in per_vehicle)
    expected += 20 + 66 * len(gmap.objects)
    assert delta == expected
    assert ledger.total == expected


def test_run_frame_without_vehicles_is_empty_broadcast():
    sc = generate_scenario(ScenarioConfig(duration=5.0, num_objects=20),
                           seed=0)
    gmap, delta = run_frame(sc, 0, QUIET, default_init_params(), vehicles=[])
    assert gmap.objects == ()
    assert delta == 20


def test_run_frame_noiseless_matches_direct_fusion():
    sc = generate_scenario(ScenarioConfig(duration=5.0, num_objects=20),
                           seed=4)
    f = 30
    gmap, _ = run_frame(sc, f, QUIET, default_init_params())
    maps = [sense(sc, k, f, QUIET, 0)[0] for k in range(sc.num_vehicles)]
    direct = three_stage_fuse(maps).global_map
    assert len(gmap.objects) == len(direct.objects)
    for (sa, ca), (sb, cb) in zip(gmap.objects, direct.objects):
        assert iou_3d(sa, sb) > 1.0 - 1e-9
        assert ca == pytest.approx(cb)


def test_run_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown key bogus"):
        run_config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="unknown key noise.bogus"):
        run_config_from_dict({"noise": {"bogus": 1}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"scenario": {"speed_max": 20.0}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"methods": ["warp_drive"]})
    with pytest.raises(ConfigError):
        run_config_from_dict([1, 2])


def test_run_config_from_dict_builds_nested():
    cfg = run_config_from_dict({
        "scenario": {"duration": 5.0, "num_objects": 20,
                     "sensor": {"range": 40.0}},
        "noise": {"center_sigma": 0.2, "bias": [0, 1, 0, 0, 0, 0, 0]},
        "train": {"max_rounds": 2},
        "teachers": [{"x": 1.0, "y": 2.0, "radius": 30.0}],
        "methods": ["fusion_three_stage", "local_no_fl"],
        "seed": 9,
    })
    assert cfg.scenario.sensor.range == 40.0
    assert cfg.noise.bias == (0, 1, 0, 0, 0, 0, 0)
    assert cfg.teachers == (TeacherSpec(1.0, 2.0, 30.0),)
    assert cfg.methods == ("fusion_three_stage", "local_no_fl")
    assert cfg.seed == 9


def test_frame_windows():
    sc = ScenarioConfig()
    tr = TrainConfig()
    frames = training_frames(sc, tr)
    assert len(frames) == 170
    assert frames[0] == 0 and frames[-1] < 510
    test = eval_window_frames(sc, tr)
    assert test[0] == 510
    assert len(test) == 500
    assert sc.num_frames == 1010


def small_run_config(**kw):
    base = dict(
        scenario={"duration": 6.0, "num_objects": 20},
        noise={"center_sigma": 0.1, "extent_sigma": 0.05, "yaw_sigma": 0.03,
               "miss_prob": 0.1, "false_positive_rate": 0.1,
               "score_sigma": 0.5},
        train={"max_rounds": 1, "train_window": [0.0, 3.0],
               "sampling_ratio": 10},
        teachers=[{"full_coverage": True}],
        methods=["local_no_fl", "fusion_three_stage", "fusion_edfl"],
    )
    base.update(kw)
    return run_config_from_dict(base)


def test_run_experiment_small_and_deterministic():
    cfg = small_run_config()
    frames = list(range(60, 120, 10))
    a = run_experiment(cfg, test_frames=frames)
    b = run_experiment(cfg, test_frames=frames)
    assert a.to_json() == b.to_json()
    assert set(a.methods) == set(cfg.methods)
    assert a.frames == tuple(frames)
    ts = a.methods["fusion_three_stage"]
    assert ts.bytes_sent > 0
    assert a.methods["local_no_fl"].bytes_sent == 0
    assert ts.ap["overall"] is not None
    assert set(ts.per_vehicle_ap) == set(range(5))


def test_default_benchmark_config_composition():
    cfg = default_benchmark_config(seed=3)
    assert cfg.seed == 3
    assert cfg.methods == METHOD_NAMES
    assert cfg.teachers == (TeacherSpec(0.0, 0.0, 60.0),)
    assert cfg.noise.miss_prob == 0.05
    assert cfg.noise.bias != (0.0,) * 7


def test_run_config_defaults_are_valid():
    cfg = RunConfig()
    assert cfg.methods == METHOD_NAMES
    with pytest.raises(ConfigError):
        RunConfig(methods=("nope",))
