"""Run a reduced benchmark and print the method comparison table.

The full eight-method benchmark on the standard scenario takes a couple
of minutes per seed; this script shrinks the scenario so it finishes in
seconds while exercising the same pipeline: federated training on the
early frames, evaluation of local and fused variants on the held-out
frames, and byte accounting for everything that crossed the wire.

Run the full-size version with:  dmf bench --out report.json
"""

from mapfuse import run_config_from_dict, run_experiment

cfg = run_config_from_dict({
    "scenario": {"duration": 10.0},
    "noise": {
        "miss_prob": 0.05,
        "miss_dist_coeff": 0.15,
        "miss_occl_coeff": 0.3,
        "false_positive_rate": 0.1,
        "center_sigma": 0.05,
        "extent_sigma": 0.04,
        "yaw_sigma": 0.02,
        "noise_dist_scale": 2.0,
        "flip_prob": 0.02,
        "bias": [0.1, 0.15, 0.0, -0.25, -0.12, 0.0, 0.02],
        "score_sigma": 0.5,
    },
    "train": {"max_rounds": 2, "train_window": [0.0, 5.0],
              "sampling_ratio": 5},
    "teachers": [{"x": 0.0, "y": 0.0, "radius": 60.0}],
    "seed": 0,
})

report = run_experiment(cfg, test_frames=list(range(100, 200, 2)))

print(f"scenario seed {report.scenario_seed}, "
      f"{len(report.frames)} test frames\n")
print(f"{'method':<20} {'overall AP':>10} {'SR':>7} {'LR':>7} "
      f"{'kBytes':>8}")
for name in ("local_no_fl", "local_edfl", "fusion_mean",
             "fusion_max_score", "fusion_three_stage", "fusion_edfl",
             "fusion_perfect_fl"):
    m = report.methods[name]
    def fmt(v):
        return f"{v:.3f}" if v is not None else "  n/a"
    print(f"{name:<20} {fmt(m.ap['overall']):>10} {fmt(m.ap['SR']):>7} "
          f"{fmt(m.ap['LR']):>7} {m.bytes_sent / 1000:>8.1f}")

best_single = max(
    v for v in report.methods["local_no_fl"].per_vehicle_ap.values()
    if v is not None
)
fused = report.methods["fusion_three_stage"].ap["overall"]
print(f"\nbest single vehicle AP: {best_single:.3f}")
print(f"three-stage fused AP:   {fused:.3f}")
