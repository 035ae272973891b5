prog_desc = """Pedestrian counting with dynamic region division.
Detections count the nearby region, a density map network counts the distant
region, and the two are fused per frame.

Typical run on a synthetic scene:
region-counter synth --out run
region-counter divide --config run/effective_config.json
region-counter densify --config run/effective_config.json
region-counter train --config run/effective_config.json
region-counter evaluate --config run/effective_config.json
"""

common_desc = {
    "config": "Pipeline config file (JSON). Defaults to $REGION_COUNTER_CONFIG.",
    "out": "Output directory.",
    "seed": "Random seed for synthesis, initialization and shuffling.",
    "mode": "Division mode: envelope (never cuts a straddling box) or strict.",
    "alpha": "Head band share of the box height, in (0, 1).",
    "workers": "Frames processed in parallel.",
    "log_level": "DEBUG, INFO, WARNING or ERROR.",
}

synth_desc = """Write a synthetic scene: frame graymaps, detections.csv and heads.csv
from a known perspective line, plus a config pointing at them."""

divide_desc = """Place the expectation line and divide every frame.
Writes one mask per frame, division.json with H and the straddling boxes, and
mode_comparison.json with the columns where strict and envelope masks differ."""

densify_desc = """Fit the perspective line and render ground-truth density maps of the
distant heads, at full and quarter resolution."""

train_desc = """Train the density network on the training frames.
Horizontal flips double the set unless disabled in the config."""

predict_desc = """Predict distant-region density maps and counts with a checkpoint.
Held-out frames by default."""

evaluate_desc = """Fuse nearby detections and predicted distant counts on held-out frames
and report the mean absolute error against head annotations."""

report_desc = """Tabulate the MAE of several evaluated scenes."""

checkpoint_desc = "Checkpoint file. Defaults to <out>/model/checkpoint.idcn."
