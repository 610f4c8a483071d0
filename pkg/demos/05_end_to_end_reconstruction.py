# %%
"""
End-to-end: unpaired data to high-field-like reconstruction
===========================================================

The whole pipeline at miniature scale (32x32, 8 training images, short
training) through the same command functions the CLI exposes:

    gen-data -> train-teacher -> gen-pairs -> train-student (joint and
    reference-only) -> reconstruct (meta / baseline / zero-filled) -> eval

Quality at this scale is modest; the point is the wiring and the report. The
desk-scale run with meaningful metrics is the acceptance suite
(tests/test_acceptance.py) or the CLI with default settings.

    python demos/05_end_to_end_reconstruction.py
"""

import json
import os
import tempfile
import time

from fieldlift.cli import main

t0 = time.time()
run = tempfile.mkdtemp(prefix="fieldlift_demo_")
cfg_path = os.path.join(run, "demo_config.json")
with open(cfg_path, "w") as fh:
    json.dump({
        "seed": 5,
        "phantom": {"size": 32, "n_train": 8, "n_test": 3},
        "mri": {"coils": 2, "accel": 3.0, "acs": 4, "noise_std": 0.01},
        "teacher": {"epochs": 2, "map_channels": 12, "map_depth": 3,
                    "critic_channels": 8, "critic_downs": 2, "lambda_cost": 0.1},
        "student": {"epochs": 6, "channels": 10, "depth": 3, "lr": 1e-3,
                    "ema_decay": 0.99,
                    "schedule": {"eps1": 0.03, "epsL": 6.0, "levels": 16}},
        "sampler": {"step": 8.0, "inner_steps": 6, "gamma_f": 0.1},
    }, fh)

out = os.path.join(run, "run")

# %%
# Stages, exactly as the CLI would run them.
for argv in (
    ["gen-data"],
    ["train-teacher"],
    ["gen-pairs"],
    ["train-student"],
):
    code = main(argv + ["--config", cfg_path, "--out", out])
    assert code == 0, argv
    print(f"  [{time.time()-t0:5.0f}s] {argv[0]} done")

# the baseline prior trains on the high-field set alone
ref_cfg = os.path.join(run, "demo_config_ref.json")
with open(cfg_path) as fh:
    cfg = json.load(fh)
cfg["student"]["mode"] = "reference-only"
with open(ref_cfg, "w") as fh:
    json.dump(cfg, fh)
assert main(["train-student", "--config", ref_cfg, "--out", out]) == 0
print(f"  [{time.time()-t0:5.0f}s] train-student (reference-only) done")

for method in ("zero-filled", "score-mri-baseline", "meta"):
    assert main(["reconstruct", "--config", cfg_path, "--out", out, "--method", method]) == 0
    print(f"  [{time.time()-t0:5.0f}s] reconstruct {method} done")

# %%
# Metrics table
assert main(["eval", "--config", cfg_path, "--out", out]) == 0
assert main(["report", "--config", cfg_path, "--out", out]) == 0
print(f"\nrun directory: {out}")
print(open(os.path.join(out, "reports", "report.csv")).read())
