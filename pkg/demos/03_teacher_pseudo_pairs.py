# %%
"""
Learning the degradation from unpaired sets
===========================================

The teacher never sees a matched pair: it gets one bag of high-field images
and an independently shuffled bag of degraded ones. An adversarial
Kantorovich-dual critic (spectrally normalized, so 1-Lipschitz) pushes the
mapped high-field set onto the low-field distribution while a small
transport-cost term keeps each image близко to its own degradation, the
mechanism that makes the transport solution unique.

This is a miniature run (32x32, 40 images, a few epochs) so it finishes in
about a minute; the acceptance suite runs the full desk-scale version.

    python demos/03_teacher_pseudo_pairs.py
"""

import os
import time

import numpy as np

from fieldlift.arrays import SeededRng, write_pgm
from fieldlift.metrics import nmse
from fieldlift.ot import TeacherConfig, gen_pairs, train_teacher
from fieldlift.phantom import DegradationParams, PhantomSpec, degrade, reference_image

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

# %%
# Unpaired training bags
spec = PhantomSpec(size=32, seed=21)
params = DegradationParams()
n = 40
x15s = [reference_image(spec, i) for i in range(n)]
shuffle = SeededRng(99).permutation(n)
x05s = [degrade(x15s[j], params, SeededRng(21, (3, int(j)))) for j in shuffle]

held_x = [reference_image(spec, 500 + i) for i in range(6)]
held_f = [degrade(x, params, None) for x in held_x]  # noiseless ground-truth degradation
baseline = np.mean([nmse(f, x) for x, f in zip(held_x, held_f)])
print(f"doing nothing (identity) scores NMSE {baseline:.4f} against the true degradation")

# %%
# Train: 5 critic ascent steps per map step, Adam, lr decayed per epoch
t0 = time.time()
cfg = TeacherConfig(epochs=6, lambda_cost=0.1, map_channels=16, map_depth=3,
                    critic_channels=8, critic_downs=2, seed=0)
teacher, log = train_teacher(x15s, x05s, cfg)
trained = np.mean([nmse(f, teacher.apply(x)) for x, f in zip(held_x, held_f)])
print(f"trained teacher scores NMSE {trained:.4f} ({time.time()-t0:.0f}s, "
      f"{len(log)} map steps) -> ratio {trained/baseline:.2f}")

# %%
# Pseudo-pairs: the student's training set
pairs = gen_pairs(teacher, x15s[:4])
for i, (pseudo05, x15) in enumerate(pairs[:2]):
    write_pgm(os.path.join(OUT, f"pair_{i}_x15.pgm"), x15)
    write_pgm(os.path.join(OUT, f"pair_{i}_pseudo05.pgm"), pseudo05)
print(f"wrote {len(pairs)} pseudo-pairs; previews in {OUT}")
