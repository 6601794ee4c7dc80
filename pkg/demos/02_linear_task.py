"""Train a small flow stack on the synthetic task target = P @ source + b,
then check conversion quality and that the inverse still recovers the input.

    python demos/02_linear_task.py [steps]
"""

import sys
import time

import numpy as np

from invvc.evaluation import msd, roundtrip_report
from invvc.model import InvvcModel, ModelConfig, NetConfig
from invvc.synthetic import linear_task, random_mels
from invvc.training import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500

task = linear_task(n_pairs=200, n_frames=40, seed=0)
config = ModelConfig(n_invconv=2, n_flows=4, net=NetConfig(n_blocks=1, d_h=32, block_inner_channels=64))
model = InvvcModel(config, seed=0, dtype=np.float32)
print(f"{model.parameter_count()} parameters, training {steps} steps")

t0 = time.time()
result = train(
    task.pairs,
    model,
    TrainConfig(crop_length=40, max_steps=steps),
    callback=lambda s, v: print(f"  step {s:5d}  loss {v:.4f}") if s % max(1, steps // 10) == 0 else None,
)
print(f"done in {time.time() - t0:.0f}s, loss {result.losses[0]:.2f} -> {result.losses[-1]:.3f}")

rng = np.random.default_rng(7)
src = [random_mels(rng, 40) for _ in range(10)]
tgt = [task.target_of(s) for s in src]
before = np.mean([msd(s, t) for s, t in zip(src, tgt)])
after = np.mean([msd(result.model.convert(s), t) for s, t in zip(src, tgt)])
print(f"held-out MSD to target: {before:.1f} dB unconverted, {after:.1f} dB converted")

long = [random_mels(rng, n) for n in (120, 250)]
for bits, m in (("32-bit", result.model), ("64-bit", result.model.astype(np.float64))):
    rows = roundtrip_report(m, long)
    print(f"{bits} invert(convert(x)): max MSD {max(r.msd_db for r in rows):.2e} dB, "
          f"max |error| {max(r.max_abs_error for r in rows):.2e}")
