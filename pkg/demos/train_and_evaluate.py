"""Train the plain baseline and one invariant variant on synthetic noise,
then score both on unseen noise levels. A scaled-down version of the
cross-degree experiment (a few hundred iterations, so it finishes in about a
minute; expect the full effect only from longer runs).

Run: python demos/train_and_evaluate.py [iters]
"""

import sys

import numpy as np

from dilkit import (ConfounderSet, NetConfig, TrainConfig, awgn, evaluate,
                    init, synth_clean_image, train)
from dilkit.degrade import mix

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 400

train_images = [synth_clean_image(mix(1234, 0, i), 96, 96) for i in range(12)]
eval_images = [synth_clean_image(mix(1234, 1, i), 96, 96) for i in range(4)]
seen = ConfounderSet(tuple(awgn(s) for s in (5, 10, 15, 20)))
unseen = [awgn(s) for s in (30, 40, 50)]
net0 = init(NetConfig(), seed=42)

print(f"training both variants for {iters} iterations on noise levels 5..20")
erm_net, erm_reps = train(net0, train_images, seen,
                          TrainConfig(variant="erm", beta=1e-2, iters=iters,
                                      batch=8, patch=24, seed=1))
sf_net, sf_reps = train(net0, train_images, seen,
                        TrainConfig(variant="dil_sf", alpha=1e-3, beta=1.0,
                                    iters=iters, batch=8, patch=24, seed=1))
print(f"final training loss: erm {np.mean([r.outer_loss for r in erm_reps[-20:]]):.4f}, "
      f"dil_sf {np.mean([r.outer_loss for r in sf_reps[-20:]]):.4f}")

erm_rep = evaluate(erm_net, {"synthetic": eval_images}, seen, unseen, seed=7)
sf_rep = evaluate(sf_net, {"synthetic": eval_images}, seen, unseen, seed=7)

print(f"\n{'level':>8} {'erm':>8} {'dil_sf':>8} {'gain':>8}")
for spec in unseen:
    e = erm_rep.mean_psnr(spec)
    s = sf_rep.mean_psnr(spec)
    print(f"{spec.label():>8} {e:8.2f} {s:8.2f} {s - e:+8.2f}")
print("\n(unseen-level PSNR in dB; the invariant variant should hold up better)")
