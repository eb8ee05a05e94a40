#!/usr/bin/env python3
"""Run the network forward on a small cluster and probe its symmetry
behavior: exact translation/permutation invariance by construction, and
rotation equivariance deliberately NOT built in (it gets learned; see the
training demos)."""

import numpy as np

from escaip.geometry import AtomicSystem, translate
from escaip.model import ModelParams, forward, parameter_audit, tiny_config

config = tiny_config()
audit = parameter_audit(config)
print(f"model: {audit['total']:,} parameters")
for comp, count in audit["components"].items():
    print(f"  {comp:10s} {count:8,}  ({count / audit['total']:.1%})")

params = ModelParams.init(config, seed=0, dtype=np.float64)

rng = np.random.default_rng(3)
pos = rng.normal(scale=1.2, size=(6, 3))
sys_ = AtomicSystem(species=[8, 1, 1, 6, 6, 1], positions=pos)
pred = forward(sys_, params)
print(f"\nenergy: {pred.energy:+.6f} eV")
print("forces (eV/A):")
print(np.round(pred.forces, 4))

print("\n== translation invariance (exact by construction) ==")
moved = forward(translate(sys_, [10.0, -4.0, 2.5]), params)
print(f"  |dE| = {abs(moved.energy - pred.energy):.2e}, "
      f"max |dF| = {np.abs(moved.forces - pred.forces).max():.2e}")

print("\n== permutation symmetry ==")
perm = rng.permutation(6)
shuffled = forward(AtomicSystem(species=sys_.species[perm],
                                positions=sys_.positions[perm]), params)
print(f"  |dE| = {abs(shuffled.energy - pred.energy):.2e}, "
      f"max |dF| (rows permuted) = {np.abs(shuffled.forces - pred.forces[perm]).max():.2e}")

print("\n== rotation: NOT architecturally equivariant ==")
from escaip.data import SyntheticSpec, synth_generate
from escaip.diagnostics import equivariance_check, model_force_predictor

clusters = synth_generate(SyntheticSpec(count=64, seed=1, atoms=(3, 4)))
report = equivariance_check(model_force_predictor(params), clusters,
                            num_batches=8, seed=0, batch_size=16)
print(f"  mean cosine between rotated prediction and prediction of rotated "
      f"input: {report.mean:.3f}")
print("  (per batch:", np.round(report.per_batch, 3), ")")
print("far from 1 with random weights; training on rotated copies fixes this")
