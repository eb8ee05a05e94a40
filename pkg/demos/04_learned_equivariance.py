#!/usr/bin/env python3
"""The learned-equivariance measurement: predict forces, rotate the batch,
predict again, and compare against the rotated first prediction by cosine
similarity. The analytic-gradient oracle validates the metric (exactly 1),
an untrained network scores low, and a briefly trained one climbs."""

from escaip.data import SyntheticSpec, analytic_force_field, split, synth_generate
from escaip.diagnostics import (equivariance_check, model_force_predictor,
                                oracle_force_predictor)
from escaip.model import ModelConfig, ModelParams
from escaip.training import LossWeights, TrainConfig, train

spec = SyntheticSpec(kind="lj", species={18: (1.0, 1.0)}, count=300, seed=5,
                     atoms=(3, 4), jitter=0.05)
systems = synth_generate(spec)
ds = split(systems, (0.9, 0.1, 0.0), seed=5)
train_sys = [systems[i] for i in ds.train]
val_sys = [systems[i] for i in ds.val]

print("== metric validation on the exact-gradient oracle ==")
oracle = oracle_force_predictor(analytic_force_field(spec))
report = equivariance_check(oracle, val_sys, num_batches=16, seed=0, batch_size=16)
print(f"  mean cosine = {report.mean:.12f} over {report.num_batches} batches "
      "(an equivariant predictor scores exactly 1)")

config = ModelConfig(num_blocks=2, num_heads=4, message_size=32, node_width=64,
                     edge_width=16, readout_width=32, max_neighbors=3, l_max=4,
                     num_rbf=16, species_embed_width=16, boo_embed_width=16,
                     energy_head_width=32, force_head_width=32)
params = ModelParams.init(config, seed=0)

print("\n== untrained network ==")
before = equivariance_check(model_force_predictor(params), val_sys,
                            num_batches=16, seed=1, batch_size=16)
print(f"  mean cosine = {before.mean:.4f} (symmetry-breaking direction head)")

print("\n== after training with rotation augmentation ==")
tc = TrainConfig(epochs=30, batch_size=128, lr=3e-3, augment=8, seed=0,
                 weights=LossWeights(energy=4.0, force=100.0),
                 equiv_batches=2, equiv_batch_size=16)
result = train(train_sys, val_sys, params, tc)
after = equivariance_check(model_force_predictor(result.state.best_params()),
                           val_sys, num_batches=16, seed=1, batch_size=16)
print(f"  mean cosine = {after.mean:.4f}")
print("\nper-epoch cosine trace from the training log:")
trace = [round(row[5], 4) for row in result.metrics]
print(" ", trace[:10], "...", trace[-3:])
print("rotation symmetry is learned from the augmented data, not wired in")
