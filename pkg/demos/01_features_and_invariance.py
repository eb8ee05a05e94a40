#!/usr/bin/env python3
"""Walk through the input features: spherical harmonics, bond-orientational
order, and the radial basis expansion, with their invariance properties
checked numerically along the way."""

import numpy as np

from escaip.featurization import (RbfConfig, boo, rbf_expand, real_spherical_harmonics,
                                  sph_harm_all, sph_harm_block)
from escaip.geometry import AtomicSystem, build_neighbor_graph, random_rotation

rng = np.random.default_rng(0)

print("== real spherical harmonics ==")
d = rng.normal(size=3)
d /= np.linalg.norm(d)
print("direction:", np.round(d, 4))
for l in range(3):
    print(f"  l={l}:", np.round(real_spherical_harmonics(d, l), 5))

# the addition theorem pins the overall normalization: sum_m Y_lm^2 = (2l+1)/4pi
y = sph_harm_all(d, 6)
for l in (2, 4, 6):
    total = (y[sph_harm_block(l)] ** 2).sum()
    print(f"  sum_m Y_{l}m^2 = {total:.10f}  (expected {(2 * l + 1) / (4 * np.pi):.10f})")

print("\n== bond-orientational order ==")


def neighborhood(dirs):
    pos = np.vstack([[0.0, 0.0, 0.0], np.asarray(dirs, float)])
    sys_ = AtomicSystem(species=[6] * len(pos), positions=pos)
    return build_neighbor_graph(sys_, cutoff=1.5, max_neighbors=len(dirs) + 1)


octahedral = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
tetrahedral = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / np.sqrt(3)

for name, dirs in (("octahedral", octahedral), ("tetrahedral", tetrahedral)):
    vec = boo(neighborhood(dirs), 0, 6)
    print(f"  {name}: BOO(0..6) =", np.round(vec.values, 4))
print("  (order 0 is always 1; odd orders vanish for centrosymmetric shells)")

print("\nrotating a random neighborhood 5 times:")
dirs = rng.normal(size=(5, 3))
dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
base = boo(neighborhood(dirs), 0, 6).values
for k in range(5):
    rot = random_rotation(k)
    rotated = boo(neighborhood(dirs @ rot.matrix.T), 0, 6).values
    print(f"  rotation {k}: max |dBOO| = {np.abs(rotated - base).max():.2e}")

print("\n== radial basis expansion ==")
cfg = RbfConfig(num_basis=8, cutoff=3.0)
print("centers:", np.round(cfg.centers, 3), " width:", round(cfg.sigma, 3))
for dist in (0.8, 1.5, 2.9, 3.0):
    vals = rbf_expand(dist, cfg)
    print(f"  d={dist:.1f}: peak basis {int(np.argmax(vals))}, "
          f"max {vals.max():.4f}, all zero at cutoff: {not vals.any()}"
          if dist >= 3.0 else
          f"  d={dist:.1f}: peak basis {int(np.argmax(vals))}, max {vals.max():.4f}")
print("the envelope takes the value and slope smoothly to zero at the cutoff")
