import numpy as np
import pytest

from escaip.geometry import AtomicSystem
from escaip.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    """Small config used wherever full-model wiring is exercised."""
    return ModelConfig(num_blocks=2, num_heads=2, message_size=8, node_width=10,
                       edge_width=6, readout_width=5, max_neighbors=4, cutoff=3.0,
                       l_max=3, energy_head_width=7, force_head_width=7, num_rbf=8,
                       species_embed_width=6, boo_embed_width=5)


def random_cluster(rng, n_atoms=5, species=(1, 6, 8), scale=1.0, min_dist=0.8):
    """A random cluster with a minimum-distance floor (no labels)."""
    while True:
        pos = rng.normal(scale=scale, size=(n_atoms, 3))
        diff = pos[None] - pos[:, None]
        d = np.sqrt((diff * diff).sum(-1)) + np.eye(n_atoms) * 10.0
        if d.min() >= min_dist:
            break
    return AtomicSystem(species=rng.choice(species, size=n_atoms), positions=pos)


@pytest.fixture
def cluster_factory(rng):
    def make(n_atoms=5, **kw):
        return random_cluster(rng, n_atoms=n_atoms, **kw)

    return make


def poison_padding(batch, rng):
    """Copy of a packed batch with random garbage in every padded slot."""
    import copy

    out = copy.deepcopy(batch)
    pad_edge = ~out.valid_mask
    out.unit_dirs[pad_edge] = rng.normal(size=(pad_edge.sum(), 3))
    out.rbf[pad_edge] = rng.normal(size=(pad_edge.sum(), out.rbf.shape[-1]))
    s, a, m = out.valid_mask.shape
    gather = out.gather_index.reshape(s, a, m).copy()
    randomized = rng.integers(0, s * a, size=(s, a, m))
    gather[pad_edge] = randomized[pad_edge]
    out.gather_index = gather.reshape(s * a, m)
    pad_atom = ~out.atom_mask
    out.boo[pad_atom] = rng.normal(size=(pad_atom.sum(), out.boo.shape[-1]))
    out.species[pad_atom] = rng.integers(1, 90, size=pad_atom.sum())
    return out
