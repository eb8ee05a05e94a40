"""Atomic systems, padded radius graphs, and rigid-motion utilities.

Neighbor search is a brute-force all-pairs scan (fine at desk scale) with
minimum-image convention for orthorhombic periodic cells. Neighborhoods are
padded to a fixed width M so downstream shapes stay static; slots beyond the
valid count carry mask False and sentinel index -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError

PAD_INDEX = -1


@dataclass
class AtomicSystem:
    """Atom species + positions, optional orthorhombic cell and labels.

    species: (N,) atomic numbers; positions: (N, 3) in Angstrom;
    cell: optional (3,) edge lengths with per-axis periodic flags;
    energy (eV) and forces (N, 3) (eV/A) are optional training labels.
    """

    species: np.ndarray
    positions: np.ndarray
    cell: np.ndarray | None = None
    pbc: tuple = (False, False, False)
    energy: float | None = None
    forces: np.ndarray | None = None

    def __post_init__(self):
        self.species = np.ascontiguousarray(np.asarray(self.species, dtype=np.int64))
        self.positions = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DataError(f"positions must be (N, 3), got {self.positions.shape}")
        if len(self.species) != len(self.positions):
            raise DataError("species and positions disagree on atom count")
        if self.species.size and self.species.min() < 1:
            raise DataError("atomic numbers must be >= 1")
        if not np.all(np.isfinite(self.positions)):
            raise DataError("non-finite coordinates")
        if self.cell is not None:
            self.cell = np.asarray(self.cell, dtype=np.float64).reshape(3)
            if np.any(self.cell <= 0):
                raise DataError("cell edge lengths must be positive")
            self.pbc = tuple(bool(p) for p in self.pbc)
            for ax in range(3):  # wrap periodic coordinates into the cell
                if self.pbc[ax]:
                    self.positions[:, ax] %= self.cell[ax]
        if self.forces is not None:
            self.forces = np.ascontiguousarray(np.asarray(self.forces, dtype=np.float64))
            if self.forces.shape != self.positions.shape:
                raise DataError("force labels must match positions shape")
        if self.energy is not None:
            self.energy = float(self.energy)

    def __len__(self):
        return len(self.species)

    def copy(self) -> "AtomicSystem":
        return AtomicSystem(
            species=self.species.copy(),
            positions=self.positions.copy(),
            cell=None if self.cell is None else self.cell.copy(),
            pbc=self.pbc,
            energy=self.energy,
            forces=None if self.forces is None else self.forces.copy(),
        )


@dataclass
class NeighborGraph:
    """Fixed-width neighbor table for one system.

    neighbor_index: (N, M) atom indices, PAD_INDEX where invalid;
    valid_mask: (N, M) booleans; unit_dirs: (N, M, 3) normalized displacements
    from each center atom toward its neighbor; distances: (N, M) in Angstrom.
    """

    neighbor_index: np.ndarray
    valid_mask: np.ndarray
    unit_dirs: np.ndarray
    distances: np.ndarray
    cutoff: float
    max_neighbors: int

    @property
    def num_atoms(self) -> int:
        return self.neighbor_index.shape[0]

    @property
    def valid_counts(self) -> np.ndarray:
        return self.valid_mask.sum(axis=1)

    @property
    def isolated_mask(self) -> np.ndarray:
        """True for atoms with no neighbor inside the cutoff."""
        return self.valid_counts == 0


def displacement_table(positions: np.ndarray, cell=None, pbc=(False, False, False)):
    """All-pairs displacement vectors r_j - r_i with minimum image on periodic axes."""
    diff = positions[None, :, :] - positions[:, None, :]
    if cell is not None:
        for ax in range(3):
            if pbc[ax]:
                diff[:, :, ax] -= cell[ax] * np.round(diff[:, :, ax] / cell[ax])
    return diff


def build_neighbor_graph(system: AtomicSystem, cutoff: float, max_neighbors: int) -> NeighborGraph:
    """Radius graph with nearest-M truncation and deterministic tie-breaking.

    Every atom collects all neighbors with 0 < d <= cutoff (minimum image when
    the system is periodic). If more than M qualify, the M nearest are kept,
    equidistant candidates resolved by ascending atom index. Self interaction
    is excluded. Periodic systems require cutoff < min(cell)/2 so the minimum
    image is unambiguous.
    """
    if cutoff <= 0:
        raise ConfigError("cutoff must be positive")
    if max_neighbors < 1:
        raise ConfigError("max_neighbors must be >= 1")
    if system.cell is not None and any(system.pbc):
        limit = min(system.cell[ax] for ax in range(3) if system.pbc[ax])
        if cutoff >= 0.5 * limit:
            raise ConfigError(
                f"cutoff {cutoff} violates the minimum-image bound (cell edge {limit})")
    n = len(system)
    m = max_neighbors
    idx = np.full((n, m), PAD_INDEX, dtype=np.int64)
    mask = np.zeros((n, m), dtype=bool)
    dirs = np.zeros((n, m, 3), dtype=np.float64)
    dist = np.zeros((n, m), dtype=np.float64)
    if n == 0:
        return NeighborGraph(idx, mask, dirs, dist, cutoff, m)

    diff = displacement_table(system.positions, system.cell, system.pbc)
    d = np.sqrt((diff * diff).sum(axis=-1))
    np.fill_diagonal(d, np.inf)  # no self interaction
    within = d <= cutoff
    for i in range(n):
        cand = np.nonzero(within[i])[0]
        if cand.size == 0:
            continue
        order = np.lexsort((cand, d[i, cand]))  # distance first, index breaks ties
        keep = cand[order][:m]
        k = keep.size
        idx[i, :k] = keep
        mask[i, :k] = True
        dist[i, :k] = d[i, keep]
        dirs[i, :k] = diff[i, keep] / d[i, keep][:, None]
    return NeighborGraph(idx, mask, dirs, dist, cutoff, m)


@dataclass
class Rotation:
    """A proper rotation: 3x3 orthogonal matrix with det = +1."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.allclose(self.matrix.T @ self.matrix, np.eye(3), atol=1e-12):
            raise ContractError("rotation matrix is not orthogonal to 1e-12")
        if abs(np.linalg.det(self.matrix) - 1.0) > 1e-12:
            raise ContractError("rotation matrix must have determinant +1")

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors) @ self.matrix.T

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)


def random_rotation(seed) -> Rotation:
    """Rotation drawn uniformly (Haar) over SO(3), deterministic per seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # make the O(3) draw unique, hence Haar
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]  # fixed reflection maps Haar on O(3)^- to SO(3)
    return Rotation(q)


def identity_rotation() -> Rotation:
    return Rotation(np.eye(3))


def rotation_about_z(angle_rad: float) -> Rotation:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return Rotation(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))


def apply_rotation(system: AtomicSystem, rotation: Rotation) -> AtomicSystem:
    """Rotate positions (and force labels) rigidly; species/energy unchanged.

    Periodic systems are rejected: an orthorhombic cell does not stay
    orthorhombic under a general rotation.
    """
    if system.cell is not None and any(system.pbc):
        raise ContractError("cannot rotate a periodic system with an orthorhombic cell")
    return AtomicSystem(
        species=system.species.copy(),
        positions=rotation.apply(system.positions),
        cell=None if system.cell is None else system.cell.copy(),
        pbc=system.pbc,
        energy=system.energy,
        forces=None if system.forces is None else rotation.apply(system.forces),
    )


def translate(system: AtomicSystem, shift) -> AtomicSystem:
    out = system.copy()
    out.positions = out.positions + np.asarray(shift, dtype=np.float64).reshape(1, 3)
    return out
