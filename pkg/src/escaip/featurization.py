"""Input attributes for the network: spherical harmonics, bond-orientational
order, radial basis expansion, and the input-block feature computation.

All node-level attributes computed here are rotation and translation
invariant; raw unit directions are passed through separately for the force
head and carry no invariance claim.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .geometry import AtomicSystem, NeighborGraph
from .tensor import Tensor

FOUR_PI = 4.0 * np.pi


# ---------------------------------------------------------------------------
# Real spherical harmonics.
#
# Orthonormal real harmonics without the Condon-Shortley phase, evaluated
# directly from Cartesian unit vectors. For m >= 0 let
#     A_l^m(z) = P_l^m(z) / sin(theta)^m          (a polynomial in z)
# computed by the standard three-term recurrence, and
#     C_m + i S_m = (x + i y)^m = sin(theta)^m e^{i m phi},
# so Y_{l,m} = sqrt(2) K_lm A_l^m C_m, Y_{l,-m} = sqrt(2) K_lm A_l^m S_m and
# Y_{l,0} = K_l0 A_l^0, with K_lm = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!).
# The sin^m factors cancel, so nothing blows up at the poles.

_norm_cache: dict = {}


def _normalization(l_max: int) -> np.ndarray:
    """K_lm table, shape (l_max+1, l_max+1); entry [l, m] valid for m <= l."""
    if l_max in _norm_cache:
        return _norm_cache[l_max]
    import math

    k = np.zeros((l_max + 1, l_max + 1))
    for l in range(l_max + 1):
        for m_ in range(l + 1):
            ratio = math.factorial(l - m_) / math.factorial(l + m_)
            k[l, m_] = np.sqrt((2 * l + 1) / FOUR_PI * ratio)
    _norm_cache[l_max] = k
    return k


def num_sph_components(l_max: int) -> int:
    return (l_max + 1) ** 2


def sph_harm_block(l: int):
    """Slice of the flattened harmonics array holding order l (m = -l..l)."""
    return slice(l * l, (l + 1) * (l + 1))


def sph_harm_all(dirs: np.ndarray, l_max: int) -> np.ndarray:
    """Real spherical harmonics for every order 0..l_max, vectorized.

    dirs: (..., 3) unit vectors (not checked here; the public wrapper checks).
    Returns (..., (l_max+1)^2) with block l at [l^2, (l+1)^2) and m ordered
    -l..l inside each block.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    k = _normalization(l_max)
    out = np.zeros(dirs.shape[:-1] + (num_sph_components(l_max),), dtype=np.float64)

    # C_m + i S_m = (x + i y)^m
    c = {0: np.ones_like(z)}
    s = {0: np.zeros_like(z)}
    for m_ in range(1, l_max + 1):
        c[m_] = x * c[m_ - 1] - y * s[m_ - 1]
        s[m_] = x * s[m_ - 1] + y * c[m_ - 1]

    # A_l^m = P_l^m / sin^m, recurrence in l:
    #   A_l^l = (2l-1) A_{l-1}^{l-1},  A_l^{l-1} = (2l-1) z A_{l-1}^{l-1},
    #   A_l^m = ((2l-1) z A_{l-1}^m - (l-1+m) A_{l-2}^m) / (l - m)
    sqrt2 = np.sqrt(2.0)
    a_prev: dict = {}
    a_curr = {0: np.ones_like(z)}
    for l in range(l_max + 1):
        if l > 0:
            a_next = {l: (2 * l - 1) * a_curr[l - 1],
                      l - 1: (2 * l - 1) * z * a_curr[l - 1]}
            for m_ in range(l - 1):
                a_next[m_] = ((2 * l - 1) * z * a_curr[m_]
                              - (l - 1 + m_) * a_prev[m_]) / (l - m_)
            a_prev, a_curr = a_curr, a_next
        blk = l * l + l  # index of m = 0 within the flat layout
        for m_ in range(l + 1):
            base = k[l, m_] * a_curr[m_]
            if m_ == 0:
                out[..., blk] = base
            else:
                out[..., blk + m_] = sqrt2 * base * c[m_]
                out[..., blk - m_] = sqrt2 * base * s[m_]
    return out


def real_spherical_harmonics(direction, l: int) -> np.ndarray:
    """The 2l+1 real spherical harmonics of order l at a unit direction."""
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(d)
    if abs(norm - 1.0) > 1e-9:
        raise ContractError(f"direction must be a unit vector, |d| = {norm}")
    if l < 0:
        raise ContractError("order l must be nonnegative")
    return sph_harm_all(d, l)[sph_harm_block(l)]


# ---------------------------------------------------------------------------
# Bond-orientational order.

@dataclass
class BooVector:
    """Per-node rotation-invariant directional descriptor, orders 0..L.

    values[l] is the L2 moment of the neighbor-direction distribution at
    order l (square root taken outside the m-sum, which is what makes it
    invariant); an empty neighborhood yields the zero vector with the
    isolated flag set.
    """

    values: np.ndarray
    isolated: bool = False


def boo_all(graph: NeighborGraph, l_max: int) -> np.ndarray:
    """Bond-orientational order for every atom; (N, l_max+1), zeros when isolated."""
    y = sph_harm_all(graph.unit_dirs, l_max)  # (N, M, comps)
    y = y * graph.valid_mask[..., None]
    counts = graph.valid_counts.astype(np.float64)
    denom = np.maximum(counts, 1.0)
    q = y.sum(axis=1) / denom[:, None]  # (N, comps) mean over valid neighbors
    out = np.zeros((graph.num_atoms, l_max + 1), dtype=np.float64)
    for l in range(l_max + 1):
        blk = q[:, sph_harm_block(l)]
        out[:, l] = np.sqrt(FOUR_PI / (2 * l + 1) * (blk * blk).sum(axis=1))
    out[counts == 0] = 0.0
    return out


def boo(graph: NeighborGraph, node: int, l_max: int) -> BooVector:
    """Bond-orientational order vector of one node (orders 0..l_max)."""
    values = boo_all(graph, l_max)[node]
    return BooVector(values=values, isolated=bool(graph.isolated_mask[node]))


# ---------------------------------------------------------------------------
# Radial basis expansion.

@dataclass
class RbfConfig:
    """Gaussian radial basis on (0, cutoff] with a smooth cutoff envelope."""

    num_basis: int
    cutoff: float
    width: float | None = None  # None -> center spacing

    def __post_init__(self):
        if self.num_basis < 1:
            raise ConfigError("num_basis must be >= 1")
        if self.cutoff <= 0:
            raise ConfigError("cutoff must be positive")
        if self.width is not None and self.width <= 0:
            raise ConfigError("width must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.cutoff / self.num_basis, self.cutoff, self.num_basis)

    @property
    def sigma(self) -> float:
        return self.width if self.width is not None else self.cutoff / self.num_basis


def envelope(distance, cutoff: float):
    """Polynomial cutoff (1 - (d/r)^2)^2: zero value and slope at r, zero beyond."""
    d = np.asarray(distance, dtype=np.float64)
    u = 1.0 - (d / cutoff) ** 2
    return np.where(d < cutoff, u * u, 0.0)


def gaussian_basis(distance, cfg: RbfConfig) -> np.ndarray:
    """Gaussian bumps exp(-(d - c_i)^2 / (2 sigma^2)) without the envelope."""
    d = np.asarray(distance, dtype=np.float64)[..., None]
    delta = d - cfg.centers
    return np.exp(-(delta * delta) / (2.0 * cfg.sigma ** 2))


def rbf_expand(distance, cfg: RbfConfig) -> np.ndarray:
    """Envelope-weighted Gaussian expansion; zero vector beyond the cutoff."""
    d = np.asarray(distance, dtype=np.float64)
    if d.ndim == 0 and d <= 0:
        raise ContractError("distance must be positive")
    return gaussian_basis(d, cfg) * envelope(d, cfg.cutoff)[..., None]


# ---------------------------------------------------------------------------
# Precomputed per-system attributes and the input block.

@dataclass
class Attributes:
    """Rotation-invariant graph attributes plus the raw direction passthrough.

    These are exactly the quantities that can be computed once per system
    and cached; everything downstream of them is parameter-dependent.
    """

    species: np.ndarray        # (N,)
    boo: np.ndarray            # (N, l_max+1)
    rbf: np.ndarray            # (N, M, num_basis), masked slots zero
    unit_dirs: np.ndarray      # (N, M, 3)
    valid_mask: np.ndarray     # (N, M)
    neighbor_index: np.ndarray  # (N, M), sentinel -1 where invalid
    isolated: np.ndarray       # (N,)


def precompute_attributes(system: AtomicSystem, graph: NeighborGraph,
                          l_max: int, rbf_cfg: RbfConfig) -> Attributes:
    rbf = rbf_expand(graph.distances, rbf_cfg)
    rbf *= graph.valid_mask[..., None]
    return Attributes(
        species=system.species.copy(),
        boo=boo_all(graph, l_max),
        rbf=rbf,
        unit_dirs=graph.unit_dirs.copy(),
        valid_mask=graph.valid_mask.copy(),
        neighbor_index=graph.neighbor_index.copy(),
        isolated=graph.isolated_mask,
    )


@dataclass
class FeatureSet:
    """Model-ready features: per-node and per-edge tensors plus directions."""

    node_features: Tensor    # (N, node_width)
    edge_features: Tensor    # (N, M, edge_width), masked slots zero
    unit_dirs: np.ndarray    # (N, M, 3) passthrough for the force head
    valid_mask: np.ndarray   # (N, M)


def apply_input_block(attrs: Attributes, params: dict, max_species: int,
                      dtype=np.float64) -> FeatureSet:
    """Run the input-block networks over precomputed attributes."""
    if attrs.species.size and attrs.species.max() > max_species:
        raise DataError(
            f"species {int(attrs.species.max())} outside the embedding table (max {max_species})")
    if attrs.species.size and attrs.species.min() < 0:
        raise DataError("atomic numbers must be >= 0 (0 is the padding row)")
    species_emb = T.gather_rows(params["input.species_embed"], attrs.species)
    boo_emb = nn.ffn(Tensor(attrs.boo, dtype=dtype), params, "input.boo_ffn")
    node = nn.ffn(T.concat([species_emb, boo_emb], axis=-1), params, "input.node_ffn")
    edge = nn.ffn(Tensor(attrs.rbf, dtype=dtype), params, "input.edge_ffn")
    edge = T.mul(edge, Tensor(attrs.valid_mask[..., None].astype(dtype)))
    return FeatureSet(node_features=node, edge_features=edge,
                      unit_dirs=attrs.unit_dirs, valid_mask=attrs.valid_mask)


def featurize(system: AtomicSystem, graph: NeighborGraph, params: dict,
              l_max: int, rbf_cfg: RbfConfig, max_species: int = 100,
              dtype=np.float64) -> FeatureSet:
    """Full input block: attributes then embedding networks.

    Deterministic given params; node features inherit the invariance of the
    attributes they are built from.
    """
    attrs = precompute_attributes(system, graph, l_max, rbf_cfg)
    return apply_input_block(attrs, params, max_species, dtype=dtype)


# ---------------------------------------------------------------------------
# Attribute cache file: graph fingerprint -> Attributes.

def attributes_key(system: AtomicSystem, graph: NeighborGraph, l_max: int,
                   rbf_cfg: RbfConfig) -> str:
    h = hashlib.sha256()
    for arr in (system.species, graph.neighbor_index, graph.valid_mask,
                graph.distances, graph.unit_dirs):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(f"{graph.cutoff}:{graph.max_neighbors}:{l_max}:"
             f"{rbf_cfg.num_basis}:{rbf_cfg.cutoff}:{rbf_cfg.sigma}".encode())
    return h.hexdigest()


class FeatureCache:
    """On-disk store of precomputed Attributes, keyed by graph fingerprint.

    One .npz per key inside ``directory``; values round-trip bit-exactly.
    """

    def __init__(self, directory):
        from pathlib import Path

        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str):
        return self.directory / f"{key}.npz"

    def get(self, key: str) -> Attributes | None:
        path = self._path(key)
        if not path.exists():
            return None
        with np.load(path) as z:
            return Attributes(species=z["species"], boo=z["boo"], rbf=z["rbf"],
                              unit_dirs=z["unit_dirs"], valid_mask=z["valid_mask"],
                              neighbor_index=z["neighbor_index"], isolated=z["isolated"])

    def put(self, key: str, attrs: Attributes):
        np.savez(self._path(key), species=attrs.species, boo=attrs.boo,
                 rbf=attrs.rbf, unit_dirs=attrs.unit_dirs,
                 valid_mask=attrs.valid_mask, neighbor_index=attrs.neighbor_index,
                 isolated=attrs.isolated)
