"""Synthetic labeled data (the desk-scale ground truth), extended-XYZ file IO,
and dataset splitting.

Synthetic systems are labeled with exact analytic energies and forces from a
pair potential (Lennard-Jones or Morse), so every training metric has a known
oracle. Generation derives one RNG stream per sample index from the spec seed,
making output deterministic regardless of how work is distributed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elements import symbol_to_z, z_to_symbol
from .errors import ConfigError, ParseError, UnsupportedCellError
from .geometry import AtomicSystem, displacement_table


# ---------------------------------------------------------------------------
# Pair potentials.

def lorentz_berthelot(params_a, params_b):
    """Combine per-species (epsilon, sigma) into pair values."""
    eps = float(np.sqrt(params_a[0] * params_b[0]))
    sigma = 0.5 * (params_a[1] + params_b[1])
    return eps, sigma


def lj_pair_energy(r, eps, sigma):
    sr6 = (sigma / r) ** 6
    return 4.0 * eps * (sr6 * sr6 - sr6)


def lj_pair_dudr(r, eps, sigma):
    sr6 = (sigma / r) ** 6
    return -24.0 * eps * (2.0 * sr6 * sr6 - sr6) / r


def morse_pair_energy(r, d, a, r0):
    e = np.exp(-a * (r - r0))
    return d * (1.0 - e) ** 2 - d


def morse_pair_dudr(r, d, a, r0):
    e = np.exp(-a * (r - r0))
    return 2.0 * d * a * (1.0 - e) * e


@dataclass
class SyntheticSpec:
    """Recipe for a labeled synthetic dataset.

    kind: "lj" or "morse"; species: palette of atomic numbers with per-species
    potential parameters ((eps, sigma) for LJ, (D, a, r0) for Morse) combined
    by Lorentz-Berthelot mixing; atoms: inclusive (min, max) cluster size;
    mode: "cluster" (free boundary) or "box" (periodic cube, box_edge);
    jitter: Gaussian displacement (A) applied after placement; min_dist_factor
    scales the per-pair sigma/r0 rejection threshold (never below 0.7).
    """

    kind: str = "lj"
    species: dict = field(default_factory=lambda: {18: (1.0, 1.0)})
    atoms: tuple = (3, 5)
    mode: str = "cluster"
    box_edge: float = 8.0
    jitter: float = 0.05
    count: int = 100
    seed: int = 0
    min_dist_factor: float = 0.9
    attach_range: tuple = (0.95, 1.35)

    def __post_init__(self):
        if self.kind not in ("lj", "morse"):
            raise ConfigError(f"unknown potential kind {self.kind!r}")
        if self.mode not in ("cluster", "box"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.atoms[0] < 2 or self.atoms[1] < self.atoms[0]:
            raise ConfigError("atoms range must satisfy 2 <= min <= max")
        if self.min_dist_factor < 0.7:
            raise ConfigError("min_dist_factor below 0.7 risks force blowups")
        for z, p in self.species.items():
            if any(v <= 0 for v in p):
                raise ConfigError(f"pair parameters for species {z} must be positive")

    def pair_params(self, za: int, zb: int):
        pa, pb = self.species[za], self.species[zb]
        if self.kind == "lj":
            return lorentz_berthelot(pa, pb)
        d = float(np.sqrt(pa[0] * pb[0]))
        a = 0.5 * (pa[1] + pb[1])
        r0 = 0.5 * (pa[2] + pb[2])
        return d, a, r0

    def pair_length(self, za: int, zb: int) -> float:
        """Characteristic pair length: sigma (LJ) or r0 (Morse)."""
        p = self.pair_params(za, zb)
        return p[1] if self.kind == "lj" else p[2]


def pair_energy_forces(positions, species, spec: SyntheticSpec,
                       cell=None, pbc=(False, False, False)):
    """Exact analytic energy and forces of the pair potential.

    E = sum over pairs of phi(r); F_i = -dE/dx_i in closed form. Periodic
    systems sum over minimum images only (consistent with the generator).
    """
    positions = np.asarray(positions, dtype=np.float64)
    species = np.asarray(species, dtype=int)
    n = len(positions)
    diff = displacement_table(positions, cell, pbc)  # r_j - r_i
    dist = np.sqrt((diff * diff).sum(axis=-1))
    energy = 0.0
    forces = np.zeros((n, 3))
    for i in range(n):
        for j in range(i + 1, n):
            r = dist[i, j]
            p = spec.pair_params(species[i], species[j])
            if spec.kind == "lj":
                energy += lj_pair_energy(r, *p)
                dudr = lj_pair_dudr(r, *p)
            else:
                energy += morse_pair_energy(r, *p)
                dudr = morse_pair_dudr(r, *p)
            # dE/dx_i = dudr * d r/dx_i, with r pointing j -> i via -diff
            f_on_i = dudr * diff[i, j] / r
            forces[i] += f_on_i
            forces[j] -= f_on_i
    return float(energy), forces


def analytic_force_field(spec: SyntheticSpec):
    """Callable system -> (energy, forces) for the spec's exact potential."""

    def field_fn(system: AtomicSystem):
        return pair_energy_forces(system.positions, system.species, spec,
                                  system.cell, system.pbc)

    return field_fn


def _min_dist_ok(positions, species, spec, cell, pbc, candidate, cand_z):
    if len(positions) == 0:
        return True
    pos = np.asarray(positions)
    diff = pos - candidate
    if cell is not None:
        for ax in range(3):
            if pbc[ax]:
                diff[:, ax] -= cell[ax] * np.round(diff[:, ax] / cell[ax])
    d = np.sqrt((diff * diff).sum(axis=1))
    for k, z in enumerate(species):
        if d[k] < spec.min_dist_factor * spec.pair_length(z, cand_z):
            return False
    return True


def _generate_one(spec: SyntheticSpec, index: int) -> AtomicSystem:
    rng = np.random.default_rng([spec.seed, index])
    n = int(rng.integers(spec.atoms[0], spec.atoms[1] + 1))
    palette = sorted(spec.species)
    species = [int(rng.choice(palette)) for _ in range(n)]
    cell = np.full(3, spec.box_edge) if spec.mode == "box" else None
    pbc = (True, True, True) if spec.mode == "box" else (False, False, False)

    for attempt in range(200):
        positions: list = []
        ok = True
        for k in range(n):
            placed = False
            for _ in range(200):
                if spec.mode == "box":
                    cand = rng.uniform(0.0, spec.box_edge, size=3)
                elif k == 0:
                    cand = np.zeros(3)
                else:
                    anchor = positions[int(rng.integers(0, k))]
                    direction = rng.normal(size=3)
                    direction /= np.linalg.norm(direction)
                    scale = spec.pair_length(species[k], species[k])
                    cand = anchor + direction * rng.uniform(*spec.attach_range) * scale
                if _min_dist_ok(positions, species[:k], spec, cell, pbc, cand, species[k]):
                    positions.append(cand)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        pos = np.array(positions)
        if spec.jitter > 0:
            jit = pos + rng.normal(0.0, spec.jitter, size=pos.shape)
            # keep the jitter only if it does not violate the distance floor
            good = all(_min_dist_ok(np.delete(jit, k, axis=0),
                                    species[:k] + species[k + 1:],
                                    spec, cell, pbc, jit[k], species[k])
                       for k in range(n))
            if good:
                pos = jit
        energy, forces = pair_energy_forces(pos, species, spec, cell, pbc)
        return AtomicSystem(species=species, positions=pos, cell=cell, pbc=pbc,
                            energy=energy, forces=forces)
    raise ConfigError(
        f"rejection sampling failed for sample {index}: spec too dense for the distance floor")


def synth_generate(spec: SyntheticSpec, workers: int = 1) -> list:
    """Generate ``spec.count`` labeled systems, deterministic per (seed, index)."""
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_generate_one, [spec] * spec.count, range(spec.count)))
    return [_generate_one(spec, i) for i in range(spec.count)]


# ---------------------------------------------------------------------------
# Extended XYZ.

_FLOAT_FMT = "%.10g"  # 10 significant digits; idempotent under re-parse


def _fmt(x: float) -> str:
    return _FLOAT_FMT % float(x)


def write_extxyz(path, systems):
    """Write systems to one extended-XYZ file (frames back to back)."""
    if isinstance(systems, AtomicSystem):
        systems = [systems]
    lines = []
    for sys_ in systems:
        props = "species:S:1:pos:R:3"
        if sys_.forces is not None:
            props += ":forces:R:3"
        comment = []
        if sys_.cell is not None:
            lat = np.zeros((3, 3))
            np.fill_diagonal(lat, sys_.cell)
            nums = " ".join(_fmt(v) for v in lat.reshape(-1))
            comment.append(f'Lattice="{nums}"')
            comment.append("pbc=\"%s\"" % " ".join("T" if p else "F" for p in sys_.pbc))
        comment.append(f"Properties={props}")
        if sys_.energy is not None:
            comment.append(f"energy={_fmt(sys_.energy)}")
        lines.append(str(len(sys_)))
        lines.append(" ".join(comment))
        for i in range(len(sys_)):
            cols = [z_to_symbol(int(sys_.species[i]))]
            cols += [_fmt(v) for v in sys_.positions[i]]
            if sys_.forces is not None:
                cols += [_fmt(v) for v in sys_.forces[i]]
            lines.append(" ".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


_KEY_VALUE_RE = re.compile(r'(\w+)\s*=\s*(?:"([^"]*)"|(\S+))')


def _parse_comment(comment: str, lineno: int):
    info = {}
    for m in _KEY_VALUE_RE.finditer(comment):
        info[m.group(1)] = m.group(2) if m.group(2) is not None else m.group(3)
    return info


def _parse_lattice(text: str, lineno: int):
    try:
        nums = np.array([float(v) for v in text.split()], dtype=np.float64)
    except ValueError as e:
        raise ParseError(f"line {lineno}: bad Lattice value") from e
    if nums.size != 9:
        raise ParseError(f"line {lineno}: Lattice must have 9 numbers")
    lat = nums.reshape(3, 3)
    off_diag = lat - np.diag(np.diag(lat))
    if np.any(off_diag != 0.0):
        raise UnsupportedCellError(
            f"line {lineno}: non-orthorhombic lattice is not supported")
    return np.diag(lat).copy()


def parse_extxyz(path) -> list:
    """Parse an extended-XYZ file into a list of AtomicSystem.

    Supports the subset this package writes: a count line, a comment line
    with key=value pairs (Lattice, Properties, energy, pbc), and per-atom
    lines with species symbol, position, and optional forces.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    systems = []
    i = 0
    while i < len(lines):
        if lines[i].strip() == "" and i == len(lines) - 1:
            break
        try:
            natoms = int(lines[i].strip())
        except ValueError as e:
            raise ParseError(f"line {i + 1}: expected atom count, got {lines[i]!r}") from e
        if i + 1 + natoms >= len(lines) + 1 and natoms > 0:
            raise ParseError(f"line {i + 1}: frame truncated")
        info = _parse_comment(lines[i + 1] if i + 1 < len(lines) else "", i + 2)
        props = info.get("Properties", "species:S:1:pos:R:3")
        fields = props.split(":")
        col_names, col_counts = fields[0::3], [int(x) for x in fields[2::3]]
        cell = _parse_lattice(info["Lattice"], i + 2) if "Lattice" in info else None
        pbc = (False, False, False)
        if "pbc" in info:
            pbc = tuple(tok == "T" for tok in info["pbc"].split())
        elif cell is not None:
            pbc = (True, True, True)
        energy = float(info["energy"]) if "energy" in info else None

        species, positions, forces = [], [], []
        has_forces = "forces" in col_names
        for k in range(natoms):
            lineno = i + 3 + k
            if lineno - 1 >= len(lines):
                raise ParseError(f"line {lineno}: frame truncated")
            toks = lines[lineno - 1].split()
            expected = sum(col_counts)
            if len(toks) != expected:
                raise ParseError(
                    f"line {lineno}: expected {expected} columns, got {len(toks)}")
            col = 0
            row = {}
            for name, cnt in zip(col_names, col_counts):
                row[name] = toks[col:col + cnt]
                col += cnt
            try:
                species.append(symbol_to_z(row["species"][0]))
                positions.append([float(v) for v in row["pos"]])
                if has_forces:
                    forces.append([float(v) for v in row["forces"]])
            except (KeyError, ValueError) as e:
                raise ParseError(f"line {lineno}: {e}") from e
        systems.append(AtomicSystem(
            species=np.array(species, dtype=np.int64),
            positions=np.array(positions, dtype=np.float64).reshape(natoms, 3),
            cell=cell, pbc=pbc, energy=energy,
            forces=np.array(forces) if has_forces else None))
        i += 2 + natoms
        while i < len(lines) and lines[i].strip() == "":
            i += 1
    return systems


# ---------------------------------------------------------------------------
# Splits and manifests.

@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int

    def sizes(self):
        return (len(self.train), len(self.val), len(self.test))


def split(dataset, ratios, seed: int) -> DatasetSplit:
    """Deterministic shuffled partition into train/val/test index lists.

    ratios must sum to 1; a strictly positive ratio that rounds to zero
    elements is a configuration error (an explicitly zero ratio is fine).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(dataset)
    raw = [r * n for r in ratios]
    sizes = [int(np.floor(v)) for v in raw]
    remainders = [v - s for v, s in zip(raw, sizes)]
    for _ in range(n - sum(sizes)):  # largest remainder keeps the total exact
        k = int(np.argmax(remainders))
        sizes[k] += 1
        remainders[k] = -1.0
    for r, s in zip(ratios, sizes):
        if r > 0 and s == 0:
            raise ConfigError(f"ratio {r} yields an empty partition for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(train=perm[:a].tolist(), val=perm[a:b].tolist(),
                        test=perm[b:].tolist(), seed=seed)


def write_manifest(path, files, dataset_split: DatasetSplit, extra: dict | None = None):
    payload = {
        "files": [str(f) for f in files],
        "split": {"train": dataset_split.train, "val": dataset_split.val,
                  "test": dataset_split.test},
        "seed": dataset_split.seed,
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path):
    payload = json.loads(Path(path).read_text())
    ds = DatasetSplit(train=payload["split"]["train"], val=payload["split"]["val"],
                      test=payload["split"]["test"], seed=payload["seed"])
    return payload["files"], ds


def load_dataset(directory) -> list:
    """Read every system listed in a directory's manifest, in manifest order."""
    directory = Path(directory)
    files, _ = read_manifest(directory / "manifest.json")
    systems = []
    for f in files:
        systems.extend(parse_extxyz(directory / f))
    return systems
