"""Measurement protocols: learned-equivariance analysis, parameter-controlled
scaling ablations with log-log slope fits, throughput/memory benchmarking, and
Langevin molecular dynamics with the interatomic-distance distribution h(r).

Internal MD units are eV, Angstrom, amu; one internal time unit is
sqrt(amu A^2 / eV) = 10.180506 fs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .elements import masses_for
from .errors import ConfigError, ContractError
from .geometry import AtomicSystem, apply_rotation, random_rotation
from .model import ModelParams, forward_batch, pack_batch, parameter_audit, predict_forces

KB_EV = 8.617333262e-5          # Boltzmann constant, eV/K
TIME_UNIT_FS = 10.180506        # sqrt(amu A^2 / eV) expressed in fs
COS_SKIP_NORM = 1e-10           # atoms with smaller force norms are skipped


# ---------------------------------------------------------------------------
# Force providers.

def model_force_predictor(params: ModelParams):
    """systems -> list of (N, 3) force arrays, batched through the model."""

    def predict(systems):
        return predict_forces(systems, params)

    return predict


def model_force_field(params: ModelParams):
    """system -> (energy, forces) adapter for the MD driver."""

    def field_fn(system: AtomicSystem):
        from .model import forward

        pred = forward(system, params)
        return pred.energy, pred.forces

    return field_fn


def oracle_force_predictor(field_fn):
    """Wrap an (energy, forces) field into the predictor protocol."""

    def predict(systems):
        return [np.asarray(field_fn(s)[1], dtype=np.float64) for s in systems]

    return predict


# ---------------------------------------------------------------------------
# Learned rotational equivariance.

@dataclass
class EquivarianceReport:
    per_batch: list
    mean: float
    num_batches: int
    rotation_seeds: list


def equivariance_check(predictor, systems, num_batches: int = 128, seed=0,
                       batch_size: int = 32) -> EquivarianceReport:
    """Cosine-similarity protocol for rotational equivariance.

    Per batch: predict forces (A), rotate the batch and predict again (B),
    then score the per-atom cosine between B and the rotated A, skipping
    atoms whose force norm is below 1e-10 under either prediction. Batch
    scores are per-atom means; the report averages them over batches.
    """
    if len(systems) == 0:
        raise ContractError("equivariance_check needs a nonempty dataset")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scores = []
    rotation_seeds = []
    for b in range(num_batches):
        idx = rng.integers(0, len(systems), size=min(batch_size, len(systems)))
        batch = [systems[i] for i in idx]
        rot_seed = int(rng.integers(0, 2 ** 62))
        rotation_seeds.append(rot_seed)
        rot = random_rotation(rot_seed)
        forces_a = predictor(batch)
        forces_b = predictor([apply_rotation(s, rot) for s in batch])
        cos_vals = []
        for fa, fb in zip(forces_a, forces_b):
            ra = fa @ rot.matrix.T
            na = np.linalg.norm(ra, axis=1)
            nb = np.linalg.norm(fb, axis=1)
            keep = (na >= COS_SKIP_NORM) & (nb >= COS_SKIP_NORM)
            if keep.any():
                dots = (ra[keep] * fb[keep]).sum(axis=1) / (na[keep] * nb[keep])
                cos_vals.extend(dots)
        scores.append(float(np.mean(cos_vals)) if cos_vals else float("nan"))
    valid = [s for s in scores if np.isfinite(s)]
    return EquivarianceReport(per_batch=scores,
                              mean=float(np.mean(valid)) if valid else float("nan"),
                              num_batches=num_batches,
                              rotation_seeds=rotation_seeds)


# ---------------------------------------------------------------------------
# Parameter-controlled scaling study.

@dataclass
class ScalingResult:
    rows: list      # dicts: config, params, train_size, force_mae, energy_mae
    slopes: dict    # config label -> float | None (None when n < 2, flagged)


def fit_loglog_slope(sizes, values):
    """Least-squares slope of log(value) vs log(size); None for fewer than 2 points."""
    sizes = np.asarray(sizes, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if sizes.size < 2:
        return None
    x = np.log(sizes)
    y = np.log(values)
    xm, ym = x.mean(), y.mean()
    return float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())


def _default_train_cell(config, train_systems, val_systems, budget):
    from .model import ModelParams as MP
    from .training import evaluate, prepare_dataset, train

    params = MP.init(config, seed=budget.seed)
    result = train(train_systems, val_systems, params, budget)
    best = result.state.best_params()
    atoms_padded = max(max(len(s) for s in train_systems),
                       max(len(s) for s in val_systems))
    metrics = evaluate(prepare_dataset(val_systems, config, dtype=best.dtype,
                                       atoms_padded=atoms_padded), best)
    return {"force_mae": metrics["force_mae"], "energy_mae": metrics["energy_mae"]}


def scaling_study(configs: dict, data_sizes, train_pool, val_systems, budget,
                  max_param_mismatch: float = 0.02, train_fn=None) -> ScalingResult:
    """Train every (config, train size) cell under identical seeds/schedules.

    ``configs`` is one family (e.g. an attention-heavy and a channel-heavy
    variant); their parameter counts must match within ``max_param_mismatch``
    or the controlled-parameter premise is violated and the study refuses to
    run. Slopes of log(force MAE) vs log(train size) are fitted per config.
    """
    if len(configs) < 2:
        raise ConfigError("scaling_study needs at least two configs to compare")
    counts = {label: parameter_audit(cfg)["total"] for label, cfg in configs.items()}
    lo, hi = min(counts.values()), max(counts.values())
    if (hi - lo) / lo > max_param_mismatch:
        raise ConfigError(
            f"parameter budgets differ by more than {max_param_mismatch:.0%}: {counts}")
    data_sizes = sorted(int(s) for s in data_sizes)
    if data_sizes and data_sizes[-1] > len(train_pool):
        raise ConfigError("largest data size exceeds the training pool")
    cell = train_fn or _default_train_cell
    rows = []
    for label, cfg in configs.items():
        for size in data_sizes:
            metrics = cell(cfg, train_pool[:size], val_systems, budget)
            rows.append({"config": label, "params": counts[label], "train_size": size,
                         "force_mae": metrics["force_mae"],
                         "energy_mae": metrics["energy_mae"]})
    slopes = {}
    for label in configs:
        pts = [(r["train_size"], r["force_mae"]) for r in rows if r["config"] == label]
        slopes[label] = fit_loglog_slope([p[0] for p in pts], [p[1] for p in pts])
    return ScalingResult(rows=rows, slopes=slopes)


# ---------------------------------------------------------------------------
# Throughput / memory benchmark.

def benchmark(params: ModelParams, systems, batch_sizes, repeats: int = 16,
              warmup: int = 3, seed: int = 0) -> list:
    """Inference throughput and memory per batch size.

    For each batch size: ``repeats`` randomly sampled batches are timed after
    ``warmup`` excluded iterations; reports samples/sec mean +- std over the
    repeats and the tensor-allocator peak bytes per sample. Out-of-memory is
    recorded as a capped row instead of crashing.
    """
    from .model import system_attributes

    rng = np.random.default_rng(seed)
    config = params.config
    attrs = [system_attributes(s, config) for s in systems]
    atoms_padded = max(len(s) for s in systems)
    rows = []
    for bs in batch_sizes:
        try:
            times = []
            bytes_per_sample = 0
            for rep in range(warmup + repeats):
                idx = rng.integers(0, len(systems), size=bs)
                batch = pack_batch([systems[i] for i in idx], config,
                                   attributes=[attrs[i] for i in idx],
                                   atoms_padded=atoms_padded)
                T.reset_alloc_peak()
                t0 = time.perf_counter()
                forward_batch(batch, params)
                dt = time.perf_counter() - t0
                if rep >= warmup:
                    times.append(dt)
                    bytes_per_sample = max(bytes_per_sample, T.alloc_peak_bytes() // bs)
            rates = bs / np.asarray(times)
            rows.append({
                "batch_size": int(bs),
                "samples_per_sec_mean": float(rates.mean()),
                "samples_per_sec_std": float(rates.std()),
                "sec_per_batch_median": float(np.median(times)),
                "bytes_per_sample": int(bytes_per_sample),
                "repeats": int(len(times)),
                "capped": False,
            })
        except MemoryError:
            rows.append({"batch_size": int(bs), "samples_per_sec_mean": float("nan"),
                         "samples_per_sec_std": float("nan"),
                         "sec_per_batch_median": float("nan"), "bytes_per_sample": 0,
                         "repeats": 0, "capped": True})
    return rows


# ---------------------------------------------------------------------------
# Langevin dynamics (BAOAB splitting) and h(r).

@dataclass
class MdTrajectory:
    positions: np.ndarray      # (frames, N, 3)
    velocities: np.ndarray     # (frames, N, 3)
    potential_energies: np.ndarray  # (frames,)
    masses: np.ndarray         # (N,) amu
    temperature: float
    dt_fs: float
    friction_per_ps: float
    seed: int
    stride: int
    h_r: dict = field(default_factory=dict)   # bin_edges, counts, density
    stable: bool = True
    failed_step: int | None = None

    def kinetic_energies(self) -> np.ndarray:
        v2 = (self.velocities ** 2).sum(axis=2)
        return 0.5 * (self.masses[None, :] * v2).sum(axis=1)

    def total_energies(self) -> np.ndarray:
        return self.potential_energies + self.kinetic_energies()


def pair_distances(positions: np.ndarray) -> np.ndarray:
    n = positions.shape[0]
    iu = np.triu_indices(n, k=1)
    diff = positions[iu[0]] - positions[iu[1]]
    return np.sqrt((diff * diff).sum(axis=1))


def h_of_r(frames, bin_width: float = 0.05, r_max: float | None = None) -> dict:
    """Normalized distribution of interatomic distances over trajectory frames."""
    dists = np.concatenate([pair_distances(f) for f in frames])
    if r_max is None:
        r_max = float(np.ceil(dists.max() / bin_width) * bin_width) if dists.size else bin_width
    edges = np.arange(0.0, r_max + bin_width, bin_width)
    counts, edges = np.histogram(dists, bins=edges)
    total = counts.sum()
    density = counts / (total * bin_width) if total else counts.astype(np.float64)
    return {"bin_edges": edges, "counts": counts, "density": density}


def h_of_r_mae(frames_a, frames_b, bin_width: float = 0.05,
               r_max: float | None = None) -> float:
    """Mean absolute difference between two h(r) curves on shared bins."""
    if r_max is None:
        hi = max(max(pair_distances(f).max() for f in frames_a),
                 max(pair_distances(f).max() for f in frames_b))
        r_max = float(np.ceil(hi / bin_width) * bin_width)
    ha = h_of_r(frames_a, bin_width, r_max)
    hb = h_of_r(frames_b, bin_width, r_max)
    return float(np.abs(ha["density"] - hb["density"]).mean())


def langevin_md(initial: AtomicSystem, force_field, steps: int, dt_fs: float = 1.0,
                temperature: float = 300.0, friction_per_ps: float = 0.5,
                seed: int = 0, stride: int = 10, hr_bin_width: float = 0.05,
                hr_max: float | None = None) -> MdTrajectory:
    """BAOAB-discretized Langevin dynamics driven by ``force_field``.

    force_field: system -> (potential energy, forces). Friction is in 1/ps
    (0 gives velocity Verlet); temperature in K (0 disables the noise).
    Any non-finite position stops the run early with the stability flag and
    failing step recorded; stability is itself a reported observable.
    """
    if dt_fs <= 0:
        raise ConfigError("dt must be positive")
    rng = np.random.default_rng(seed)
    masses = masses_for(initial.species)
    dt = dt_fs / TIME_UNIT_FS
    gamma = friction_per_ps * TIME_UNIT_FS / 1000.0  # 1/ps -> 1/internal unit
    c1 = float(np.exp(-gamma * dt))
    c2 = float(np.sqrt(max(0.0, 1.0 - c1 * c1)))
    sigma_v = np.sqrt(KB_EV * temperature / masses)[:, None]

    x = initial.positions.copy()
    v = np.zeros_like(x)
    inv_m = (1.0 / masses)[:, None]

    def eval_field(pos):
        sys_ = AtomicSystem(species=initial.species, positions=pos,
                            cell=initial.cell, pbc=initial.pbc)
        e, f = force_field(sys_)
        return e, np.asarray(f, dtype=np.float64)

    energy, forces = eval_field(x)
    frames_x, frames_v, frames_e = [x.copy()], [v.copy()], [energy]
    stable, failed_step = True, None
    for step in range(1, steps + 1):
        v = v + 0.5 * dt * forces * inv_m
        x = x + 0.5 * dt * v
        if temperature > 0 and gamma > 0:
            v = c1 * v + c2 * sigma_v * rng.standard_normal(x.shape)
        else:
            v = c1 * v
        x = x + 0.5 * dt * v
        if not np.all(np.isfinite(x)):
            stable, failed_step = False, step
            break
        energy, forces = eval_field(x)
        if not np.all(np.isfinite(forces)):
            stable, failed_step = False, step
            break
        v = v + 0.5 * dt * forces * inv_m
        if step % stride == 0:
            frames_x.append(x.copy())
            frames_v.append(v.copy())
            frames_e.append(energy)
    traj = MdTrajectory(
        positions=np.array(frames_x), velocities=np.array(frames_v),
        potential_energies=np.array(frames_e), masses=masses,
        temperature=temperature, dt_fs=dt_fs, friction_per_ps=friction_per_ps,
        seed=seed, stride=stride, stable=stable, failed_step=failed_step)
    if len(initial) > 1:
        traj.h_r = h_of_r(traj.positions, hr_bin_width, hr_max)
    return traj


# ---------------------------------------------------------------------------
# Report emission (CSV + JSON, plot-ready).

def write_csv(path, rows, columns=None):
    if not rows:
        Path(path).write_text("\n")
        return
    columns = columns or list(rows[0].keys())
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True,
                                     default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")
