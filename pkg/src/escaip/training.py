"""Loss, Adam training loop with warmup+cosine schedule, rotation
augmentation, and the metric log.

Determinism contract: a fixed seed plus single-threaded reduction yields a
bit-identical metric trajectory; shuffling derives one RNG stream per
(seed, epoch) so resuming from a checkpoint at an epoch boundary reproduces
the original run exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .geometry import AtomicSystem, apply_rotation, random_rotation
from .model import (BatchOutput, ModelConfig, ModelParams, PackedBatch, Prediction,
                    forward_batch, save_checkpoint, system_attributes)

METRIC_COLUMNS = ("step", "lr", "train_loss", "val_energy_mae", "val_force_mae",
                  "equivariance_cosine")


@dataclass
class LossWeights:
    """Coefficients of the combined objective: energy term and force term."""

    energy: float = 4.0
    force: float = 100.0

    def __post_init__(self):
        if self.energy < 0 or self.force < 0 or (self.energy == 0 and self.force == 0):
            raise ConfigError("loss weights must be nonnegative and not both zero")


def loss(pred: Prediction, labels: AtomicSystem, weights: LossWeights,
         smooth: bool = False, beta: float = 0.01) -> float:
    """Single-system loss: lambda_E |dE|/N + lambda_F mean |dF| (componentwise).

    The smooth flag switches to the Huber variant used for optimization
    stability; its force term is per-atom force-norm based, which makes it
    invariant under simultaneous rotation of prediction and labels (the plain
    componentwise MAE is rotation-sensitive).
    """
    if labels.energy is None or labels.forces is None:
        raise ContractError("loss requires energy and force labels")
    n = len(labels)
    de = pred.energy - labels.energy
    df = np.asarray(pred.forces, dtype=np.float64) - labels.forces
    if smooth:
        e_term = _huber(abs(de) / n, beta)
        f_term = float(np.mean(_huber(np.linalg.norm(df, axis=1), beta)))
    else:
        e_term = abs(de) / n
        f_term = float(np.abs(df).mean())
    return weights.energy * e_term + weights.force * f_term


def _huber(x, beta):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < beta, x * x / (2 * beta), np.abs(x) - 0.5 * beta)


def batch_loss(out: BatchOutput, batch: PackedBatch, weights: LossWeights,
               smooth: bool = False, beta: float = 0.01):
    """Differentiable batch objective (mean of per-system losses)."""
    if batch.energy_labels is None or batch.force_labels is None:
        raise ContractError("batch carries no labels")
    dtype = out.energy.dtype
    s, a = batch.atom_mask.shape
    n_atoms = batch.n_atoms.astype(dtype)
    e_label = T.Tensor(batch.energy_labels.astype(dtype))
    f_label = T.Tensor(batch.force_labels.astype(dtype))
    inv_n = T.Tensor(1.0 / n_atoms)

    de = T.sub(out.energy, e_label)
    df = T.sub(out.forces, f_label)  # padded rows are zero on both sides
    if smooth:
        e_term = T.smooth_l1(T.mul(de, inv_n), beta)
        fnorm = T.sqrt(T.reduce_sum(T.mul(df, df), axis=-1))  # (S, A)
        f_per_atom = T.smooth_l1(fnorm, beta)
        f_term = T.mul(T.reduce_sum(f_per_atom, axis=1), inv_n)
    else:
        e_term = T.mul(T.absolute(de), inv_n)
        f_term = T.mul(T.reduce_sum(T.absolute(df), axis=(1, 2)),
                       T.Tensor(1.0 / (3.0 * n_atoms)))
    total = T.add(e_term * float(weights.energy), f_term * float(weights.force))
    return T.mean(total)


def augment_rotations(systems, k: int, seed: int) -> list:
    """Replicate every sample k times under independent Haar rotations.

    Positions and force labels rotate together; energies are untouched. All k
    copies are rotated (there is no identity copy).
    """
    if k < 1:
        raise ConfigError("augmentation factor must be >= 1")
    out = []
    for i, sys_ in enumerate(systems):
        for j in range(k):
            rot = random_rotation(np.random.default_rng([seed, i, j]))
            out.append(apply_rotation(sys_, rot))
    return out


def zero_predictor_force_mae(systems) -> float:
    """Force MAE of the all-zeros predictor (the learnability baseline)."""
    comps = np.concatenate([np.abs(s.forces).reshape(-1) for s in systems])
    return float(comps.mean())


# ---------------------------------------------------------------------------
# Prepared datasets: attributes stacked once, batches sliced per step.

@dataclass
class PreparedDataset:
    """Whole-dataset attribute arrays padded to a fixed atom count."""

    systems: list
    species: np.ndarray
    atom_mask: np.ndarray
    neighbor_index: np.ndarray   # (D, A, M) local, sentinel clipped to 0
    valid_mask: np.ndarray
    unit_dirs: np.ndarray
    boo: np.ndarray
    rbf: np.ndarray
    n_atoms: np.ndarray
    energies: np.ndarray
    forces: np.ndarray

    def __len__(self):
        return len(self.systems)

    @property
    def atoms_padded(self) -> int:
        return self.species.shape[1]


def prepare_dataset(systems, config: ModelConfig, dtype=np.float32,
                    atoms_padded: int | None = None) -> PreparedDataset:
    d = len(systems)
    a = atoms_padded or max(len(s) for s in systems)
    m = config.max_neighbors
    species = np.zeros((d, a), dtype=np.int64)
    atom_mask = np.zeros((d, a), dtype=bool)
    neighbor = np.zeros((d, a, m), dtype=np.int64)
    valid = np.zeros((d, a, m), dtype=bool)
    dirs = np.zeros((d, a, m, 3), dtype=dtype)
    boo = np.zeros((d, a, config.l_max + 1), dtype=dtype)
    rbf = np.zeros((d, a, m, config.num_rbf), dtype=dtype)
    n_atoms = np.zeros(d, dtype=np.int64)
    energies = np.zeros(d, dtype=np.float64)
    forces = np.zeros((d, a, 3), dtype=np.float64)
    for i, sys_ in enumerate(systems):
        attr = system_attributes(sys_, config)
        n = len(sys_)
        n_atoms[i] = n
        species[i, :n] = attr.species
        atom_mask[i, :n] = True
        neighbor[i, :n] = np.where(attr.valid_mask, attr.neighbor_index, 0)
        valid[i, :n] = attr.valid_mask
        dirs[i, :n] = attr.unit_dirs
        boo[i, :n] = attr.boo
        rbf[i, :n] = attr.rbf
        if sys_.energy is not None:
            energies[i] = sys_.energy
        if sys_.forces is not None:
            forces[i, :n] = sys_.forces
    return PreparedDataset(systems=list(systems), species=species, atom_mask=atom_mask,
                           neighbor_index=neighbor, valid_mask=valid, unit_dirs=dirs,
                           boo=boo, rbf=rbf, n_atoms=n_atoms, energies=energies,
                           forces=forces)


def take_batch(prep: PreparedDataset, idx: np.ndarray) -> PackedBatch:
    idx = np.asarray(idx)
    s = idx.size
    a = prep.atoms_padded
    offsets = (np.arange(s) * a)[:, None, None]
    gather = prep.neighbor_index[idx] + offsets
    return PackedBatch(
        species=prep.species[idx],
        atom_mask=prep.atom_mask[idx],
        gather_index=gather.reshape(s * a, -1),
        valid_mask=prep.valid_mask[idx],
        unit_dirs=prep.unit_dirs[idx],
        boo=prep.boo[idx],
        rbf=prep.rbf[idx],
        n_atoms=prep.n_atoms[idx],
        energy_labels=prep.energies[idx],
        force_labels=prep.forces[idx],
    )


def evaluate(prep: PreparedDataset, params: ModelParams, batch_size: int = 256) -> dict:
    """Validation metrics: per-atom energy MAE (eV/atom) and force MAE (eV/A)."""
    e_errs, f_sum, f_count = [], 0.0, 0
    for lo in range(0, len(prep), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(prep)))
        batch = take_batch(prep, idx)
        out = forward_batch(batch, params)
        e_pred = np.asarray(out.energy.data, dtype=np.float64)
        f_pred = np.asarray(out.forces.data, dtype=np.float64)
        e_errs.extend(np.abs(e_pred - batch.energy_labels) / batch.n_atoms)
        df = np.abs(f_pred - batch.force_labels)
        f_sum += (df * batch.atom_mask[..., None]).sum()
        f_count += 3 * int(batch.n_atoms.sum())
    return {"energy_mae": float(np.mean(e_errs)), "force_mae": float(f_sum / f_count)}


# ---------------------------------------------------------------------------
# Optimizer and schedule.

class AdamOptimizer:
    """Adam with global gradient-norm clipping; state is plain arrays."""

    def __init__(self, params: ModelParams, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float = 10.0):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}

    def step(self, grads: dict, lr: float):
        self.step_count += 1
        b1, b2 = self.betas
        if self.clip_norm and self.clip_norm > 0:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, t in self.params.tensors.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            t.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(t.data.dtype)

    def state(self) -> dict:
        return {"m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state(self, state: dict, step_count: int):
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}
        self.step_count = step_count


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float,
          min_lr_factor: float) -> float:
    """Linear warmup to base_lr, then cosine decay to base_lr * min_lr_factor."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    frac = min(1.0, (step - warmup) / span)
    floor = base_lr * min_lr_factor
    return floor + 0.5 * (base_lr - floor) * (1.0 + np.cos(np.pi * frac))


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    warmup_frac: float = 0.05
    min_lr_factor: float = 0.01
    clip_norm: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)
    smooth_l1: bool = False
    huber_beta: float = 0.01
    augment: int = 0            # rotated copies per training sample; 0 disables
    seed: int = 0
    equiv_batches: int = 2      # batches for the per-epoch equivariance probe
    equiv_batch_size: int = 32


@dataclass
class TrainState:
    """Everything needed to resume training bit-identically at an epoch boundary."""

    params: ModelParams
    optimizer: AdamOptimizer
    step: int = 0
    epoch: int = 0
    seed: int = 0
    schedule_start: int = 0   # step at which the current LR schedule began
    best_metrics: dict | None = None
    best_arrays: dict | None = None

    def best_params(self) -> ModelParams:
        params = self.params.copy()
        if self.best_arrays is not None:
            params.load_arrays(self.best_arrays)
        return params


@dataclass
class TrainResult:
    state: TrainState
    metrics: list            # rows of METRIC_COLUMNS values
    aborted: bool = False
    abort_step: int | None = None


def _equivariance_probe(val_prep: PreparedDataset, params: ModelParams,
                        num_batches: int, batch_size: int, seed) -> float:
    from .diagnostics import equivariance_check, model_force_predictor

    take = min(len(val_prep.systems), num_batches * batch_size)
    report = equivariance_check(model_force_predictor(params),
                                val_prep.systems[:take], num_batches=num_batches,
                                seed=seed, batch_size=batch_size)
    return report.mean


def _val_row(step, lr, train_loss, val_prep, params, tc: TrainConfig, epoch):
    metrics = evaluate(val_prep, params)
    cos = _equivariance_probe(val_prep, params, tc.equiv_batches,
                              tc.equiv_batch_size,
                              np.random.default_rng([tc.seed, 7919, epoch]))
    return [step, lr, train_loss, metrics["energy_mae"], metrics["force_mae"], cos]


def train(train_systems, val_systems, params: ModelParams, tc: TrainConfig,
          resume: TrainState | None = None, dump_dir=None,
          stop_epoch: int | None = None) -> TrainResult:
    """Optimize ``params`` in place; returns the state and the metric log.

    Row 0 of the log holds the untrained (or resumed) metrics; one row is
    appended per epoch. ``stop_epoch`` interrupts the schedule early (the LR
    schedule still spans tc.epochs, so resuming from the checkpoint
    reproduces the uninterrupted trajectory bit-identically). On a non-finite
    loss the loop aborts, restores the best snapshot, writes a diagnostic
    dump when ``dump_dir`` is given, and returns aborted=True.
    """
    if tc.epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if len(train_systems) == 0 or len(val_systems) == 0:
        raise ConfigError("train and validation sets must be nonempty")
    if tc.augment:
        train_systems = augment_rotations(train_systems, tc.augment,
                                          seed=tc.seed ^ 0x5EED)
    config = params.config
    atoms_padded = max(max(len(s) for s in train_systems),
                       max(len(s) for s in val_systems))
    train_prep = prepare_dataset(train_systems, config, dtype=params.dtype,
                                 atoms_padded=atoms_padded)
    val_prep = prepare_dataset(val_systems, config, dtype=params.dtype,
                               atoms_padded=atoms_padded)

    state = resume or TrainState(params=params, optimizer=AdamOptimizer(
        params, clip_norm=tc.clip_norm), seed=tc.seed)
    if resume is not None and resume.params is not params:
        raise ContractError("resume state must wrap the same params object")

    steps_per_epoch = int(np.ceil(len(train_prep) / tc.batch_size))
    total_steps = max(1, tc.epochs * steps_per_epoch)
    rows = [_val_row(state.step, 0.0, float("nan"), val_prep, params, tc, state.epoch)]
    aborted = False
    abort_step = None
    last_epoch = tc.epochs if stop_epoch is None else min(stop_epoch, tc.epochs)

    for epoch in range(state.epoch, last_epoch):
        rng = np.random.default_rng([tc.seed, epoch])
        perm = rng.permutation(len(train_prep))
        losses = []
        lr = 0.0
        for lo in range(0, len(train_prep), tc.batch_size):
            idx = perm[lo:lo + tc.batch_size]
            batch = take_batch(train_prep, idx)
            lr = lr_at(state.step - state.schedule_start, total_steps, tc.lr,
                       tc.warmup_frac, tc.min_lr_factor)
            with T.ComputationTape() as tape:
                out = forward_batch(batch, params)
                obj = batch_loss(out, batch, tc.weights, smooth=tc.smooth_l1,
                                 beta=tc.huber_beta)
                value = obj.item()
                if not np.isfinite(value):
                    aborted = True
                    abort_step = state.step
                    break
                grads = tape.backward(obj, params.tensors)
            state.optimizer.step(grads, lr)
            state.step += 1
            losses.append(value)
        if aborted:
            break
        state.epoch = epoch + 1
        train_loss = float(np.mean(losses)) if losses else float("nan")
        row = _val_row(state.step, lr, train_loss, val_prep, params, tc, state.epoch)
        rows.append(row)
        weighted = (tc.weights.energy * row[3] + tc.weights.force * row[4])
        if state.best_metrics is None or weighted < state.best_metrics["weighted"]:
            state.best_metrics = {"weighted": weighted, "energy_mae": row[3],
                                  "force_mae": row[4], "epoch": state.epoch}
            state.best_arrays = params.state_arrays()

    if aborted:
        if state.best_arrays is not None:
            params.load_arrays(state.best_arrays)
        if dump_dir is not None:
            dump = {"abort_step": abort_step, "epoch": state.epoch,
                    "rows": [[repr(v) for v in r] for r in rows]}
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            (Path(dump_dir) / "abort_dump.json").write_text(json.dumps(dump, indent=2))
    return TrainResult(state=state, metrics=rows, aborted=aborted, abort_step=abort_step)


def finetune_energy(state: TrainState, train_systems, val_systems,
                    new_lambda_energy: float, tc: TrainConfig) -> TrainResult:
    """Continue optimization with an increased energy coefficient.

    Keeps parameters and optimizer moments; the LR schedule restarts for the
    fine-tuning epochs (everything else in ``tc`` applies unchanged).
    """
    fine_tc = replace(tc, weights=LossWeights(energy=new_lambda_energy,
                                              force=tc.weights.force))
    resume = TrainState(params=state.params, optimizer=state.optimizer,
                        step=state.step, epoch=0, seed=fine_tc.seed,
                        schedule_start=state.step, best_metrics=None,
                        best_arrays=None)
    return train(train_systems, val_systems, state.params, fine_tc, resume=resume)


# ---------------------------------------------------------------------------
# Metric log IO.

def write_metrics_csv(path, rows):
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        cells = [str(row[0])] + [repr(float(v)) for v in row[1:]]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def save_train_state(path, state: TrainState, extra: dict | None = None):
    meta = {"seed": state.seed, "epoch": state.epoch,
            "schedule_start": state.schedule_start,
            "best_metrics": state.best_metrics}
    if extra:
        meta.update(extra)
    save_checkpoint(path, state.params, step=state.step,
                    optimizer=state.optimizer.state(), extra=meta)


def load_train_state(path) -> TrainState:
    from .model import load_checkpoint

    params, step, opt_state, extra = load_checkpoint(path)
    optimizer = AdamOptimizer(params)
    if opt_state:
        optimizer.load_state(opt_state, step)
    state = TrainState(params=params, optimizer=optimizer, step=step,
                       epoch=extra.get("epoch", 0), seed=extra.get("seed", 0),
                       schedule_start=extra.get("schedule_start", 0),
                       best_metrics=extra.get("best_metrics"))
    return state
