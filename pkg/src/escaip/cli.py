"""Command-line entry point: one subcommand per pipeline stage, sharing a
JSON run configuration (flags override file values; every run writes the
fully resolved config next to its outputs).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import diagnostics as diag
from . import model as model_mod
from . import training as training_mod
from .data import (SyntheticSpec, load_dataset, read_manifest, split, synth_generate,
                   write_extxyz, write_manifest)
from .errors import ConfigError, ContractError, DataError, EscaipError, NumericalError
from .model import ModelConfig, ModelParams, load_checkpoint
from .training import LossWeights, TrainConfig

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_PRESETS = {
    "tiny": model_mod.tiny_config,
    "small-toy": model_mod.small_toy_config,
    "medium-toy": model_mod.medium_toy_config,
}

_TRAIN_KEYS = {"epochs", "batch_size", "lr", "warmup_frac", "min_lr_factor",
               "clip_norm", "lambda_energy", "lambda_force", "smooth_l1",
               "huber_beta", "augment", "seed", "equiv_batches", "equiv_batch_size"}
_DATA_KEYS = {"kind", "species", "atoms", "mode", "box_edge", "jitter", "count",
              "seed", "min_dist_factor", "attach_range", "split_ratios", "split_seed"}
_DIAG_KEYS = {"equiv_batches", "equiv_batch_size", "seed", "md", "benchmark", "scaling"}
_MD_KEYS = {"steps", "dt_fs", "temperature", "friction_per_ps", "stride",
            "bin_width", "r_max", "seed"}
_BENCH_KEYS = {"batch_sizes", "repeats", "warmup", "seed"}
_SCALING_KEYS = {"sizes", "epochs", "batch_size", "lr", "seed"}


def _reject_unknown(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    _reject_unknown(cfg, {"model", "training", "data", "diagnostics"}, "run config")
    return cfg


def build_model_config(section: dict) -> ModelConfig:
    section = dict(section or {})
    preset = section.pop("preset", None)
    field_names = {f.name for f in dataclasses.fields(ModelConfig)}
    _reject_unknown(section, field_names, "model section")
    if preset is not None:
        if preset not in _PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
        return _PRESETS[preset](**section)
    return ModelConfig(**section)


def build_train_config(section: dict, overrides: dict) -> TrainConfig:
    section = dict(section or {})
    _reject_unknown(section, _TRAIN_KEYS, "training section")
    section.update({k: v for k, v in overrides.items() if v is not None})
    weights = LossWeights(energy=section.pop("lambda_energy", 4.0),
                          force=section.pop("lambda_force", 100.0))
    return TrainConfig(weights=weights, **section)


def build_synth_spec(section: dict, overrides: dict) -> SyntheticSpec:
    section = dict(section or {})
    _reject_unknown(section, _DATA_KEYS, "data section")
    section.pop("split_ratios", None)
    section.pop("split_seed", None)
    section.update({k: v for k, v in overrides.items() if v is not None})
    if "species" in section:
        section["species"] = {int(z): tuple(p) for z, p in section["species"].items()}
    if "atoms" in section:
        section["atoms"] = tuple(section["atoms"])
    if "attach_range" in section:
        section["attach_range"] = tuple(section["attach_range"])
    return SyntheticSpec(**section)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, payload: dict):
    (out / "config.resolved.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _worker_count() -> int:
    raw = os.environ.get("ESCAIP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as e:
        raise ConfigError(f"ESCAIP_THREADS must be an integer, got {raw!r}") from e


def _load_splits(data_dir):
    data_dir = Path(data_dir)
    systems = load_dataset(data_dir)
    _, ds = read_manifest(data_dir / "manifest.json")
    return systems, ds


def _select(systems, indices):
    return [systems[i] for i in indices]


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_generate(args) -> int:
    cfg = load_run_config(args.config)
    spec = build_synth_spec(cfg.get("data"), {"count": args.count, "seed": args.seed})
    ratios = tuple(cfg.get("data", {}).get("split_ratios", (0.9, 0.1, 0.0)))
    split_seed = int(cfg.get("data", {}).get("split_seed", spec.seed))
    out = _out_dir(args)
    systems = synth_generate(spec, workers=_worker_count())
    files = []
    for i, sys_ in enumerate(systems):
        name = f"sample_{i:05d}.extxyz"
        write_extxyz(out / name, sys_)
        files.append(name)
    ds = split(systems, ratios, seed=split_seed)
    write_manifest(out / "manifest.json", files, ds,
                   extra={"spec": dataclasses.asdict(spec)})
    _write_resolved(out, {"data": dataclasses.asdict(spec),
                          "split_ratios": list(ratios), "split_seed": split_seed})
    print(f"wrote {len(files)} systems to {out} "
          f"(train/val/test = {ds.sizes()[0]}/{ds.sizes()[1]}/{ds.sizes()[2]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    model_config = build_model_config(cfg.get("model"))
    tc = build_train_config(cfg.get("training"),
                            {"epochs": args.epochs, "seed": args.seed})
    out = _out_dir(args)
    systems, ds = _load_splits(args.data)
    train_sys = _select(systems, ds.train)
    val_sys = _select(systems, ds.val) or train_sys

    resume = None
    if args.resume:
        state = training_mod.load_train_state(args.resume)
        params = state.params
        resume = state
        model_config = params.config
    else:
        params = ModelParams.init(model_config, seed=tc.seed)
    result = training_mod.train(train_sys, val_sys, params, tc, resume=resume,
                                dump_dir=out)
    training_mod.write_metrics_csv(out / "metrics.csv", result.metrics)
    training_mod.save_train_state(out / "checkpoint.npz", result.state)
    best = result.state.best_params()
    model_mod.save_checkpoint(out / "best.npz", best, step=result.state.step,
                              extra={"best_metrics": result.state.best_metrics})
    _write_resolved(out, {"model": dataclasses.asdict(model_config),
                          "training": {**dataclasses.asdict(tc),
                                       "weights": dataclasses.asdict(tc.weights)}})
    last = result.metrics[-1]
    print(f"epochs={result.state.epoch} steps={result.state.step} "
          f"val_energy_mae={last[3]:.6g} eV/atom val_force_mae={last[4]:.6g} eV/A")
    if result.aborted:
        print(f"aborted at step {result.abort_step}: non-finite loss", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _params_from_checkpoint(path) -> ModelParams:
    params, _, _, _ = load_checkpoint(path)
    return params


def cmd_eval(args) -> int:
    params = _params_from_checkpoint(args.checkpoint)
    systems, ds = _load_splits(args.data)
    indices = {"train": ds.train, "val": ds.val, "test": ds.test}[args.split]
    if not indices:
        raise ConfigError(f"split {args.split!r} is empty")
    chosen = _select(systems, indices)
    prep = training_mod.prepare_dataset(chosen, params.config, dtype=params.dtype)
    metrics = training_mod.evaluate(prep, params)
    report = {
        "split": args.split,
        "count": len(chosen),
        "energy_mae_mev_per_atom": metrics["energy_mae"] * 1000.0,
        "force_mae_mev_per_angstrom": metrics["force_mae"] * 1000.0,
    }
    if args.out:
        out = _out_dir(args)
        diag.write_json(out / "eval.json", report)
        _write_resolved(out, {"checkpoint": str(args.checkpoint), "split": args.split})
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_equivariance(args) -> int:
    cfg = load_run_config(args.config)
    section = dict(cfg.get("diagnostics") or {})
    _reject_unknown(section, _DIAG_KEYS, "diagnostics section")
    params = _params_from_checkpoint(args.checkpoint)
    systems, ds = _load_splits(args.data)
    val_sys = _select(systems, ds.val) or systems
    batches = args.batches or int(section.get("equiv_batches", 128))
    batch_size = int(section.get("equiv_batch_size", 32))
    seed = args.seed if args.seed is not None else int(section.get("seed", 0))
    report = diag.equivariance_check(diag.model_force_predictor(params), val_sys,
                                     num_batches=batches, seed=seed,
                                     batch_size=batch_size)
    out = _out_dir(args)
    rows = [{"batch": i, "cosine": c, "rotation_seed": s}
            for i, (c, s) in enumerate(zip(report.per_batch, report.rotation_seeds))]
    diag.write_csv(out / "equivariance.csv", rows)
    diag.write_json(out / "equivariance.json",
                    {"mean_cosine": report.mean, "num_batches": report.num_batches,
                     "batch_size": batch_size, "seed": seed})
    _write_resolved(out, {"checkpoint": str(args.checkpoint),
                          "batches": batches, "batch_size": batch_size, "seed": seed})
    print(f"mean cosine over {report.num_batches} batches: {report.mean:.6f}")
    return EXIT_OK


def default_ablation_family() -> dict:
    """Attention-heavy vs channel-heavy micro configs, parameter-matched."""
    attention_heavy = ModelConfig(
        num_blocks=2, num_heads=8, message_size=128, node_width=64, edge_width=32,
        readout_width=32, ffn_hidden=64, species_embed_width=32, boo_embed_width=32,
        num_rbf=32, energy_head_width=32, force_head_width=32, max_neighbors=4)
    channel_heavy = ModelConfig(
        num_blocks=2, num_heads=2, message_size=32, node_width=176, edge_width=32,
        readout_width=32, ffn_hidden=176, species_embed_width=32, boo_embed_width=32,
        num_rbf=32, energy_head_width=32, force_head_width=32, max_neighbors=4)
    return {"attention_heavy": attention_heavy, "channel_heavy": channel_heavy}


def cmd_scaling(args) -> int:
    cfg = load_run_config(args.config)
    section = dict(cfg.get("diagnostics", {}).get("scaling") or {})
    _reject_unknown(section, _SCALING_KEYS, "diagnostics.scaling section")
    systems, ds = _load_splits(args.data)
    train_sys = _select(systems, ds.train)
    val_sys = _select(systems, ds.val) or train_sys
    sizes = section.get("sizes", [32, 64, 128])
    budget = TrainConfig(epochs=int(section.get("epochs", 5)),
                         batch_size=int(section.get("batch_size", 32)),
                         lr=float(section.get("lr", 2e-3)),
                         seed=int(section.get("seed", 0)),
                         equiv_batches=1, equiv_batch_size=8)
    result = diag.scaling_study(default_ablation_family(), sizes, train_sys,
                                val_sys, budget)
    out = _out_dir(args)
    diag.write_csv(out / "scaling.csv", result.rows)
    diag.write_json(out / "scaling.json", {"slopes": result.slopes})
    _write_resolved(out, {"scaling": {"sizes": list(sizes),
                                      "epochs": budget.epochs,
                                      "batch_size": budget.batch_size},
                          "configs": {k: dataclasses.asdict(v)
                                      for k, v in default_ablation_family().items()}})
    for label, slope in result.slopes.items():
        print(f"{label}: log-log slope = {slope if slope is None else round(slope, 4)}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = load_run_config(args.config)
    section = dict(cfg.get("diagnostics", {}).get("benchmark") or {})
    _reject_unknown(section, _BENCH_KEYS, "diagnostics.benchmark section")
    params = _params_from_checkpoint(args.checkpoint)
    systems, _ = _load_splits(args.data)
    batch_sizes = section.get("batch_sizes", [1, 2, 4, 8])
    rows = diag.benchmark(params, systems, batch_sizes,
                          repeats=int(section.get("repeats", 16)),
                          warmup=int(section.get("warmup", 3)),
                          seed=int(section.get("seed", 0)))
    out = _out_dir(args)
    diag.write_csv(out / "benchmark.csv", rows)
    diag.write_json(out / "benchmark.json", {"rows": rows})
    _write_resolved(out, {"benchmark": {"batch_sizes": list(batch_sizes)}})
    for row in rows:
        print(f"batch {row['batch_size']}: {row['samples_per_sec_mean']:.2f} "
              f"+- {row['samples_per_sec_std']:.2f} samples/s, "
              f"{row['bytes_per_sample']} bytes/sample")
    return EXIT_OK


def cmd_md(args) -> int:
    cfg = load_run_config(args.config)
    section = dict(cfg.get("diagnostics", {}).get("md") or {})
    _reject_unknown(section, _MD_KEYS, "diagnostics.md section")
    params = _params_from_checkpoint(args.checkpoint)
    systems, ds = _load_splits(args.data)
    initial = (_select(systems, ds.val) or systems)[0]
    steps = args.steps if args.steps is not None else int(section.get("steps", 1000))
    traj = diag.langevin_md(
        initial, diag.model_force_field(params), steps=steps,
        dt_fs=float(section.get("dt_fs", 1.0)),
        temperature=float(section.get("temperature", 300.0)),
        friction_per_ps=float(section.get("friction_per_ps", 0.5)),
        seed=args.seed if args.seed is not None else int(section.get("seed", 0)),
        stride=int(section.get("stride", 10)),
        hr_bin_width=float(section.get("bin_width", 0.05)),
        hr_max=section.get("r_max"))
    out = _out_dir(args)
    from .geometry import AtomicSystem

    frames = [AtomicSystem(species=initial.species, positions=pos,
                           cell=initial.cell, pbc=initial.pbc)
              for pos in traj.positions]
    write_extxyz(out / "trajectory.extxyz", frames)
    if traj.h_r:
        hr_rows = [{"r_lo": float(traj.h_r["bin_edges"][i]),
                    "r_hi": float(traj.h_r["bin_edges"][i + 1]),
                    "count": int(traj.h_r["counts"][i]),
                    "density": float(traj.h_r["density"][i])}
                   for i in range(len(traj.h_r["counts"]))]
        diag.write_csv(out / "hr.csv", hr_rows)
    diag.write_json(out / "md.json", {
        "steps": steps, "frames": len(traj.positions), "stable": traj.stable,
        "failed_step": traj.failed_step, "temperature": traj.temperature,
        "dt_fs": traj.dt_fs, "friction_per_ps": traj.friction_per_ps})
    _write_resolved(out, {"md": {"steps": steps, "dt_fs": traj.dt_fs,
                                 "temperature": traj.temperature,
                                 "friction_per_ps": traj.friction_per_ps}})
    print(f"{len(traj.positions)} frames, stable={traj.stable}")
    if not traj.stable:
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing.

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="escaip",
                                     description="attention interatomic potential toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, checkpoint=False):
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset directory (manifest + extxyz)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("generate", help="synthesize a labeled dataset")
    common(p, data=False)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="energy/force MAE of a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("equivariance", help="rotational-equivariance analysis")
    common(p, checkpoint=True)
    p.add_argument("--batches", type=int, default=None)
    p.set_defaults(fn=cmd_equivariance)

    p = sub.add_parser("scaling", help="parameter-controlled scaling ablation")
    common(p)
    p.set_defaults(fn=cmd_scaling)

    p = sub.add_parser("benchmark", help="throughput/memory benchmark")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("md", help="Langevin dynamics with a model force field")
    common(p, checkpoint=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_md)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EscaipError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
