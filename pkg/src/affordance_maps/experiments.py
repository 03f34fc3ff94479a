"""Experiment recipes: which arenas, channels, scales and settings each experiment uses.

Every recipe is built only from the public operations of the other
modules. Output layout below ``cfg.out``::

    data/dataset.jsonl, data/env_<k>.json
    ckpt/<group>/dc<d>_s<seed>/ckpt_epochNNN.json + losses.csv
    traj/<setting>_s<seed>_r<run>.jsonl
    metrics.csv, summary.csv
    maps/<group>_dc<d>_s<seed>.ppm, maps/series_<group>_dc<d>_s<seed>/map_epochNNN.ppm
    manifest_<command>.json
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__, analysis, env_sim, maps, planning, training
from .models import AffordanceModel, load_checkpoint

log = logging.getLogger(__name__)

EXPERIMENTS = ("I", "II", "III", "IV", "V")
CONDITIONS = ("easy", "hard")
PLANNERS = ("cem", "gradient")
FULL_SEQUENCES = 200
VAL_SHARE = 0.2


class UsageError(ValueError):
    """Bad configuration supplied by the user."""


@dataclass
class ExperimentConfig:
    experiment: str = "I"
    dim_c: list = field(default_factory=lambda: [0, 1, 3, 5, 8])
    seeds: list = field(default_factory=lambda: list(range(5)))
    n_train: int = 40
    n_val: int = 40
    epochs: int | None = None
    runs: int = 4
    planner: str = "cem"
    beta: float | None = None
    condition: str | None = None
    out: str = "runs"
    data_seed: int = 0
    max_steps: int = 200
    workers: int = 1
    full_scale: bool = False
    scale: float | None = None
    trace: bool = False

    def resolved(self):
        """Copy with experiment-dependent defaults and scale flags applied."""
        cfg = replace(self, dim_c=[int(d) for d in self.dim_c], seeds=[int(s) for s in self.seeds])
        if cfg.experiment not in EXPERIMENTS:
            raise UsageError(f"unknown experiment {cfg.experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
        if cfg.planner not in PLANNERS:
            raise UsageError(f"unknown planner {cfg.planner!r}")
        if cfg.condition is not None and cfg.condition not in CONDITIONS:
            raise UsageError(f"unknown condition {cfg.condition!r}")
        if cfg.condition is not None and cfg.experiment not in ("III", "V"):
            raise UsageError("--condition only applies to experiments III and V")
        if cfg.full_scale:
            cfg.n_train = int(FULL_SEQUENCES * (1 - VAL_SHARE))
            cfg.n_val = int(FULL_SEQUENCES * VAL_SHARE)
            if len(cfg.seeds) == 5 and cfg.seeds == list(range(5)):
                cfg.seeds = list(range(25))
        if cfg.scale is not None:
            if cfg.scale <= 0:
                raise UsageError("--scale must be positive")
            total = max(2, int(round(FULL_SEQUENCES * cfg.scale)))
            cfg.n_val = max(1, int(round(total * VAL_SHARE)))
            cfg.n_train = total - cfg.n_val
        if cfg.epochs is None:
            if cfg.experiment == "V":
                cfg.epochs = 500 if cfg.full_scale else 200
            else:
                cfg.epochs = 50 if cfg.full_scale else 20
        if cfg.beta is None:
            cfg.beta = 10.0 if cfg.experiment == "IV" else 1.0
        for name in ("n_train", "n_val", "epochs", "runs", "max_steps", "workers"):
            if getattr(cfg, name) < (0 if name == "n_val" else 1):
                raise UsageError(f"{name} must be positive")
        if not cfg.seeds:
            raise UsageError("need at least one seed")
        return cfg

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


# -- arenas per experiment ------------------------------------------------------

def groups(cfg):
    """Training groups: each has its own arenas, dataset and checkpoints."""
    if cfg.experiment == "III":
        return [cfg.condition] if cfg.condition else list(CONDITIONS)
    return ["main"]


def training_specs(cfg, group):
    exp = cfg.experiment
    if exp in ("I", "II") or (exp == "III" and group == "easy"):
        return [maps.experiment_one()]
    if exp == "III":
        return [maps.experiment_three()]
    if exp == "IV":
        return [maps.experiment_four()]
    return maps.experiment_five_training()


def control_maps(cfg, group):
    """``[(label, spec_or_None)]``; ``None`` means a fresh generated arena per episode."""
    exp = cfg.experiment
    if exp == "II":
        two = maps.experiment_two()
        return [("original", maps.experiment_one()), ("two", two["two"]), ("twelve", two["twelve"])]
    if exp == "V":
        return [(c, None) for c in ([cfg.condition] if cfg.condition else CONDITIONS)]
    label = group if exp == "III" else ""
    return [(label, training_specs(cfg, group)[0])]


def render_spec(cfg, group):
    if cfg.experiment == "V":
        return maps.experiment_five_showcase()
    return training_specs(cfg, group)[0]


def setting_name(label, planner, dim_c):
    return "/".join(p for p in (label, planner, f"dc{dim_c}") if p)


# -- paths ------------------------------------------------------------------------

def _data_dir(cfg, group):
    return os.path.join(cfg.out, "data", group)


def run_dir(cfg, group, dim_c, seed):
    return os.path.join(cfg.out, "ckpt", group, f"dc{dim_c}_s{seed}")


def final_checkpoint(cfg, group, dim_c, seed):
    return training.checkpoint_path(run_dir(cfg, group, dim_c, seed), cfg.epochs)


# -- commands ---------------------------------------------------------------------

def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def generate_data(cfg):
    """Write (or reuse) the exploration dataset of every training group."""
    written = []
    for group in groups(cfg):
        written.extend(_generate_group(cfg, group))
    return written


def _generate_group(cfg, group):
    specs = training_specs(cfg, group)
    directory = _data_dir(cfg, group)
    os.makedirs(directory, exist_ok=True)
    per_env = cfg.n_train + cfg.n_val
    ds = training.generate_dataset(specs, cfg.data_seed, n_sequences=per_env * len(specs),
                                   val_fraction=cfg.n_val / per_env)
    paths = []
    for k, spec in enumerate(specs):
        path = os.path.join(directory, f"env_{k}.json")
        spec.save(path)
        paths.append(path)
    path = os.path.join(directory, "dataset.jsonl")
    ds.to_jsonl(path)
    paths.append(path)
    with open(os.path.join(directory, "params.json"), "w") as f:
        json.dump(_data_params(cfg), f, sort_keys=True)
    log.info("%s: %d sequences, coverage %.2f", group, ds.n_sequences, ds.coverage())
    return paths


def _data_params(cfg):
    return {"n_train": cfg.n_train, "n_val": cfg.n_val, "data_seed": cfg.data_seed}


def load_data(cfg, group):
    """Dataset of ``group``; regenerated when missing or made with other sizes or seed."""
    directory = _data_dir(cfg, group)
    path = os.path.join(directory, "dataset.jsonl")
    specs = training_specs(cfg, group)
    try:
        with open(os.path.join(directory, "params.json")) as f:
            stale = json.load(f) != _data_params(cfg)
    except (OSError, json.JSONDecodeError):
        stale = True
    if stale or not os.path.exists(path):
        _generate_group(cfg, group)
    return training.Dataset.from_jsonl(path, specs)


def _train_task(args):
    cfg, group, dim_c, seed, resume = args
    directory = run_dir(cfg, group, dim_c, seed)
    existing = analysis.list_checkpoints(directory) if os.path.isdir(directory) else []
    resume_from = None
    if existing and resume:
        if existing[-1][0] >= cfg.epochs:
            return existing[-1][1]
        resume_from = existing[-1][1]
    dataset = load_data(cfg, group)
    tcfg = training.TrainConfig.for_experiment(cfg.experiment, epochs=cfg.epochs, seed=seed)
    model = AffordanceModel(dim_c, dataset.specs[0].n_channels, seed=seed)
    records = training.train(model, dataset, tcfg, checkpoint_dir=directory, resume_from=resume_from)
    training.write_loss_csv(os.path.join(directory, "losses.csv"), records)
    return training.checkpoint_path(directory, cfg.epochs)


def train_models(cfg, resume=False):
    tasks = []
    for group in groups(cfg):
        load_data(cfg, group)  # generate once, before any worker starts
        tasks += [(cfg, group, d, s, resume) for d in cfg.dim_c for s in cfg.seeds]
    return _map(_train_task, tasks, cfg.workers)


def _episode_arena(cfg, label, spec, seed, run):
    if spec is not None:
        return spec
    return env_sim.generate_environment(10_000 + 100 * seed + run, condition=label)


def _control_task(args):
    cfg, group, dim_c, seed = args
    path = final_checkpoint(cfg, group, dim_c, seed)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing checkpoint {path}; run the train command first")
    model = load_checkpoint(path)
    losses = model.meta.get("losses", [])
    val_nll = float(losses[-1]["val_nll"]) if losses else float("nan")
    rows = []
    for label, spec in control_maps(cfg, group):
        fld = planning.ContextField(model, spec) if spec is not None else None
        setting = setting_name(label, cfg.planner, dim_c)
        for run in range(cfg.runs):
            arena = _episode_arena(cfg, label, spec, seed, run)
            field_ = fld if fld is not None else planning.ContextField(model, arena)
            start, target = env_sim.sample_start_target(np.random.default_rng([seed, run]), run % 4,
                                                        arena.width, arena.height)
            planner = planning.make_planner(cfg.planner)
            name = setting.replace("/", "_")
            trace = os.path.join(cfg.out, "traj", f"{name}_s{seed}_r{run}.trace.jsonl") if cfg.trace else None
            result = planning.control_episode(model, arena, start, target, planner, max_steps=cfg.max_steps,
                                              seed=100 * seed + run, beta=cfg.beta, fld=field_, trace_path=trace)
            env_sim.write_jsonl(os.path.join(cfg.out, "traj", f"{name}_s{seed}_r{run}.jsonl"),
                                [{"start": start.tolist(), "target": target.tolist(), **result.summary()}]
                                + result.records)
            rows.append(analysis.RunRecord(setting, seed, run, val_nll, result.mean_prediction_nll,
                                           result.mean_distance, result.success, result.fog_steps > 0))
    return rows


def run_control(cfg):
    os.makedirs(os.path.join(cfg.out, "traj"), exist_ok=True)
    tasks = [(cfg, g, d, s) for g in groups(cfg) for d in cfg.dim_c for s in cfg.seeds]
    rows = [r for part in _map(_control_task, tasks, cfg.workers) for r in part]
    rows.sort(key=lambda r: (r.setting, r.seed, r.run))
    path = os.path.join(cfg.out, "metrics.csv")
    analysis.write_metrics_csv(path, rows)
    return path, rows


def run_render(cfg, series=True):
    """One affordance map per (group, dim_c >= 1, seed); epoch series for the first seed."""
    out_dir = os.path.join(cfg.out, "maps")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for group in groups(cfg):
        spec = render_spec(cfg, group)
        for dim_c in cfg.dim_c:
            if dim_c == 0:
                continue
            for seed in cfg.seeds:
                path = final_checkpoint(cfg, group, dim_c, seed)
                if not os.path.exists(path):
                    raise FileNotFoundError(f"missing checkpoint {path}; run the train command first")
                img_path = os.path.join(out_dir, f"{group}_dc{dim_c}_s{seed}.ppm")
                analysis.render_affordance_map(path, spec, img_path)
                written.append(img_path)
            if series:
                seed = cfg.seeds[0]
                sdir = os.path.join(out_dir, f"series_{group}_dc{dim_c}_s{seed}")
                os.makedirs(sdir, exist_ok=True)
                for epoch, _ in analysis.render_epoch_series(run_dir(cfg, group, dim_c, seed), spec, sdir):
                    written.append(os.path.join(sdir, f"map_epoch{epoch:03d}.ppm"))
    return written


def run_report(cfg):
    path = os.path.join(cfg.out, "metrics.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {path}; run the control command first")
    summary = analysis.aggregate_metrics(analysis.read_metrics_csv(path))
    out = os.path.join(cfg.out, "summary.csv")
    analysis.write_summary_csv(out, summary)
    return out, summary


def format_report(summary):
    lines = [f"{'setting':<24} {'runs':>4} {'success':>8} {'val_nll':>9} {'pred_nll':>9} {'mean_dist':>9}"]
    for s in summary:
        med = {k: s.stats[k].median if k in s.stats else float("nan") for k in ("val_nll", "pred_nll", "mean_dist")}
        lines.append(f"{s.setting:<24} {s.n_runs:>4} {s.success_ratio:>8.2f} {med['val_nll']:>9.3f} "
                     f"{med['pred_nll']:>9.3f} {med['mean_dist']:>9.3f}")
    return "\n".join(lines)


def write_manifest(cfg, command, outputs):
    """Deterministic record of what produced the outputs (no timestamps)."""
    doc = {
        "command": command,
        "config": asdict(cfg),
        "config_digest": cfg.digest(),
        "seeds": cfg.seeds,
        "versions": {
            "artifact": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "approximate_maps": maps.APPROXIMATE,
        "outputs": sorted(os.path.relpath(p, cfg.out) for p in outputs),
    }
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, f"manifest_{command}.json")
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


