"""Random-exploration datasets and joint NLL training of both networks."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import env_sim
from .models import DP_SCALE, AffordanceModel, load_checkpoint, save_checkpoint
from .tensor_nn import Adam, NonFiniteError, clip_global_norm

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
SEQ_LEN = 300
HOLD_STEPS = (5, 20)
COVERAGE_CELL = 0.25


class TrainingError(RuntimeError):
    pass


# -- loss -------------------------------------------------------------------

def gaussian_nll(mean, std, x):
    """Per-sample negative log-likelihood of ``x`` under a diagonal Gaussian."""
    mean, std, x = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (mean, std, x)))
    z = (x - mean) / std
    return 0.5 * np.sum(LOG_2PI + 2.0 * np.log(std) + z * z, axis=-1)


def nll_loss(mean, std, x):
    """Mean NLL over a batch together with its gradients w.r.t. mean and std."""
    mean = np.atleast_2d(mean)
    std = np.atleast_2d(std)
    x = np.atleast_2d(x)
    n = mean.shape[0]
    diff = x - mean
    inv_var = 1.0 / (std * std)
    loss = float(np.mean(gaussian_nll(mean, std, x)))
    dmean = -diff * inv_var / n
    dstd = (1.0 / std - diff * diff * inv_var / std) / n
    return loss, dmean, dstd


def log_likelihood_score(mean, var, x):
    """Score of the diagonal-Gaussian log-likelihood: (dLL/dmean, dLL/dvar)."""
    diff = np.asarray(x) - np.asarray(mean)
    var = np.asarray(var, dtype=np.float64)
    return diff / var, (diff * diff / var - 1.0) / (2.0 * var)


# -- data -------------------------------------------------------------------

@dataclass
class Dataset:
    """Transitions of ``n`` sequences, each ``seq_len`` long.

    For transition ``t`` of sequence ``i`` the network sees the local view
    at ``view_pos[i, t]``, the last observed position change ``dp_in`` and
    the action, and must predict ``target[i, t]``.
    """

    specs: list
    spec_index: np.ndarray   # (n,)
    true_p: np.ndarray       # (n, T + 2, 2)
    observed_p: np.ndarray   # (n, T + 2, 2)
    actions: np.ndarray      # (n, T + 1, 4)
    n_train: int
    view_from_true: bool = True

    @property
    def n_sequences(self):
        return len(self.spec_index)

    @property
    def seq_len(self):
        return self.actions.shape[1] - 1

    @property
    def n_transitions(self):
        return self.n_sequences * self.seq_len

    @property
    def dp_in(self):
        return self.observed_p[:, 1:-1] - self.observed_p[:, :-2]

    @property
    def target(self):
        return self.observed_p[:, 2:] - self.observed_p[:, 1:-1]

    @property
    def step_actions(self):
        return self.actions[:, 1:]

    @property
    def view_pos(self):
        src = self.true_p if self.view_from_true else self.observed_p
        return src[:, 1:-1]

    def train_indices(self):
        return np.arange(self.n_train)

    def val_indices(self):
        return np.arange(self.n_train, self.n_sequences)

    def batch(self, seqs, t0=0, t1=None):
        """Arrays ``(views, dp, actions, target)`` flattened over seqs x time."""
        t1 = self.seq_len if t1 is None else t1
        seqs = np.asarray(seqs)
        pos = self.view_pos[seqs, t0:t1]
        views = np.empty((len(seqs), t1 - t0, self.specs[0].n_channels, env_sim.VIEW_SIZE, env_sim.VIEW_SIZE))
        for k, spec in enumerate(self.specs):
            sel = self.spec_index[seqs] == k
            if np.any(sel):
                views[sel] = env_sim.local_views(spec, pos[sel])
        n = len(seqs) * (t1 - t0)
        return (
            views.reshape((n,) + views.shape[2:]),
            self.dp_in[seqs, t0:t1].reshape(n, 2),
            self.step_actions[seqs, t0:t1].reshape(n, 4),
            self.target[seqs, t0:t1].reshape(n, 2),
        )

    def coverage(self):
        """Fraction of free 0.25 x 0.25 cells visited by the true trajectories."""
        fractions = []
        for k, spec in enumerate(self.specs):
            nx = int(round(spec.width / COVERAGE_CELL))
            ny = int(round(spec.height / COVERAGE_CELL))
            free = np.zeros((ny, nx), dtype=bool)
            for j in range(ny):
                for i in range(nx):
                    # a cell counts as free if the vehicle fits anywhere on a 5x5 probe grid
                    xs = (i + np.linspace(0.1, 0.9, 5)) * COVERAGE_CELL
                    ys = (j + np.linspace(0.1, 0.9, 5)) * COVERAGE_CELL
                    free[j, i] = any(env_sim.free_position(spec, np.array([x, y])) for x in xs for y in ys)
            p = self.true_p[self.spec_index == k].reshape(-1, 2)
            ix = np.clip((p[:, 0] / COVERAGE_CELL).astype(int), 0, nx - 1)
            iy = np.clip((p[:, 1] / COVERAGE_CELL).astype(int), 0, ny - 1)
            visited = np.zeros_like(free)
            visited[iy, ix] = True
            fractions.append((visited & free).sum() / max(free.sum(), 1))
        return float(np.mean(fractions))

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for i in range(self.n_sequences):
                for t in range(self.actions.shape[1]):
                    f.write(json.dumps({
                        "seq": i, "t": t,
                        "env": int(self.spec_index[i]),
                        "p": self.true_p[i, t + 1].tolist(),
                        "observed_p": self.observed_p[i, t + 1].tolist(),
                        "dp_observed": (self.observed_p[i, t + 1] - self.observed_p[i, t]).tolist(),
                        "a": self.actions[i, t].tolist(),
                        "split": "train" if i < self.n_train else "val",
                    }) + "\n")

    @classmethod
    def from_jsonl(cls, path, specs):
        """Rebuild a dataset from its JSON-lines file. Views come from ``specs``."""
        rows = {}
        with open(path) as f:
            for line in f:
                r = json.loads(line)
                rows.setdefault(r["seq"], []).append(r)
        n = len(rows)
        T1 = len(rows[0])
        true_p = np.zeros((n, T1 + 1, 2))
        obs_p = np.zeros((n, T1 + 1, 2))
        actions = np.zeros((n, T1, 4))
        spec_index = np.zeros(n, dtype=int)
        n_train = 0
        for i in range(n):
            seq = sorted(rows[i], key=lambda r: r["t"])
            spec_index[i] = seq[0].get("env", 0)
            n_train += seq[0].get("split", "train") == "train"
            for r in seq:
                t = r["t"]
                true_p[i, t + 1] = r["p"]
                obs_p[i, t + 1] = r["observed_p"]
                actions[i, t] = r["a"]
            obs_p[i, 0] = obs_p[i, 1] - np.asarray(seq[0]["dp_observed"])
            # the start is always outside fog, so true and observed agree there
            true_p[i, 0] = obs_p[i, 0]
        return cls(list(specs), spec_index, true_p, obs_p, actions, n_train)


def exploration_actions(rng, n_steps, hold=HOLD_STEPS):
    """Piecewise-constant random throttles, each held 5-20 steps independently."""
    actions = np.empty((n_steps, 4))
    for k in range(4):
        t = 0
        while t < n_steps:
            d = int(rng.integers(hold[0], hold[1] + 1))
            actions[t:t + d, k] = rng.uniform(0.0, 1.0)
            t += d
    return actions


def _fog_free_start(spec, rng):
    for _ in range(10000):
        p = env_sim.sample_free_position(spec, rng)
        if not env_sim.inside(spec, "fog", p):
            return p
    raise RuntimeError("no fog-free start position")


def rollout_sequence(spec, rng, seq_len=SEQ_LEN):
    start = _fog_free_start(spec, rng)
    state = env_sim.make_state(spec, start, seed=int(rng.integers(2 ** 31)))
    actions = exploration_actions(rng, seq_len + 1)
    true_p = [state.p.copy()]
    obs_p = [state.observed_p.copy()]
    for a in actions:
        state, obs = env_sim.step(state, spec, a)
        true_p.append(state.p.copy())
        obs_p.append(obs.observed_position.copy())
    return np.array(true_p), np.array(obs_p), actions


def generate_dataset(spec, seed, n_sequences=200, seq_len=SEQ_LEN, val_fraction=0.2):
    """Random-exploration dataset; the last ``val_fraction`` of sequences is validation."""
    specs = spec if isinstance(spec, (list, tuple)) else [spec]
    rng = np.random.default_rng(seed)
    spec_index = np.arange(n_sequences) % len(specs)
    true_p, obs_p, acts = [], [], []
    for i in range(n_sequences):
        tp, op, a = rollout_sequence(specs[spec_index[i]], rng, seq_len)
        true_p.append(tp)
        obs_p.append(op)
        acts.append(a)
    n_train = n_sequences - int(round(val_fraction * n_sequences))
    return Dataset(list(specs), spec_index, np.array(true_p), np.array(obs_p), np.array(acts), n_train)


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 10
    window: int = 50
    vision_lr: float = 0.00075
    transition_lr: float = 0.008
    vision_clip: float = 2.0
    transition_clip: float = 1.2
    seed: int = 0
    lr_divisor: float = 1.0

    @classmethod
    def for_experiment(cls, experiment, **overrides):
        cfg = cls(**overrides)
        if experiment == "V":
            cfg.lr_divisor = 10.0
            if "epochs" not in overrides:
                cfg.epochs = 500
        return cfg

    def digest(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class LossRecord:
    epoch: int
    train_nll: float
    val_nll: float


@dataclass
class Trainer:
    """Owns the model, its two Adam optimisers and the epoch counter."""

    model: AffordanceModel
    config: TrainConfig
    vision_opt: Adam = field(init=False)
    transition_opt: Adam = field(init=False)

    def __post_init__(self):
        c = self.config
        self.vision_opt = Adam(self.model.vision.parameters(), c.vision_lr / c.lr_divisor)
        self.transition_opt = Adam(self.model.transition.parameters(), c.transition_lr / c.lr_divisor)

    def optimizer_state(self):
        return {"vision": self.vision_opt.state_dict(), "transition": self.transition_opt.state_dict()}

    def load_optimizer_state(self, state):
        self.vision_opt.load_state_dict(state["vision"])
        self.transition_opt.load_state_dict(state["transition"])

    def loss_and_grads(self, views, dp, actions, target):
        """Forward + backward on one batch; gradients land in the models' buffers."""
        model = self.model
        model.vision.zero_grad()
        model.transition.zero_grad()
        if model.dim_c:
            codes = model.vision.forward(views)
        else:
            codes = np.zeros((len(dp), 0))
        x = model.transition_input(codes, dp, actions)
        mean, std, cache = model.transition.forward(x)
        loss, dmean, dstd = nll_loss(mean, std, DP_SCALE * target)
        dx = model.transition.backward(cache, dmean, dstd)
        if model.dim_c:
            model.vision.backward(dx[:, :model.dim_c])
        return loss

    def train_step(self, views, dp, actions, target):
        loss = self.loss_and_grads(views, dp, actions, target)
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite loss")
        c = self.config
        tg = self.model.transition.gradients()
        clip_global_norm(tg, c.transition_clip)
        self.transition_opt.step(tg)
        if self.model.dim_c:
            vg = self.model.vision.gradients()
            clip_global_norm(vg, c.vision_clip)
            self.vision_opt.step(vg)
        return loss

    def evaluate(self, dataset, seqs, chunk=20):
        total, count = 0.0, 0
        for i in range(0, len(seqs), chunk):
            views, dp, actions, target = dataset.batch(seqs[i:i + chunk])
            codes = self.model.context(views)
            pred = self.model.predict_from_codes(codes, dp, actions)
            nll = gaussian_nll(DP_SCALE * pred.mean, DP_SCALE * pred.std, DP_SCALE * target)
            total += float(nll.sum())
            count += len(nll)
        return total / max(count, 1)

    def run_epoch(self, dataset, epoch, dump_dir=None):
        c = self.config
        rng = np.random.default_rng([c.seed, epoch])
        seqs = rng.permutation(dataset.train_indices())
        losses = []
        for b in range(0, len(seqs), c.batch_size):
            group = seqs[b:b + c.batch_size]
            for t0 in range(0, dataset.seq_len, c.window):
                batch = dataset.batch(group, t0, min(t0 + c.window, dataset.seq_len))
                try:
                    losses.append(self.train_step(*batch))
                except NonFiniteError as exc:
                    path = os.path.join(dump_dir or ".", f"bad_batch_epoch{epoch}_b{b}_t{t0}.npz")
                    np.savez(path, views=batch[0], dp=batch[1], actions=batch[2], target=batch[3])
                    raise TrainingError(f"{exc} in epoch {epoch}; batch dumped to {path}") from exc
        return float(np.mean(losses)) if losses else float("nan")


def checkpoint_path(directory, epoch):
    return os.path.join(directory, f"ckpt_epoch{epoch:03d}.json")


def train(model, dataset, config, checkpoint_dir=None, resume_from=None, log_every=0):
    """Train ``model`` in place; returns the list of per-epoch loss records.

    With ``checkpoint_dir`` set, the untrained model is saved as epoch 0 and
    every later epoch gets its own checkpoint (including optimiser state, so
    ``resume_from`` continues exactly where an earlier run stopped).
    """
    trainer = Trainer(model, config)
    records = []
    start = 1
    if resume_from is not None:
        loaded, opt_state = load_checkpoint(resume_from, dim_c=model.dim_c, dim_i=model.dim_i, with_optimizer=True)
        for (_, dst), (_, src) in zip(model.named_parameters(), loaded.named_parameters()):
            dst[...] = src
        model.epoch = loaded.epoch
        if opt_state is not None:
            trainer.load_optimizer_state(opt_state)
        records = [LossRecord(**r) for r in loaded.meta.get("losses", [])]
        start = loaded.epoch + 1
    model.meta["train_config"] = config.digest()
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        if resume_from is None:
            model.meta["losses"] = []
            save_checkpoint(model, checkpoint_path(checkpoint_dir, 0), trainer.optimizer_state())
    val = dataset.val_indices()
    for epoch in range(start, config.epochs + 1):
        train_nll = trainer.run_epoch(dataset, epoch, dump_dir=checkpoint_dir)
        val_nll = trainer.evaluate(dataset, val) if len(val) else float("nan")
        records.append(LossRecord(epoch, train_nll, val_nll))
        model.epoch = epoch
        model.meta["losses"] = [asdict(r) for r in records]
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train %.4f val %.4f", epoch, train_nll, val_nll)
        if checkpoint_dir is not None:
            save_checkpoint(model, checkpoint_path(checkpoint_dir, epoch), trainer.optimizer_state())
    return records


def write_loss_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_nll", "val_nll"])
        for r in records:
            w.writerow([r.epoch, repr(r.train_nll), repr(r.val_nll)])
