"""Expected-free-energy planning over imagined rollouts.

A rollout feeds the predicted mean position change back into the
transition network for ``T`` steps while probing the look-up map at the
predicted absolute positions. Step-wise Gaussians are composed into
absolute-position Gaussians by cumulative sums of means and variances.
The EFE of a policy is the horizon mean of

    KL(predicted || target) + beta * entropy(predicted)

Two optimisers minimise it: gradient descent on the throttles with
backpropagation through the rollout, and a cross-entropy method with
elite keeping and shifted warm starts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import env_sim
from .models import DP_SCALE, ACTION_DIM
from .training import gaussian_nll

HORIZON = 20
TARGET_STD_FAR = 0.1
TARGET_STD_NEAR = 0.01
NEAR_RADIUS = 0.5
SUCCESS_RADIUS = 0.1
LOG_2PI_E = math.log(2.0 * math.pi * math.e)


# -- closed forms for diagonal Gaussians -------------------------------------

def gaussian_kl_diag(mu0, var0, mu1, var1):
    """KL(N(mu0, diag var0) || N(mu1, diag var1)), summed over the last axis."""
    mu0, var0, mu1, var1 = (np.asarray(a, dtype=np.float64) for a in (mu0, var0, mu1, var1))
    ratio = var0 / var1
    return 0.5 * np.sum(ratio + (mu1 - mu0) ** 2 / var1 - 1.0 - np.log(ratio), axis=-1)


def gaussian_kl_diag_grads(mu0, var0, mu1, var1):
    """Gradients of the KL w.r.t. ``mu0`` and ``var0``."""
    var0 = np.asarray(var0, dtype=np.float64)
    var1 = np.asarray(var1, dtype=np.float64)
    dmu0 = -(np.asarray(mu1) - np.asarray(mu0)) / var1
    dvar0 = 0.5 * (1.0 / var1 - 1.0 / var0)
    return dmu0, dvar0


def gaussian_entropy_diag(var):
    var = np.asarray(var, dtype=np.float64)
    return 0.5 * np.sum(LOG_2PI_E + np.log(var), axis=-1)


def gaussian_entropy_diag_grad(var):
    return 0.5 / np.asarray(var, dtype=np.float64)


# -- types -------------------------------------------------------------------

@dataclass
class TargetDistribution:
    mean: np.ndarray
    std: float

    @classmethod
    def for_position(cls, target, position):
        """Isotropic target whose width shrinks once ``position`` is within 0.5 units."""
        target = np.asarray(target, dtype=np.float64)
        near = np.linalg.norm(np.asarray(position) - target) < NEAR_RADIUS
        return cls(target, TARGET_STD_NEAR if near else TARGET_STD_FAR)


@dataclass
class EFEConfig:
    beta: float = 1.0
    horizon: int = HORIZON

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


class ContextField:
    """Context codes precomputed for every cell of the extended probe grid.

    Local views only depend on the raster cell that contains a position,
    so probing the vision network once per cell is exact.
    """

    def __init__(self, model, spec):
        self.spec = spec
        self.dim_c = model.dim_c
        rows, cols = spec.probe_grid_shape()
        if model.dim_c:
            views = spec.all_probe_views()
            codes = np.concatenate([model.context(views[i:i + 2048]) for i in range(0, len(views), 2048)])
        else:
            codes = np.zeros((rows * cols, 0))
        self.codes = codes
        self.codes.setflags(write=False)

    def lookup(self, positions):
        positions = np.asarray(positions, dtype=np.float64)
        return self.codes[self.spec.probe_index(positions)]


def _field(model, spec_or_field):
    if isinstance(spec_or_field, ContextField):
        return spec_or_field
    return ContextField(model, spec_or_field)


@dataclass
class Rollout:
    """Imagined trajectories for a batch of policies.

    ``means``/``variances`` are the absolute-position Gaussians after each
    step, ``lookups`` the positions where the map was probed before each step.
    """

    means: np.ndarray          # (B, T, 2)
    variances: np.ndarray      # (B, T, 2)
    step_means: np.ndarray     # (B, T, 2) predicted position changes
    step_stds: np.ndarray      # (B, T, 2)
    lookups: np.ndarray        # (B, T, 2)
    caches: list = field(default_factory=list, repr=False)

    @property
    def stds(self):
        return np.sqrt(self.variances)


def rollout(model, spec_or_field, start_p, start_dp, policy, keep_cache=False):
    """Roll ``policy`` (shape ``(T, 4)`` or ``(B, T, 4)``) through the transition model."""
    fld = _field(model, spec_or_field)
    policy = np.asarray(policy, dtype=np.float64)
    if policy.ndim == 2:
        policy = policy[None]
    n, horizon, _ = policy.shape
    pos = np.tile(np.asarray(start_p, dtype=np.float64), (n, 1))
    dp = np.tile(np.asarray(start_dp, dtype=np.float64), (n, 1))
    var = np.zeros((n, 2))
    means = np.empty((n, horizon, 2))
    variances = np.empty((n, horizon, 2))
    step_means = np.empty((n, horizon, 2))
    step_stds = np.empty((n, horizon, 2))
    lookups = np.empty((n, horizon, 2))
    caches = []
    net = model.transition
    for k in range(horizon):
        lookups[:, k] = pos
        codes = fld.lookup(pos)
        x = np.concatenate([codes, DP_SCALE * dp, policy[:, k]], axis=1)
        m_s, s_s, cache = net.forward(x)
        m = m_s / DP_SCALE
        s = s_s / DP_SCALE
        if keep_cache:
            caches.append(cache)
        pos = pos + m
        var = var + s * s
        dp = m
        means[:, k] = pos
        variances[:, k] = var
        step_means[:, k] = m
        step_stds[:, k] = s
    return Rollout(means, variances, step_means, step_stds, lookups, caches)


def efe(ro, target, cfg=None):
    """Horizon-mean expected free energy of every policy in the rollout."""
    cfg = cfg or EFEConfig()
    tvar = np.full(2, target.std ** 2)
    kl = gaussian_kl_diag(ro.means, ro.variances, target.mean, tvar)
    ent = gaussian_entropy_diag(ro.variances)
    return np.mean(kl + cfg.beta * ent, axis=-1)


def efe_gradients(ro, target, cfg=None):
    """d EFE / d (absolute mean, absolute variance) for every step."""
    cfg = cfg or EFEConfig()
    horizon = ro.means.shape[1]
    tvar = np.full(2, target.std ** 2)
    dmu, dvar = gaussian_kl_diag_grads(ro.means, ro.variances, target.mean, tvar)
    dvar = dvar + cfg.beta * gaussian_entropy_diag_grad(ro.variances)
    return dmu / horizon, dvar / horizon


def efe_action_gradient(model, ro, target, cfg=None):
    """Backpropagate the EFE through the rollout onto the actions.

    Context codes are treated as constants: no gradient flows through the
    map look-up.
    """
    if not ro.caches:
        raise ValueError("rollout was not run with keep_cache=True")
    dmu, dvar = efe_gradients(ro, target, cfg)
    # absolute quantities are cumulative sums of the per-step ones
    g_mean = np.flip(np.cumsum(np.flip(dmu, 1), 1), 1)
    g_var = np.flip(np.cumsum(np.flip(dvar, 1), 1), 1)
    n, horizon, _ = ro.means.shape
    dc = model.dim_c
    grad_a = np.empty((n, horizon, ACTION_DIM))
    carry = np.zeros((n, 2))
    for k in range(horizon - 1, -1, -1):
        dm = g_mean[:, k] + carry
        ds = 2.0 * ro.step_stds[:, k] * g_var[:, k]
        dx = model.transition.backward(ro.caches[k], dm / DP_SCALE, ds / DP_SCALE, accumulate=False)
        grad_a[:, k] = dx[:, dc + 2:]
        carry = DP_SCALE * dx[:, dc:dc + 2]
    return grad_a


# -- gradient-based action inference -------------------------------------------

def decayed_rates(lr, decay, horizon):
    """Per-position learning rates, largest for the most distant action."""
    w = decay ** (horizon - np.arange(1, horizon + 1))
    return lr * w / w.sum()


def shift_policy(policy):
    out = np.empty_like(policy)
    out[..., :-1, :] = policy[..., 1:, :]
    out[..., -1, :] = policy[..., -1, :]
    return out


@dataclass
class PlanResult:
    action: np.ndarray
    policy: np.ndarray
    efe: float
    initial_efe: float
    trace: list


class GradientPlanner:
    """Gradient descent on the policy with early stopping on EFE increase."""

    name = "gradient"

    def __init__(self, horizon=HORIZON, lr=0.005, decay=0.9, cycles=50, init_action=0.5):
        self.horizon = horizon
        self.lr = lr
        self.decay = decay
        self.cycles = cycles
        self.policy = np.full((horizon, ACTION_DIM), init_action)
        self.rates = decayed_rates(lr, decay, horizon)

    def _evaluate(self, model, fld, p, dp, policy, target, cfg):
        ro = rollout(model, fld, p, dp, policy, keep_cache=True)
        value = float(efe(ro, target, cfg)[0])
        return value, efe_action_gradient(model, ro, target, cfg)[0], ro

    def plan(self, model, fld, p, dp, target, cfg=None, rng=None):
        cfg = cfg or EFEConfig(horizon=self.horizon)
        policy = self.policy
        current, grad, _ = self._evaluate(model, fld, p, dp, policy, target, cfg)
        initial = current
        trace = [{"cycle": 0, "best_efe": current, "mean_efe": current}]
        for cycle in range(1, self.cycles + 1):
            candidate = np.clip(policy - self.rates[:, None] * grad, 0.0, 1.0)
            value, cand_grad, _ = self._evaluate(model, fld, p, dp, candidate, target, cfg)
            if value > current:
                break
            policy, current, grad = candidate, value, cand_grad
            trace.append({"cycle": cycle, "best_efe": current, "mean_efe": current})
        action = policy[0].copy()
        self.policy = shift_policy(policy)
        return PlanResult(action, policy, current, initial, trace)


# -- cross-entropy method ----------------------------------------------------

def truncated_normal(rng, mean, var, max_tries=100):
    """Sample N(mean, var) restricted to [0, 1] by rejection.

    Entries still outside the range after ``max_tries`` rounds are clamped;
    the number of such fallbacks is returned as well.
    """
    std = np.sqrt(var)
    x = rng.normal(mean, std)
    bad = (x < 0.0) | (x > 1.0)
    for _ in range(max_tries):
        if not bad.any():
            break
        x[bad] = rng.normal(np.broadcast_to(mean, x.shape)[bad], np.broadcast_to(std, x.shape)[bad])
        bad = (x < 0.0) | (x > 1.0)
    fallbacks = int(bad.sum())
    if fallbacks:
        x = np.clip(x, 0.0, 1.0)
    return x, fallbacks


class CEMOptimizer:
    """Cross-entropy method over ``(T, D)`` action sequences in [0, 1].

    The mean survives between calls (shifted), variances are reset, and the
    best ``keep`` elites are carried into the next cycle's pool.
    """

    def __init__(self, horizon=HORIZON, dim=ACTION_DIM, n_candidates=50, n_elites=5, keep=2,
                 init_var=0.5, momentum=0.1, cycles=10, var_floor=1e-4, init_mean=0.5):
        self.horizon = horizon
        self.dim = dim
        self.n_candidates = n_candidates
        self.n_elites = n_elites
        self.keep = keep
        self.init_var = init_var
        self.momentum = momentum
        self.cycles = cycles
        self.var_floor = var_floor
        self.mean = np.full((horizon, dim), init_mean)
        self.kept = np.empty((0, horizon, dim))
        self.fallbacks = 0

    def optimize(self, objective, rng):
        """Minimise ``objective`` (maps ``(N, T, D)`` to ``(N,)``); returns best policy, value, trace."""
        mean = self.mean
        var = np.full_like(mean, self.init_var)
        kept = self.kept
        best_policy, best_value = None, np.inf
        trace = []
        for cycle in range(self.cycles):
            n_new = self.n_candidates - len(kept)
            samples, fb = truncated_normal(rng, mean, var[None].repeat(n_new, 0) if n_new else var[None][:0])
            self.fallbacks += fb
            pool = np.concatenate([kept, samples]) if len(kept) else samples
            values = np.asarray(objective(pool), dtype=np.float64)
            order = np.argsort(values, kind="stable")
            elites = pool[order[:self.n_elites]]
            if values[order[0]] < best_value:
                best_value = float(values[order[0]])
                best_policy = pool[order[0]].copy()
            mean = self.momentum * mean + (1.0 - self.momentum) * elites.mean(axis=0)
            var = self.momentum * var + (1.0 - self.momentum) * elites.var(axis=0)
            var = np.maximum(var, self.var_floor)
            kept = pool[order[:self.keep]].copy()
            trace.append({"cycle": cycle + 1, "best_efe": best_value, "mean_efe": float(values.mean())})
        self.mean = shift_policy(mean)
        self.kept = shift_policy(kept)
        self.last_mean = mean
        return best_policy, best_value, trace


class CEMPlanner:
    name = "cem"

    def __init__(self, horizon=HORIZON, **kwargs):
        self.horizon = horizon
        self.optimizer = CEMOptimizer(horizon=horizon, **kwargs)

    def plan(self, model, fld, p, dp, target, cfg=None, rng=None):
        cfg = cfg or EFEConfig(horizon=self.horizon)
        rng = rng if rng is not None else np.random.default_rng(0)

        def objective(pool):
            return efe(rollout(model, fld, p, dp, pool), target, cfg)

        start_mean = self.optimizer.mean.copy()
        policy, value, trace = self.optimizer.optimize(objective, rng)
        initial = float(objective(start_mean[None])[0])
        return PlanResult(policy[0].copy(), policy, value, initial, trace)


def make_planner(kind, horizon=HORIZON, **kwargs):
    if kind == "cem":
        return CEMPlanner(horizon=horizon, **kwargs)
    if kind == "gradient":
        return GradientPlanner(horizon=horizon, **kwargs)
    raise ValueError(f"unknown planner {kind!r}")


# -- closed-loop control -----------------------------------------------------

@dataclass
class EpisodeResult:
    records: list
    distances: np.ndarray
    prediction_nll: np.ndarray
    fog_steps: int
    reached: bool
    reached_step: int
    planned: list = field(default_factory=list, repr=False)

    @property
    def success(self):
        return self.reached

    @property
    def success_without_fog(self):
        return self.reached and self.fog_steps == 0

    @property
    def mean_distance(self):
        return float(np.mean(self.distances))

    @property
    def mean_prediction_nll(self):
        return float(np.mean(self.prediction_nll))

    def summary(self):
        return {
            "success": self.reached,
            "success_without_fog": self.success_without_fog,
            "reached_step": self.reached_step,
            "mean_distance": self.mean_distance,
            "mean_prediction_nll": self.mean_prediction_nll,
            "fog_steps": self.fog_steps,
        }


def control_episode(model, spec, start, target, planner, max_steps=200, seed=0, beta=1.0,
                    stop_on_success=False, keep_plans=False, fld=None, trace_path=None):
    """Closed-loop goal-directed control: plan, act, observe, re-plan."""
    fld = fld if fld is not None else ContextField(model, spec)
    rng = np.random.default_rng([seed, 1])
    state = env_sim.make_state(spec, start, seed=seed)
    target = np.asarray(target, dtype=np.float64)
    cfg = EFEConfig(beta=beta, horizon=getattr(planner, "horizon", HORIZON))
    dp = np.zeros(2)
    records, distances, nlls, planned, traces = [], [], [], [], []
    fog_steps = 0
    reached_step = -1
    for t in range(max_steps):
        p_obs = state.observed_p
        tgt = TargetDistribution.for_position(target, p_obs)
        result = planner.plan(model, fld, p_obs, dp, tgt, cfg, rng)
        if trace_path is not None:
            traces.extend({"step": t, **row} for row in result.trace)
        if keep_plans:
            planned.append(rollout(model, fld, p_obs, dp, result.policy).means[0])
        action = result.action
        pred = model.predict_from_codes(fld.lookup(p_obs[None]), dp[None], action[None])
        state, obs = env_sim.step(state, spec, action)
        nlls.append(float(gaussian_nll(DP_SCALE * pred.mean[0], DP_SCALE * pred.std[0], DP_SCALE * obs.observed_dp)))
        dp = obs.observed_dp
        dist = float(np.linalg.norm(state.p - target))
        distances.append(dist)
        fog_steps += obs.in_fog
        records.append(env_sim.trajectory_record(state, action, obs.touching))
        if dist < SUCCESS_RADIUS and reached_step < 0:
            reached_step = t + 1
            if stop_on_success:
                break
    if trace_path is not None:
        env_sim.write_jsonl(trace_path, traces)
    return EpisodeResult(records, np.array(distances), np.array(nlls), int(fog_steps),
                         reached_step > 0, reached_step, planned)
