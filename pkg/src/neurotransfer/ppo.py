"""Proximal Policy Optimization with hand-written gradients.

The policy and value networks are separate :class:`LayeredNet` instances
whose parameters (plus the Gaussian log-std, when present) live in one flat
vector so that Adam and finite-difference checks see a single array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gates
from .arena import ArenaEnv
from .nnet import DimensionError, Layout, LayeredNet, backprop, flatten, forward_layered, unflatten

BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"
LOG_2PI = math.log(2 * math.pi)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    batch_size: int = 20498
    unroll: int = 1
    n_minibatches: int = 32
    epochs: int = 4
    clip: float = 0.2
    entropy_cost: float = 1e-2
    value_coef: float = 0.5
    gamma: float = 1.0
    gae_lambda: float = 0.95
    lr: float = 3e-4
    reward_scaling: float = 1.0
    hidden: tuple[int, ...] = (4,) * 6
    value_hidden: tuple[int, ...] | None = None  # None: same as the policy
    activation: str = "tanh"
    init_scale: float = 1.0
    normalize_obs: bool = False
    log_std_bounds: tuple[float, float] = (-5.0, 2.0)

    @property
    def n_envs(self) -> int:
        return max(1, self.batch_size // self.unroll)

    @classmethod
    def for_gates(cls, **kw) -> "PPOConfig":
        return replace(cls(), **kw)

    @classmethod
    def for_arena(cls, **kw) -> "PPOConfig":
        base = cls(unroll=5, gamma=0.97, reward_scaling=10.0, hidden=(32,) * 4, normalize_obs=True)
        return replace(base, **kw)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


@dataclass
class RunningNorm:
    """Running mean/variance of observations (parallel-batch update)."""

    dim: int
    count: float = 1e-4
    mean: np.ndarray = None
    var: np.ndarray = None
    clip: float = 10.0

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.var is None:
            self.var = np.ones(self.dim)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        n = len(x)
        if n == 0:
            return
        b_mean, b_var = x.mean(axis=0), x.var(axis=0)
        total = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x) -> np.ndarray:
        return np.clip((np.asarray(x) - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)


@dataclass
class PolicyValueNet:
    policy_layout: Layout
    value_layout: Layout
    head: str
    params: np.ndarray
    norm: RunningNorm | None = None
    log_std_bounds: tuple[float, float] = (-5.0, 2.0)

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, head: str, cfg: PPOConfig, rng: np.random.Generator) -> "PolicyValueNet":
        if head not in (BERNOULLI, GAUSSIAN):
            raise ValueError(f"unknown action head {head!r}")
        vh = tuple(cfg.hidden if cfg.value_hidden is None else cfg.value_hidden)
        pl = Layout((obs_dim,) + tuple(cfg.hidden) + (act_dim,), (cfg.activation,) * len(cfg.hidden) + ("identity",))
        vl = Layout((obs_dim,) + vh + (1,), (cfg.activation,) * len(vh) + ("identity",))
        parts = [flatten(LayeredNet.random(pl, rng, cfg.init_scale)).values,
                 flatten(LayeredNet.random(vl, rng, cfg.init_scale)).values]
        # small final policy layer keeps the initial policy close to uniform
        pol = unflatten(pl, parts[0])
        pol.weights[-1] *= 0.01
        parts[0] = flatten(pol).values
        if head == GAUSSIAN:
            parts.append(np.zeros(act_dim))
        norm = RunningNorm(obs_dim) if cfg.normalize_obs else None
        return cls(pl, vl, head, np.concatenate(parts), norm, cfg.log_std_bounds)

    @property
    def obs_dim(self) -> int:
        return self.policy_layout.sizes[0]

    @property
    def act_dim(self) -> int:
        return self.policy_layout.sizes[-1]

    def split(self, params=None):
        p = self.params if params is None else params
        n_p, n_v = self.policy_layout.size, self.value_layout.size
        pol = unflatten(self.policy_layout, p[:n_p])
        val = unflatten(self.value_layout, p[n_p:n_p + n_v])
        log_std = p[n_p + n_v:] if self.head == GAUSSIAN else None
        return pol, val, log_std

    def normalize(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        return self.norm(obs) if self.norm is not None else obs

    def dist_params(self, obs_n) -> np.ndarray:
        pol, _, _ = self.split()
        return forward_layered(pol, obs_n)[0]

    def value(self, obs_n) -> np.ndarray:
        _, val, _ = self.split()
        return forward_layered(val, obs_n)[0][..., 0]

    def log_std(self, params=None) -> np.ndarray:
        lo, hi = self.log_std_bounds
        return np.clip(self.split(params)[2], lo, hi)

    def sample(self, obs_n, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        out = self.dist_params(obs_n)
        if self.head == BERNOULLI:
            p = _sigmoid(out)
            a = (rng.random(out.shape) < p).astype(np.float64)
        else:
            a = out + np.exp(self.log_std()) * rng.standard_normal(out.shape)
        return a, log_prob(self.head, out, self.log_std() if self.head == GAUSSIAN else None, a)

    def deterministic(self, obs) -> np.ndarray:
        """Mode of the action distribution (bits as 0/1, Gaussian mean)."""
        out = self.dist_params(self.normalize(obs))
        return (out > 0).astype(np.float64) if self.head == BERNOULLI else out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def log_prob(head: str, out: np.ndarray, log_std, actions) -> np.ndarray:
    if head == BERNOULLI:
        return np.sum(actions * _log_sigmoid(out) + (1 - actions) * _log_sigmoid(-out), axis=-1)
    z = (actions - out) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def entropy(head: str, out: np.ndarray, log_std) -> np.ndarray:
    if head == BERNOULLI:
        p = _sigmoid(out)
        return np.sum(-p * _log_sigmoid(out) - (1 - p) * _log_sigmoid(-out), axis=-1)
    return np.full(out.shape[0], np.sum(log_std + 0.5 * (LOG_2PI + 1)))


def goal_condition(observation, goal) -> np.ndarray:
    """Append the (already normalised) goal coordinates to the observation."""
    obs = np.asarray(observation, dtype=np.float64)
    g = np.broadcast_to(np.asarray(goal, dtype=np.float64), obs.shape[:-1] + (2,))
    return np.concatenate([obs, g], axis=-1)


# ---------------------------------------------------------------------------
# loss and gradient
# ---------------------------------------------------------------------------


@dataclass
class Minibatch:
    obs: np.ndarray  # normalised observations
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_loss(net: PolicyValueNet, mb: Minibatch, cfg: PPOConfig, params=None) -> tuple[float, np.ndarray, dict]:
    """Total loss and its exact gradient w.r.t. the flat parameter vector.

    ``mb.advantages`` are used as given (normalise before calling).
    """
    params = net.params if params is None else params
    pol, val, raw_log_std = net.split(params)
    m = len(mb.obs)
    out, pcache = forward_layered(pol, mb.obs)
    v, vcache = forward_layered(val, mb.obs)
    v = v[:, 0]
    log_std = None
    if net.head == GAUSSIAN:
        lo, hi = cfg.log_std_bounds
        log_std = np.clip(raw_log_std, lo, hi)
    logp = log_prob(net.head, out, log_std, mb.actions)
    ratio = np.exp(logp - mb.old_logp)
    A = mb.advantages
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip)
    unclipped_active = ratio * A <= clipped * A
    surrogate = np.where(unclipped_active, ratio * A, clipped * A)
    ent = entropy(net.head, out, log_std)
    pg_loss = -surrogate.mean()
    v_loss = cfg.value_coef * np.mean((v - mb.returns) ** 2)
    ent_loss = -cfg.entropy_cost * ent.mean()
    loss = float(pg_loss + v_loss + ent_loss)

    # d loss / d logp per sample
    g_logp = np.where(unclipped_active, -ratio * A, 0.0) / m
    grad_ls = None
    if net.head == BERNOULLI:
        p = _sigmoid(out)
        g_out = g_logp[:, None] * (mb.actions - p)
        # dH/dlogit = -logit * p (1 - p)
        g_out += (-cfg.entropy_cost / m) * (-out * p * (1 - p))
    else:
        inv_var = np.exp(-2 * log_std)
        diff = mb.actions - out
        g_out = g_logp[:, None] * diff * inv_var
        g_ls = np.sum(g_logp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - cfg.entropy_cost
        lo, hi = cfg.log_std_bounds
        grad_ls = np.where((raw_log_std >= lo) & (raw_log_std <= hi), g_ls, 0.0)
    g_pol = backprop(pol, pcache, g_out).values
    g_v = (2 * cfg.value_coef / m) * (v - mb.returns)
    g_val = backprop(val, vcache, g_v[:, None]).values
    parts = [g_pol, g_val] + ([grad_ls] if grad_ls is not None else [])
    info = {"policy_loss": float(pg_loss), "value_loss": float(v_loss), "entropy": float(ent.mean()),
            "clip_fraction": float(np.mean(np.abs(ratio - 1) > cfg.clip))}
    return loss, np.concatenate(parts), info


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 3e-4) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Update ``state`` in place and return the new parameters."""
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, E, obs_dim), normalised
    actions: np.ndarray  # (T, E, act_dim)
    logp: np.ndarray  # (T, E)
    rewards: np.ndarray  # (T, E), already scaled
    values: np.ndarray  # (T, E)
    dones: np.ndarray  # (T, E)
    bootstrap: np.ndarray  # (E,)
    raw_obs: np.ndarray = field(default=None, repr=False)

    @property
    def capacity(self) -> int:
        return self.rewards.size


def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise DimensionError("rewards, values and dones must have the same shape")
    bootstrap = np.asarray(bootstrap, dtype=np.float64)
    if bootstrap.shape != rewards.shape[1:]:
        raise DimensionError("bootstrap must match one time slice")
    adv = np.zeros_like(rewards)
    last = np.zeros_like(bootstrap)
    next_v = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_v = values[t]
    return adv, adv + values


class GatesVecEnv:
    """Sampled-mode stepping gates for many parallel single-step episodes."""

    def __init__(self, task: gates.GatesTask, level: int, n_envs: int, rng: np.random.Generator):
        self.task = replace(task, mode=gates.SAMPLED)
        self.level = level
        self.n_envs = n_envs
        self.rng = rng
        self.episodes = 0
        self.steps = 0
        self.reset()

    @property
    def obs_dim(self) -> int:
        return self.task.n_inputs

    @property
    def act_dim(self) -> int:
        return self.task.n_outputs

    def set_level(self, level: int) -> None:
        self.level = level
        self.reset()

    def reset(self) -> np.ndarray:
        self.rows = gates.sample_inputs(self.task, self.level, self.rng, self.n_envs)
        return self.rows.astype(np.float64)

    def step(self, actions):
        target = np.array([gates.oracle(self.task, self.level, r) for r in self.rows])
        reward = np.mean(gates.threshold(actions).reshape(target.shape) == target, axis=1)
        self.episodes += self.n_envs
        self.steps += self.n_envs
        return self.reset(), reward, np.ones(self.n_envs, dtype=bool)


class ArenaVecEnv:
    """Auto-resetting wrapper over :class:`ArenaEnv`."""

    def __init__(self, env: ArenaEnv):
        self.env = env
        self.n_envs = env.n_envs
        self.episodes = 0
        self.steps = 0
        self.obs = env.reset()

    @property
    def obs_dim(self) -> int:
        return self.env.obs_dim

    @property
    def act_dim(self) -> int:
        return 4

    def step(self, actions):
        _, reward, done = self.env.step(actions)
        self.steps += self.n_envs
        self.episodes += int(done.sum())
        self.obs = self.env.reset_where(done) if done.any() else self.env.observe()
        return self.obs, reward, done


def collect_rollouts(env, net: PolicyValueNet, cfg: PPOConfig, rng: np.random.Generator, obs) -> tuple[RolloutBuffer, np.ndarray]:
    """Run ``cfg.unroll`` steps in every env; returns the buffer and the next observation."""
    T, E = cfg.unroll, env.n_envs
    o_buf = np.zeros((T, E, net.obs_dim))
    raw = np.zeros((T, E, net.obs_dim))
    a_buf = np.zeros((T, E, net.act_dim))
    lp, rw, vl, dn = (np.zeros((T, E)) for _ in range(4))
    for t in range(T):
        on = net.normalize(obs)
        a, logp = net.sample(on, rng)
        nxt, r, d = env.step(a)
        raw[t], o_buf[t], a_buf[t], lp[t] = obs, on, a, logp
        vl[t] = net.value(on)
        rw[t] = r * cfg.reward_scaling
        dn[t] = d
        obs = nxt
    boot = net.value(net.normalize(obs))
    return RolloutBuffer(o_buf, a_buf, lp, rw, vl, dn, boot, raw), obs


def minibatch_slices(n: int, k: int) -> list[slice]:
    """``k`` consecutive slices of equal size; the remainder joins the last one."""
    size = max(1, n // k)
    cuts = [i * size for i in range(min(k, n))] + [n]
    return [slice(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]


def ppo_update(net: PolicyValueNet, adam: AdamState, buffer: RolloutBuffer, cfg: PPOConfig,
               rng: np.random.Generator) -> dict:
    """Several epochs of clipped-surrogate minibatch SGD; ``net.params`` updated in place."""
    adv, ret = compute_gae(buffer.rewards, buffer.values, buffer.dones, buffer.bootstrap, cfg.gamma, cfg.gae_lambda)
    obs = buffer.obs.reshape(-1, net.obs_dim)
    act = buffer.actions.reshape(-1, net.act_dim)
    old = buffer.logp.ravel()
    adv, ret = adv.ravel(), ret.ravel()
    n = len(obs)
    start = net.params.copy()
    info = {}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for sl in minibatch_slices(n, cfg.n_minibatches):
            idx = perm[sl]
            mb = Minibatch(obs[idx], act[idx], old[idx], normalize_advantages(adv[idx]), ret[idx])
            loss, grad, info = ppo_loss(net, mb, cfg)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                net.params = start
                raise NonFiniteLossError(f"non-finite PPO loss ({loss}); update aborted, parameters restored")
            net.params = adam_step(adam, net.params, grad)
    if net.norm is not None:
        net.norm.update(buffer.raw_obs.reshape(-1, net.obs_dim))
    info["mean_reward"] = float(buffer.rewards.mean() / cfg.reward_scaling)
    return info
