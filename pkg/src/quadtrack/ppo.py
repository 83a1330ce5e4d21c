"""PPO with GAE and an asymmetric actor-critic.

The actor sees only the actor observation and outputs the mean of a diagonal
Gaussian over normalized joint targets, with a state-independent log-std
vector.  The critic sees the full critic observation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nets import (
    AdamState,
    GaussianHead,
    MlpNet,
    NetError,
    adam_step,
    clip_grad_norm,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class PpoError(RuntimeError):
    pass


@dataclass
class PpoHyper:
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    n_epochs: int = 5
    n_minibatches: int = 4
    value_coef: float = 1.0
    entropy_coef: float = 0.005
    max_grad_norm: float = 1.0
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    n_envs: int = 64
    n_steps: int = 24
    hidden: list = field(default_factory=lambda: [256, 128, 64, 32])
    activation: str = "elu"
    init_log_std: float = -1.0
    actor_out_scale: float = 0.01

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise PpoError("clip_eps must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise PpoError("gamma and lam must lie in (0, 1]")
        if self.n_epochs < 1 or self.n_minibatches < 1 or self.n_envs < 1 or self.n_steps < 1:
            raise PpoError("epochs, minibatches, envs and steps must be >= 1")
        if self.lr_actor < 0 or self.lr_critic < 0:
            raise PpoError("learning rates must be >= 0")


class ActorCritic:
    def __init__(self, actor: MlpNet, critic: MlpNet, log_std: np.ndarray, lr_actor: float, lr_critic: float):
        self.actor = actor
        self.critic = critic
        self.log_std = np.asarray(log_std, dtype=float).copy()
        self.act_dim = actor.layer_dims[-1]
        if self.log_std.shape != (self.act_dim,):
            raise PpoError("log_std must have one entry per action dimension")
        self.actor_opt = AdamState.for_params(actor.param_count + self.act_dim, lr_actor)
        self.critic_opt = AdamState.for_params(critic.param_count, lr_critic)

    @classmethod
    def create(cls, actor_dim: int, critic_dim: int, act_dim: int, hyper: PpoHyper, rng: np.random.Generator):
        hidden = list(hyper.hidden)
        actor = MlpNet.init([actor_dim] + hidden + [act_dim], hyper.activation, rng, out_scale=hyper.actor_out_scale)
        critic = MlpNet.init([critic_dim] + hidden + [1], hyper.activation, rng)
        return cls(actor, critic, np.full(act_dim, hyper.init_log_std), hyper.lr_actor, hyper.lr_critic)

    def head(self, actor_obs) -> GaussianHead:
        return GaussianHead(self.actor(actor_obs), self.log_std)

    def act(self, actor_obs, rng: np.random.Generator):
        head = self.head(actor_obs)
        a = head.sample(rng)
        return a, head.log_prob(a)

    def mean_action(self, actor_obs) -> np.ndarray:
        return self.actor(actor_obs)

    def value(self, critic_obs) -> np.ndarray:
        return self.critic(critic_obs)[:, 0]

    def actor_vector(self) -> np.ndarray:
        return np.concatenate([self.actor.params, self.log_std])

    def set_actor_vector(self, vec: np.ndarray):
        n = self.actor.param_count
        self.actor.params = vec[:n].copy()
        self.log_std = vec[n:].copy()

    def save(self, path):
        save_checkpoint(path, {
            "actor": (self.actor, None),
            "log_std": (self.log_std, None),
            "critic": (self.critic, self.critic_opt),
            "actor_opt": (self.actor_vector(), self.actor_opt),
        })

    @classmethod
    def load(cls, path) -> "ActorCritic":
        d = load_checkpoint(path)
        try:
            actor, log_std, (critic, copt), (_, aopt) = d["actor"][0], d["log_std"][0], d["critic"], d["actor_opt"]
        except KeyError as e:
            raise PpoError(f"checkpoint lacks entry {e}") from None
        ac = cls(actor, critic, log_std, aopt.lr, copt.lr)
        ac.actor_opt, ac.critic_opt = aopt, copt
        return ac


class RolloutBuffer:
    """Transitions laid out as (step, env)."""

    def __init__(self, n_envs: int, n_steps: int, actor_dim: int, critic_dim: int, act_dim: int):
        self.n_envs, self.n_steps = n_envs, n_steps
        self.actor_obs = np.zeros((n_steps, n_envs, actor_dim))
        self.critic_obs = np.zeros((n_steps, n_envs, critic_dim))
        self.actions = np.zeros((n_steps, n_envs, act_dim))
        self.rewards = np.zeros((n_steps, n_envs))
        self.dones = np.zeros((n_steps, n_envs), dtype=bool)
        self.values = np.zeros((n_steps, n_envs))
        self.log_probs = np.zeros((n_steps, n_envs))
        self.r_track = np.zeros((n_steps, n_envs))
        self.filled = 0

    def __len__(self) -> int:
        return self.filled * self.n_envs

    @property
    def full(self) -> bool:
        return self.filled == self.n_steps

    def add(self, actor_obs, critic_obs, actions, rewards, dones, values, log_probs, r_track=None):
        if self.full:
            raise PpoError("rollout buffer is full")
        t = self.filled
        self.actor_obs[t] = actor_obs
        self.critic_obs[t] = critic_obs
        self.actions[t] = actions
        self.rewards[t] = rewards
        self.dones[t] = dones
        self.values[t] = values
        self.log_probs[t] = log_probs
        if r_track is not None:
            self.r_track[t] = r_track
        self.filled += 1

    def clear(self):
        self.filled = 0


class EpisodeReturns:
    """Running return per env and the list of completed episodic returns."""

    def __init__(self, n_envs: int):
        self.G = np.zeros(n_envs)
        self.completed: list[tuple[int, float]] = []  # (env index, return)

    def reset(self):
        self.G[:] = 0.0
        self.completed = []

    def add(self, rewards, dones):
        self.G += rewards
        for i in np.nonzero(dones)[0]:
            self.completed.append((int(i), float(self.G[i])))
            self.G[i] = 0.0

    def values(self) -> list[float]:
        return [g for _, g in self.completed]


@dataclass
class RolloutStats:
    mean_reward: float
    mean_r_track: float
    episodes: int
    failures: int


def collect_rollout(env, ac: ActorCritic, buffer: RolloutBuffer, returns: EpisodeReturns, obs,
                    rng: np.random.Generator, gamma: float):
    """Fill ``buffer`` with ``n_steps`` transitions per env.

    Time-limit endings bootstrap from the value of the pre-reset observation
    (folded into the stored reward); failures are terminal.  Returns
    (last_obs, bootstrap_values, RolloutStats).
    """
    if buffer.filled:
        raise PpoError("rollout buffer must be empty before collection")
    episodes = failures = 0
    for _ in range(buffer.n_steps):
        actions, logp = ac.act(obs.actor, rng)
        values = ac.value(obs.critic)
        next_obs, rew, done, info = env.step(actions)
        r = rew.total.astype(float).copy()
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(values)) and np.all(np.isfinite(logp))):
            bad = np.nonzero(~(np.isfinite(r) & np.isfinite(values) & np.isfinite(logp)))[0].tolist()
            raise PpoError(f"non-finite transition in envs {bad}")
        timeout = done & ~info["failed"]
        if timeout.any():
            r[timeout] += gamma * ac.value(info["terminal_obs"].critic[timeout])
        buffer.add(obs.actor, obs.critic, actions, r, done, values, logp, rew.r_track)
        returns.add(rew.total, done)
        episodes += int(done.sum())
        failures += int(info["failed"].sum())
        obs = next_obs
    stats = RolloutStats(float(buffer.rewards.mean()), float(buffer.r_track.mean()), episodes, failures)
    return obs, ac.value(obs.critic), stats


def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """GAE(lambda) over (T, N) arrays; ``dones[t]`` ends the episode after step t."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if rewards.ndim == 1:
        rewards, values, dones = rewards[:, None], values[:, None], dones[:, None]
        bootstrap = np.atleast_1d(bootstrap)
        squeeze = True
    else:
        squeeze = False
    bootstrap = np.asarray(bootstrap, dtype=float)
    if rewards.shape != values.shape or rewards.shape != dones.shape or bootstrap.shape != rewards.shape[1:]:
        raise PpoError("rewards, values, dones and bootstrap lengths do not match")
    T = len(rewards)
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1])
    for t in range(T - 1, -1, -1):
        nxt = bootstrap if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    ret = adv + values
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


def normalize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-8)


def surrogate(ratio, adv, eps):
    """Per-sample clipped objective min(rho A, clip(rho) A) and its d/d rho."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * adv
    obj = np.minimum(unclipped, clipped)
    d_ratio = np.where(unclipped <= clipped, adv, 0.0)
    return obj, d_ratio


def ppo_losses(ac: ActorCritic, actor_obs, critic_obs, actions, old_logp, adv, ret, hyper: PpoHyper,
               with_grads: bool = True):
    """Total loss, its parts, and (actor_grad, critic_grad) for one minibatch."""
    n = len(adv)
    mean, tape_a = ac.actor.forward(actor_obs)
    head = GaussianHead(mean, ac.log_std)
    logp = head.log_prob(actions)
    ratio = np.exp(logp - old_logp)
    obj, d_ratio = surrogate(ratio, adv, hyper.clip_eps)
    pol_loss = -float(obj.mean())
    ent = float(head.entropy().mean())
    v, tape_c = ac.critic.forward(critic_obs)
    err = v[:, 0] - ret
    v_loss = float(np.mean(err * err))
    total = pol_loss + hyper.value_coef * v_loss - hyper.entropy_coef * ent
    parts = {
        "policy_loss": pol_loss,
        "value_loss": v_loss,
        "entropy": ent,
        "approx_kl": float(np.mean((ratio - 1) - np.log(ratio))),
        "clip_frac": float(np.mean(np.abs(ratio - 1) > hyper.clip_eps)),
    }
    if not with_grads:
        return total, parts, None
    g_logp = -d_ratio * ratio / n
    g_mean, g_ls = head.log_prob_grads(actions)
    ga, _ = ac.actor.backward(tape_a, g_logp[:, None] * g_mean)
    g_log_std = np.sum(g_logp[:, None] * g_ls, axis=0) - hyper.entropy_coef * head.entropy_grad()[0]
    gc, _ = ac.critic.backward(tape_c, (hyper.value_coef * 2.0 * err / n)[:, None])
    return total, parts, (np.concatenate([ga, g_log_std]), gc)


def ppo_update(ac: ActorCritic, buffer: RolloutBuffer, adv, ret, hyper: PpoHyper, rng: np.random.Generator) -> dict:
    """N_epochs passes over shuffled minibatches; returns mean loss statistics."""
    if not buffer.full:
        raise PpoError("PPO update needs a full buffer")
    A = buffer.actor_obs.reshape(-1, buffer.actor_obs.shape[-1])
    C = buffer.critic_obs.reshape(-1, buffer.critic_obs.shape[-1])
    act = buffer.actions.reshape(-1, buffer.actions.shape[-1])
    old = buffer.log_probs.reshape(-1)
    adv = normalize(np.asarray(adv, dtype=float).reshape(-1))
    ret = np.asarray(ret, dtype=float).reshape(-1)
    n = len(adv)
    mb = max(1, n // hyper.n_minibatches)
    acc: dict[str, list] = {}
    for _ in range(hyper.n_epochs):
        perm = rng.permutation(n)
        for k in range(hyper.n_minibatches):
            idx = perm[k * mb:(k + 1) * mb] if k < hyper.n_minibatches - 1 else perm[k * mb:]
            if idx.size == 0:
                continue
            total, parts, (ga, gc) = ppo_losses(ac, A[idx], C[idx], act[idx], old[idx], adv[idx], ret[idx], hyper)
            if not np.isfinite(total) or not (np.all(np.isfinite(ga)) and np.all(np.isfinite(gc))):
                raise PpoError(f"non-finite PPO loss ({total}); update aborted")
            ga, na = clip_grad_norm(ga, hyper.max_grad_norm)
            gc, nc = clip_grad_norm(gc, hyper.max_grad_norm)
            try:
                ac.set_actor_vector(adam_step(ac.actor_opt, ac.actor_vector(), ga))
                ac.critic.params = adam_step(ac.critic_opt, ac.critic.params, gc)
            except NetError as e:
                raise PpoError(str(e)) from e
            parts["loss"] = total
            parts["grad_norm_actor"] = na
            parts["grad_norm_critic"] = nc
            for key, val in parts.items():
                acc.setdefault(key, []).append(val)
    buffer.clear()
    return {k: float(np.mean(v)) for k, v in acc.items()}


def train_iteration(env, ac: ActorCritic, buffer: RolloutBuffer, returns: EpisodeReturns, obs, hyper: PpoHyper,
                    rng: np.random.Generator):
    """One rollout + GAE + PPO update.  Returns (obs, RolloutStats, update stats)."""
    obs, boot, rs = collect_rollout(env, ac, buffer, returns, obs, rng, hyper.gamma)
    adv, ret = compute_gae(buffer.rewards, buffer.values, buffer.dones, boot, hyper.gamma, hyper.lam)
    stats = ppo_update(ac, buffer, adv, ret, hyper, rng)
    return obs, rs, stats
