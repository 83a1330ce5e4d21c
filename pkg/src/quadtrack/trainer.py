"""Joint tracker/generator training loop and plain tracker training.

Iterations are numbered from 1.  With refresh period K:

* the generator produces an initial motion set before iteration 1,
* at i % K == 0 a fresh set is sampled, envs are reset and returns cleared,
* every iteration collects one rollout and runs one PPO update,
* at i % K == K - 1 the baseline is updated from the completed episodic
  returns and the generator takes one step on L_recon + L_RL.

Each completed return is credited to the sample its env was tracking; a
sample's advantage is the mean of its returns minus the baseline.  Episodes
still running at a refresh are dropped.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import MotionClip
from .generator import CommandVocab, GenLatentModel, make_windows, rl_update, sample, state_features
from .kinematics import Morphology, standing_height
from .ppo import ActorCritic, EpisodeReturns, PpoHyper, RolloutBuffer, train_iteration
from .simenv import SimEnvConfig, VecEnv

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class JointTrainConfig:
    n_iter: int = 300
    k_r: int = 100
    n_samples: int = 16
    ema_alpha: float = 0.05
    generator_lr: float = 1e-4
    generator_updates: bool = True
    recon_batch: int = 32
    beta: float = 0.01
    commands: list = field(default_factory=list)  # empty: whole vocabulary
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.k_r < 2:
            raise TrainingError("k_r must be >= 2")
        if self.n_iter < self.k_r:
            raise TrainingError("n_iter must be >= k_r")
        if self.n_samples < 1:
            raise TrainingError("n_samples must be >= 1")
        if not 0 < self.ema_alpha <= 1:
            raise TrainingError("ema_alpha must lie in (0, 1]")
        if self.generator_lr < 0:
            raise TrainingError("generator_lr must be >= 0")


@dataclass
class EmaBaseline:
    alpha: float = 0.05
    b: float = 0.0
    initialized: bool = False

    def update(self, returns) -> float:
        r = np.asarray(list(returns), dtype=float)
        if r.size == 0:
            raise TrainingError("EMA baseline needs at least one return")
        m = float(r.mean())
        if not self.initialized:
            self.b = m
            self.initialized = True
        else:
            self.b = (1.0 - self.alpha) * self.b + self.alpha * m
        return self.b


def ema_update(baseline: EmaBaseline, returns) -> EmaBaseline:
    baseline.update(returns)
    return baseline


def assign_motions(n_samples: int, n_envs: int) -> np.ndarray:
    """Round-robin: env e tracks sample e mod n_samples."""
    if n_samples < 1:
        raise TrainingError("assign_motions needs at least one sample")
    return np.arange(n_envs) % n_samples


def per_sample_returns(completed, assignment: np.ndarray, n_samples: int) -> list[list[float]]:
    out: list[list[float]] = [[] for _ in range(n_samples)]
    for env, g in completed:
        out[int(assignment[env])].append(g)
    return out


def schedule(n_iter: int, k_r: int) -> tuple[list[int], list[int]]:
    """Refresh and generator-update iterations for a run."""
    it = range(1, n_iter + 1)
    return [i for i in it if i % k_r == 0], [i for i in it if i % k_r == k_r - 1]


def default_anchor(morph: Morphology, env_cfg: SimEnvConfig) -> np.ndarray:
    pose = np.asarray(env_cfg.default_pose, dtype=float)
    h = standing_height(morph, pose)
    return state_features(np.array([0.0, 0.0, h]), np.array([1.0, 0, 0, 0]), pose, np.zeros(12))[0]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "ppo", "gen", "recon")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


LOG_COLUMNS = ["iteration", "refresh", "gen_update", "mean_reward", "mean_r_track", "episodes", "failures",
               "policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac", "completed", "mean_return",
               "baseline", "l_recon", "l_rl"]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return repr(float(v))


class MetricsLog:
    def __init__(self, path=None, columns=LOG_COLUMNS):
        self.rows: list[dict] = []
        self.columns = list(columns)
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(self.columns)

    def add(self, row: dict):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow([_fmt(row.get(c)) for c in self.columns])

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]


@dataclass
class JointResult:
    ac: ActorCritic
    model: GenLatentModel
    log: MetricsLog
    baseline: EmaBaseline
    samples: list


def run_joint_training(morph: Morphology, env_cfg: SimEnvConfig, hyper: PpoHyper, model: GenLatentModel,
                       vocab: CommandVocab, cfg: JointTrainConfig, seed: int = 0, num_threads: int = 1,
                       recon_clips=None, anchor=None, log_path=None, checkpoint_dir=None,
                       ac: ActorCritic | None = None) -> JointResult:
    rngs = _streams(seed)
    anchor = default_anchor(morph, env_cfg) if anchor is None else np.asarray(anchor, dtype=float)
    commands = list(cfg.commands) or list(vocab.ids)
    for c in commands:
        vocab.index(c)
    model.set_lr(cfg.generator_lr)
    if ac is None:
        ac = ActorCritic.create(env_cfg.actor_dim, env_cfg.critic_dim, 12, hyper, rngs["init"])
    recon = None
    if recon_clips:
        raw, cond, anc = make_windows(model, vocab, recon_clips, stride=max(1, model.M // 5))
        recon = (model.normalize_window(raw), cond, anc)

    def generate(tag: int):
        samples = [sample(model, vocab, commands[k % len(commands)], anchor, rngs["gen"]) for k in range(cfg.n_samples)]
        clips = [s.to_clip(f"gen{tag}_{k}", vocab) for k, s in enumerate(samples)]
        return samples, clips

    samples, clips = generate(0)
    assignment = assign_motions(len(samples), hyper.n_envs)

    if vocab.dim != env_cfg.command_dim:
        raise TrainingError(f"command embedding dim {vocab.dim} != simenv command_dim {env_cfg.command_dim}")

    def emb():
        return np.stack([vocab.embed(samples[a].command) for a in assignment])

    env = VecEnv(morph, env_cfg, [clips[a] for a in assignment], seed=seed, command_embeddings=emb(),
                 num_threads=num_threads)
    buffer = RolloutBuffer(hyper.n_envs, hyper.n_steps, env_cfg.actor_dim, env_cfg.critic_dim, 12)
    returns = EpisodeReturns(hyper.n_envs)
    baseline = EmaBaseline(cfg.ema_alpha)
    mlog = MetricsLog(log_path)
    obs = env.reset_all()
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None

    def save(suffix=""):
        if ckpt:
            ckpt.mkdir(parents=True, exist_ok=True)
            ac.save(ckpt / f"tracker{suffix}.ckpt")
            model.save(ckpt / f"generator{suffix}.ckpt")

    try:
        for i in range(1, cfg.n_iter + 1):
            row = {"iteration": i, "refresh": False, "gen_update": False}
            if i % cfg.k_r == 0:
                samples, clips = generate(i)
                assignment = assign_motions(len(samples), hyper.n_envs)
                env.set_motions([clips[a] for a in assignment], emb())
                obs = env.reset_all()
                returns.reset()
                row["refresh"] = True
            if buffer.filled:
                raise TrainingError("rollout buffer not empty at iteration start")
            obs, rs, stats = train_iteration(env, ac, buffer, returns, obs, hyper, rngs["ppo"])
            row.update(mean_reward=rs.mean_reward, mean_r_track=rs.mean_r_track, episodes=rs.episodes,
                       failures=rs.failures, **{k: stats.get(k) for k in
                                                ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac")})
            row["completed"] = len(returns.completed)
            if i % cfg.k_r == cfg.k_r - 1 and cfg.generator_updates:
                row["gen_update"] = True
                per = per_sample_returns(returns.completed, assignment, len(samples))
                have = [k for k in range(len(samples)) if per[k]]
                if not have:
                    log.warning("iteration %d: no completed episodes; generator step skipped", i)
                else:
                    b = baseline.update(returns.values())
                    adv = [float(np.mean(per[k])) - b for k in have]
                    batch = None
                    if recon is not None:
                        idx = rngs["recon"].choice(len(recon[0]), size=min(cfg.recon_batch, len(recon[0])),
                                                   replace=False)
                        batch = (recon[0][idx], recon[1][idx], recon[2][idx])
                    g = rl_update(model, vocab, [samples[k] for k in have], adv, batch, cfg.beta, rngs["recon"])
                    row.update(baseline=b, l_rl=g["l_rl"], l_recon=g["l_recon"],
                               mean_return=float(np.mean(returns.values())))
            mlog.add(row)
            if cfg.checkpoint_every and i % cfg.checkpoint_every == 0:
                save()
    except Exception as e:
        save(".failed")
        env.close()
        if isinstance(e, TrainingError):
            raise
        raise TrainingError(f"iteration {i}: {type(e).__name__}: {e}") from e
    save()
    env.close()
    return JointResult(ac, model, mlog, baseline, samples)


TRACKER_COLUMNS = ["iteration", "mean_reward", "mean_r_track", "episodes", "failures", "policy_loss",
                   "value_loss", "entropy", "approx_kl", "clip_frac"]


@dataclass
class TrackerResult:
    ac: ActorCritic
    log: MetricsLog
    r_track: list


def run_tracker_training(morph: Morphology, env_cfg: SimEnvConfig, hyper: PpoHyper, clips: list[MotionClip],
                         n_iter: int, seed: int = 0, num_threads: int = 1, log_path=None, checkpoint_dir=None,
                         stop_r_track: float | None = None, stop_window: int = 20, command_embeddings=None,
                         ac: ActorCritic | None = None) -> TrackerResult:
    """PPO tracking of a fixed clip set, envs assigned round-robin.

    With ``stop_r_track`` set, training ends once the ``stop_window``-iteration
    moving average of r_track exceeds it.
    """
    if not clips:
        raise TrainingError("tracker training needs at least one clip")
    rngs = _streams(seed)
    if ac is None:
        ac = ActorCritic.create(env_cfg.actor_dim, env_cfg.critic_dim, 12, hyper, rngs["init"])
    assignment = assign_motions(len(clips), hyper.n_envs)
    cmd = None if command_embeddings is None else np.asarray(command_embeddings)[assignment]
    env = VecEnv(morph, env_cfg, [clips[a] for a in assignment], seed=seed, command_embeddings=cmd,
                 num_threads=num_threads)
    buffer = RolloutBuffer(hyper.n_envs, hyper.n_steps, env_cfg.actor_dim, env_cfg.critic_dim, 12)
    returns = EpisodeReturns(hyper.n_envs)
    mlog = MetricsLog(log_path, TRACKER_COLUMNS)
    obs = env.reset_all()
    hist: list[float] = []
    try:
        for i in range(1, n_iter + 1):
            obs, rs, stats = train_iteration(env, ac, buffer, returns, obs, hyper, rngs["ppo"])
            hist.append(rs.mean_r_track)
            mlog.add({"iteration": i, "mean_reward": rs.mean_reward, "mean_r_track": rs.mean_r_track,
                      "episodes": rs.episodes, "failures": rs.failures,
                      **{k: stats.get(k) for k in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac")}})
            if stop_r_track is not None and len(hist) >= stop_window and np.mean(hist[-stop_window:]) > stop_r_track:
                break
    except Exception as e:
        env.close()
        raise TrainingError(f"iteration {i}: {type(e).__name__}: {e}") from e
    env.close()
    if checkpoint_dir:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        ac.save(Path(checkpoint_dir) / "tracker.ckpt")
    return TrackerResult(ac, mlog, hist)

