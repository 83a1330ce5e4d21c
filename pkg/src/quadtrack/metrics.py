"""Tracking-fidelity metrics (MJPE, MBPE) and the policy evaluation harness."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import MotionClip
from .kinematics import KEYPOINTS, Morphology, fk_batch

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def overlap(ref: MotionClip, sim: MotionClip) -> tuple[int, bool]:
    """Number of compared frames and whether the longer clip was truncated."""
    T = min(ref.n_frames, sim.n_frames)
    if T == 0:
        raise MetricError("clips have no overlapping frames")
    return T, ref.n_frames != sim.n_frames


def per_frame_mjpe(ref: MotionClip, sim: MotionClip) -> np.ndarray:
    T, _ = overlap(ref, sim)
    return np.mean(np.abs(ref.q[:T] - sim.q[:T]), axis=1)


def mjpe(ref: MotionClip, sim: MotionClip) -> float:
    """Mean absolute joint-angle error over all frames and the 12 actuated joints."""
    T, _ = overlap(ref, sim)
    return float(np.mean(np.abs(ref.q[:T] - sim.q[:T])))


def body_positions(clip: MotionClip, morph: Morphology, T: int | None = None) -> np.ndarray:
    T = clip.n_frames if T is None else T
    return fk_batch(morph, clip.root_pos[:T], clip.root_quat[:T], clip.q[:T])


def per_body_mbpe(ref: MotionClip, sim: MotionClip, morph: Morphology) -> dict[str, float]:
    T, _ = overlap(ref, sim)
    err = np.abs(body_positions(ref, morph, T) - body_positions(sim, morph, T))
    return {k: float(v) for k, v in zip(KEYPOINTS, err.mean(axis=(0, 2)))}


def mbpe(ref: MotionClip, sim: MotionClip, morph: Morphology) -> float:
    """Mean absolute world-position error over the 13 bodies, 3 axes and all frames."""
    T, _ = overlap(ref, sim)
    return float(np.mean(np.abs(body_positions(ref, morph, T) - body_positions(sim, morph, T))))


@dataclass
class TrackingEval:
    clip_id: str
    mjpe: float
    mbpe: float
    per_frame_mjpe: np.ndarray
    per_body_mbpe: dict
    episode_completion: float
    mean_r_track: float
    truncated: bool = False
    failed: bool = False
    termination: str = "none"


@dataclass
class EvalSummary:
    per_clip: list[TrackingEval]
    mjpe: float
    mbpe: float
    episode_completion: float
    mean_r_track: float
    failed_count: int = 0
    sim_clips: list = field(default_factory=list)


def summarize(evals: list[TrackingEval], sim_clips=None) -> EvalSummary:
    ok = [e for e in evals if not e.failed]
    if ok:
        agg = {k: float(np.mean([getattr(e, k) for e in ok])) for k in ("mjpe", "mbpe", "episode_completion", "mean_r_track")}
    else:
        agg = dict(mjpe=float("nan"), mbpe=float("nan"), episode_completion=0.0, mean_r_track=0.0)
    return EvalSummary(evals, failed_count=len(evals) - len(ok), sim_clips=sim_clips or [], **agg)


def evaluate_policy(policy, clips: list[MotionClip], morph: Morphology, env_cfg, seed: int = 0,
                    command_embeddings=None, max_steps: int | None = None) -> EvalSummary:
    """Deterministic rollouts (mean action, nominal dynamics) of ``policy`` on each clip.

    ``policy`` maps an actor-observation batch to a mean-action batch.  One
    environment per clip; all are stepped together and each stops at its own
    termination.
    """
    from .simenv import VecEnv  # local import keeps metrics importable without the simulator

    cfg = env_cfg.evaluation()
    env = VecEnv(morph, cfg, clips, seed=seed, command_embeddings=command_embeddings)
    obs = env.reset_all()
    n = len(clips)
    horizons = np.array([c.n_frames - 1 for c in clips])
    if max_steps is not None:
        horizons = np.minimum(horizons, max_steps)
    traces = [[env.snapshot(i)] for i in range(n)]
    r_track = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    reasons = ["none"] * n
    steps = np.zeros(n, dtype=int)
    for _ in range(int(horizons.max(initial=0))):
        if not alive.any():
            break
        try:
            action = np.asarray(policy(obs.actor), dtype=float)
            _, rew, done, info = env.step(action, auto_reset=False)
        except FloatingPointError:
            failed[alive] = True
            break
        for i in np.nonzero(alive)[0]:
            if not np.all(np.isfinite(env.state.q[i])):
                failed[i] = True
                alive[i] = False
                continue
            steps[i] += 1
            traces[i].append(env.snapshot(i))
            r_track[i].append(float(rew.r_track[i]))
            if done[i] or steps[i] >= horizons[i]:
                alive[i] = False
                reasons[i] = info["reason"][i] if done[i] else "horizon"
        obs = env.observe()
    evals, sims = [], []
    for i, clip in enumerate(clips):
        sim = _trace_to_clip(clip, traces[i])
        sims.append(sim)
        if failed[i]:
            log.warning("clip %s: simulation produced non-finite state; excluded", clip.id)
            evals.append(TrackingEval(clip.id, float("nan"), float("nan"), np.array([]), {}, 0.0, 0.0, failed=True, termination="nan"))
            continue
        T, trunc = overlap(clip, sim)
        evals.append(TrackingEval(
            clip.id, mjpe(clip, sim), mbpe(clip, sim, morph), per_frame_mjpe(clip, sim),
            per_body_mbpe(clip, sim, morph),
            float(steps[i] / max(horizons[i], 1)),
            float(np.mean(r_track[i])) if r_track[i] else 0.0,
            truncated=trunc, termination=reasons[i],
        ))
    return summarize(evals, sims)


def _trace_to_clip(ref: MotionClip, trace) -> MotionClip:
    pos, quat, q, qd, contact = (np.array([t[k] for t in trace]) for k in range(5))
    return MotionClip(f"{ref.id}.sim", pos, quat, q, contact, ref.annotations, "rollout", qd=qd,
                      flags=tuple(set(ref.flags) | {"raw"}))


def write_eval_csv(path, summary: EvalSummary):
    cols = ["clip_id", "mjpe", "mbpe", "episode_completion", "mean_r_track", "truncated", "failed", "termination"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for e in summary.per_clip:
            w.writerow([e.clip_id, repr(e.mjpe), repr(e.mbpe), repr(e.episode_completion), repr(e.mean_r_track),
                        int(e.truncated), int(e.failed), e.termination])
        w.writerow(["__aggregate__", repr(summary.mjpe), repr(summary.mbpe), repr(summary.episode_completion),
                    repr(summary.mean_r_track), 0, summary.failed_count, ""])


def write_trace_csv(path, ev: TrackingEval):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame", "mjpe"])
        for t, v in enumerate(ev.per_frame_mjpe):
            w.writerow([t, repr(float(v))])
