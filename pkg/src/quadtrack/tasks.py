"""Synthetic tasks with known answers, used by the learning checks and the CLI demos."""
from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .dataset import AnnotationTriple, MotionClip
from .generator import FRAME_FEATURES, STATE_FEATURES, CommandVocab, GenLatentModel
from .kinematics import Morphology, standing_height
from .nets import MlpNet
from .simenv import STANDING_POSE, DynamicsParams, SimEnvConfig


def sinusoid_clips(morph: Morphology, n_clips: int = 8, n_frames: int = 250, height: float = 1.0,
                   seed: int = 0) -> list[MotionClip]:
    """Joint-space sinusoids around the standing pose with the root held fixed in the air."""
    rng = np.random.default_rng(seed)
    pose = np.array(STANDING_POSE)
    t = np.arange(n_frames) / 50.0
    clips = []
    for c in range(n_clips):
        amp = rng.uniform(0.2, 0.5, 12)
        amp[0::3] *= 0.3
        freq = rng.uniform(0.5, 1.0, 12)
        phase = rng.uniform(0, 2 * np.pi, 12)
        q = np.clip(pose + amp * np.sin(2 * np.pi * freq * t[:, None] + phase), morph.lower, morph.upper)
        clips.append(MotionClip(f"sinusoid{c}", np.tile([0.0, 0.0, height], (n_frames, 1)),
                                np.tile([1.0, 0, 0, 0], (n_frames, 1)), q, np.zeros((n_frames, 4), dtype=bool),
                                AnnotationTriple("sinusoid", "synthetic", "track the sinusoid"), "synthetic",
                                flags=("synthetic",)))
    return clips


def sinusoid_env_config(weight_scale: float = 15.0, **overrides) -> SimEnvConfig:
    """No gravity, no ground, nominal dynamics; tracking weights scaled so the untrained policy scores low."""
    base = SimEnvConfig()
    tw = {k: v * weight_scale for k, v in base.track_weights.items()}
    kw = dict(ground=False, nominal=asdict(DynamicsParams(gravity=0.0)), randomize=False, reset_noise=0.05,
              track_weights=tw, max_episode_steps=200)
    kw.update(overrides)
    return SimEnvConfig(**kw)


def two_mode_frames(morph: Morphology, n_frames: int = 40, jump_frame: int = 20, jump: float = 1.0):
    """Mode A: standing sway.  Mode B: the same sway with the root teleported ``jump`` m forward."""
    pose = np.array(STANDING_POSE)
    h = standing_height(morph, pose)
    t = np.arange(n_frames) / 50.0
    q = np.tile(pose, (n_frames, 1))
    q[:, 1::3] += 0.05 * np.sin(2 * np.pi * t)[:, None]
    root = np.tile([0.0, 0.0, h], (n_frames, 1))
    frames_a = np.concatenate([root, np.tile([1.0, 0, 0, 0], (n_frames, 1)), q, np.ones((n_frames, 4))], axis=1)
    frames_b = frames_a.copy()
    frames_b[jump_frame:, 0] += jump
    return frames_a, frames_b


def two_mode_model(morph: Morphology, cond_dim: int = 8, n_frames: int = 40, gain: float = 20.0,
                   seed: int = 0) -> tuple[GenLatentModel, CommandVocab]:
    """Generator whose decoder sends z_0 > 0 to mode A and z_0 < 0 to mode B.

    The decoder has one tanh hidden unit h = tanh(gain * z_0) and outputs
    mid + h * half_diff, so the decoded root jump is (1 - h) / 2 metres.
    The prior is a single linear layer initialised to zero, i.e. N(0, I):
    each mode starts with probability 1/2.
    """
    d = 2
    a, b = two_mode_frames(morph, n_frames)
    D = n_frames * FRAME_FEATURES
    rng = np.random.default_rng(seed)
    enc = MlpNet.init([D, 2 * d], "identity", rng, out_scale=0.01)
    dec = MlpNet([d + cond_dim, 1, D], "tanh")
    (w1, b1), (w2, b2) = dec.layers()
    w1[0, 0] = gain
    w2[0] = ((a - b) / 2).ravel()
    b2[...] = ((a + b) / 2).ravel()
    prior = MlpNet([cond_dim + STATE_FEATURES, 2 * d], "identity")
    vocab = CommandVocab.from_entries([{"id": "sway", "text": "sway in place"}], cond_dim, seed)
    return GenLatentModel(enc, dec, prior, n_frames, d, cond_dim, morph), vocab


def max_root_jump(frames: np.ndarray) -> float:
    """Largest frame-to-frame root displacement of a decoded (M, F) window."""
    return float(np.max(np.linalg.norm(np.diff(frames[:, 0:3], axis=0), axis=1), initial=0.0))


def mode_a_probability(model: GenLatentModel, vocab: CommandVocab, anchor, n: int = 1000, seed: int = 12345) -> float:
    """Fraction of prior samples that decode to the trackable mode (no root jump above 0.5 m)."""
    from .generator import sample

    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n):
        s = sample(model, vocab, vocab.ids[0], anchor, rng)
        hits += max_root_jump(s.motion) <= 0.5
    return hits / n


def duplicate_corpus(k: int = 20, copies: int = 5, n_frames: int = 100, sigma: float = 1e-3,
                     seed: int = 0) -> list[MotionClip]:
    """k distinct joint sinusoids, each followed by ``copies`` noisy duplicates.

    Feet never touch down, so each clip is a single fixed-window segment.
    Ids are ``s{k}_{copy}`` with copy 0 the clean original.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / 50.0
    clips = []
    for s in range(k):
        amp = rng.uniform(0.1, 0.4, 12)
        freq = rng.uniform(0.5, 2.0, 12)
        phase = rng.uniform(0, 2 * np.pi, 12)
        q = np.array(STANDING_POSE) + amp * np.sin(2 * np.pi * freq * t[:, None] + phase)
        for d in range(copies + 1):
            qq = q + rng.normal(0.0, sigma, q.shape) if d else q
            clips.append(MotionClip(f"s{s:02d}_{d}", np.tile([0.0, 0.0, 0.3], (n_frames, 1)),
                                    np.tile([1.0, 0, 0, 0], (n_frames, 1)), qq, np.zeros((n_frames, 4), dtype=bool),
                                    AnnotationTriple("", "", ""), "synthetic", flags=("synthetic", "raw")))
    return clips
